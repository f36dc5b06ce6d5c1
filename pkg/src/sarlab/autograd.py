"""Dense fp64 tensors with reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`.  When gradient recording is
enabled and at least one input requires a gradient, the output keeps a
reference to its inputs and a closure mapping the upstream gradient to one
gradient per input.  :func:`backward` walks that record in reverse
topological order.

Broadcasting is deliberately limited to the row-vector case (``add_bias``,
``mul_row``); every other binary op requires identical shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "tensor", "parameter", "no_grad", "grad_enabled",
    "backward", "matmul", "transpose", "add", "sub", "mul", "scale", "add_bias",
    "mul_row", "dot", "concat", "stack", "take_rows", "row", "segment_sum",
    "segment_softmax", "row_softmax", "masked_log_softmax", "pick",
    "leaky_relu", "gelu", "exp", "log", "clamp_min", "maxpool_rows", "sum",
    "mean", "sq_norm", "l2_norm", "dropout", "layer_norm",
    "multihead_attention",
]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shapes."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (evaluation, feature export)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar for the handful of ops that need it in tests
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check(cond: bool, op: str, *tensors) -> None:
    if not cond:
        shapes = ", ".join(str(getattr(t, "shape", np.shape(t))) for t in tensors)
        raise ShapeError(f"{op}: incompatible shapes {shapes}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that require a gradient but are not reachable keep whatever
    ``.grad`` they had; callers zero them first.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim in (1, 2) and b.data.ndim in (1, 2)
           and a.shape[-1] == b.shape[0], "matmul", a, b)
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:  # (k,) @ (k, m)
            return B @ g, np.outer(A, g)
        if B.ndim == 1:  # (n, k) @ (k,)
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    _check(a.data.ndim == 2, "transpose", a)
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 1 and a.shape == b.shape, "dot", a, b)
    A, B = a.data, b.data
    return _make(np.asarray(A @ B), (a, b), "dot", lambda g: (g * B, g * A))


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", a, b)
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "mul", a, b)
    A, B = a.data, b.data
    return _make(A * B, (a, b), "mul", lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: ``a`` is (n, m), ``b`` is (m,)."""
    _check(a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0],
           "add_bias", a, b)
    return _make(a.data + b.data, (a, b), "add_bias", lambda g: (g, g.sum(axis=0)))


def mul_row(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise scaling: ``a`` is (n, m), ``b`` is (m,)."""
    _check(a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0],
           "mul_row", a, b)
    A, B = a.data, b.data
    return _make(A * B, (a, b), "mul_row", lambda g: (g * B, (g * A).sum(axis=0)))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    A = a.data
    factor = np.where(A > 0, 1.0, slope)
    return _make(A * factor, (a,), "leaky_relu", lambda g: (g * factor,))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GeLU."""
    A = a.data
    cdf = 0.5 * (1.0 + erf(A / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * A * A)
    return _make(A * cdf, (a,), "gelu", lambda g: (g * (cdf + A * pdf),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    A = a.data
    return _make(np.log(A), (a,), "log", lambda g: (g / A,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    A = a.data
    keep = A >= floor
    return _make(np.where(keep, A, floor), (a,), "clamp_min", lambda g: (g * keep,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity when not training."""
    if not training or rate <= 0.0 or rng is None:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * mask, (a,), "dropout", lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), "mean",
                 lambda g: (np.full(shape, float(g) / n),))


def sq_norm(a: Tensor) -> Tensor:
    A = a.data
    return _make(np.asarray((A * A).sum()), (a,), "sq_norm", lambda g: (2.0 * g * A,))


def l2_norm(a: Tensor) -> Tensor:
    A = a.data
    n = np.sqrt((A * A).sum())
    return _make(np.asarray(n), (a,), "l2_norm",
                 lambda g: (g * A / n if n > 0 else np.zeros_like(A),))


def maxpool_rows(a: Tensor) -> Tensor:
    """Column-wise max over the rows of an (n, d) matrix; ties route to the first row."""
    _check(a.data.ndim == 2 and a.shape[0] >= 1, "maxpool_rows", a)
    A = a.data
    idx = A.argmax(axis=0)
    cols = np.arange(A.shape[1])

    def bw(g):
        ga = np.zeros_like(A)
        ga[idx, cols] = g
        return (ga,)

    return _make(A[idx, cols], (a,), "maxpool_rows", bw)


# ---------------------------------------------------------------------------
# structural


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    nd = datas[0].ndim
    ok = all(d.ndim == nd for d in datas) and all(
        d.shape[:axis] + d.shape[axis + 1:] == datas[0].shape[:axis] + datas[0].shape[axis + 1:]
        for d in datas)
    _check(ok, "concat", *parts)
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _make(np.concatenate(datas, axis=axis), tuple(parts), "concat", bw)


def stack(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into an (n, d) matrix."""
    datas = [v.data for v in vectors]
    _check(all(d.ndim == 1 and d.shape == datas[0].shape for d in datas), "stack", *vectors)
    return _make(np.stack(datas), tuple(vectors), "stack",
                 lambda g: tuple(g[i] for i in range(len(vectors))))


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.int64)
    A = a.data
    _check(idx.ndim == 1 and (idx.size == 0 or (idx.min() >= 0 and idx.max() < A.shape[0])),
           "take_rows", a, idx)

    def bw(g):
        ga = np.zeros_like(A)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(A[idx], (a,), "take_rows", bw)


def row(a: Tensor, i: int) -> Tensor:
    _check(a.data.ndim == 2 and 0 <= i < a.shape[0], "row", a)
    A = a.data

    def bw(g):
        ga = np.zeros_like(A)
        ga[i] = g
        return (ga,)

    return _make(A[i].copy(), (a,), "row", bw)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Elements ``a[rows[t], cols[t]]`` as a 1-D tensor."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    A = a.data
    _check(A.ndim == 2 and r.shape == c.shape, "pick", a, r, c)

    def bw(g):
        ga = np.zeros_like(A)
        np.add.at(ga, (r, c), g)
        return (ga,)

    return _make(A[r, c], (a,), "pick", bw)


def segment_sum(a: Tensor, segments, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets; accumulation follows row order."""
    seg = np.asarray(segments, dtype=np.int64)
    A = a.data
    _check(seg.shape == (A.shape[0],), "segment_sum", a, seg)
    out = np.zeros((n,) + A.shape[1:])
    np.add.at(out, seg, A)
    return _make(out, (a,), "segment_sum", lambda g: (g[seg],))


def segment_softmax(a: Tensor, segments, n: int) -> Tensor:
    """Softmax of the rows of ``a`` within each segment, column by column."""
    seg = np.asarray(segments, dtype=np.int64)
    A = a.data
    _check(A.ndim == 2 and seg.shape == (A.shape[0],), "segment_softmax", a, seg)
    mx = np.full((n, A.shape[1]), -np.inf)
    np.maximum.at(mx, seg, A)
    e = np.exp(A - mx[seg])
    denom = np.zeros((n, A.shape[1]))
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def bw(g):
        s = np.zeros((n, A.shape[1]))
        np.add.at(s, seg, g * out)
        return (out * (g - s[seg]),)

    return _make(out, (a,), "segment_softmax", bw)


def row_softmax(a: Tensor) -> Tensor:
    A = a.data
    z = A - A.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), "row_softmax", bw)


def masked_log_softmax(a: Tensor, mask=None) -> Tensor:
    """Row-wise log-softmax restricted to ``mask``.

    Entries outside the mask take no part in the normaliser; their output
    is 0 and they receive no gradient.  Every row needs one admitted entry.
    """
    A = a.data
    _check(A.ndim == 2, "masked_log_softmax", a)
    m = np.ones(A.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    _check(m.shape == A.shape, "masked_log_softmax", a, m)
    if not m.any(axis=1).all():
        raise ValueError("masked_log_softmax: a row has no admitted entries")
    masked = np.where(m, A, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(masked - mx), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = np.where(m, A - mx - np.log(s), 0.0)
    probs = e / s

    def bw(g):
        g = np.where(m, g, 0.0)
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), "masked_log_softmax", bw)


# ---------------------------------------------------------------------------
# fused transformer pieces


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    A = a.data
    _check(A.ndim == 2 and gamma.shape == (A.shape[1],) and beta.shape == gamma.shape,
           "layer_norm", a, gamma, beta)
    mu = A.mean(axis=1, keepdims=True)
    xc = A - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def bw(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(xhat * G + beta.data, (a, gamma, beta), "layer_norm", bw)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product self-attention over (T, d) inputs split into ``heads``."""
    _check(q.data.ndim == 2 and q.shape == k.shape == v.shape and q.shape[1] % heads == 0,
           "multihead_attention", q, k, v)
    T, d = q.shape
    dh = d // heads
    c = 1.0 / np.sqrt(dh)

    def split(x):
        return x.reshape(T, heads, dh).transpose(1, 0, 2)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    s = (Q @ K.transpose(0, 2, 1)) * c
    s -= s.max(axis=-1, keepdims=True)
    P = np.exp(s)
    P /= P.sum(axis=-1, keepdims=True)
    out = (P @ V).transpose(1, 0, 2).reshape(T, d)

    def bw(g):
        G = split(g)
        dV = P.transpose(0, 2, 1) @ G
        dP = G @ V.transpose(0, 2, 1)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * c
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q

        def merge(x):
            return x.transpose(1, 0, 2).reshape(T, d)

        return merge(dQ), merge(dK), merge(dV)

    return _make(out, (q, k, v), "multihead_attention", bw)
