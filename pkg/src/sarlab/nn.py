"""Small module system on top of :mod:`sarlab.autograd`."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules.  Names follow attribute order."""

    training: bool = True
    rng: np.random.Generator | None = None

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{key}.{i}", m

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + key] = value
        for key, child in self.children():
            out.update(child.named_parameters(prefix + key + "."))
        return out

    def train(self, mode: bool = True, rng: np.random.Generator | None = None):
        self.training = mode
        self.rng = rng
        for _, child in self.children():
            child.train(mode, rng)
        return self

    def eval(self):
        return self.train(False, None)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data[...] = state[k]


def xavier(rng: np.random.Generator, d_in: int, d_out: int, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / (d_in + d_out))
    return rng.normal(0.0, std, size=(d_in, d_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 gain: float = 1.0):
        self.weight = ag.parameter(xavier(rng, d_in, d_out, gain))
        self.bias = ag.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 1:
            y = ag.matmul(x, self.weight)
            return ag.add(y, self.bias) if self.bias is not None else y
        y = ag.matmul(x, self.weight)
        return ag.add_bias(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ag.parameter(np.ones(d))
        self.beta = ag.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class TransformerLayer(Module):
    """Post-norm encoder block: attention and feed-forward, each followed by
    dropout, a residual add and layer normalisation."""

    def __init__(self, d: int, heads: int, ff: int, dropout: float, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.dropout = dropout
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, ff, rng)
        self.ff2 = Linear(ff, d, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        att = ag.multihead_attention(self.q(x), self.k(x), self.v(x), self.heads)
        att = ag.dropout(self.o(att), self.dropout, self.rng, self.training)
        h = self.norm1(ag.add(x, att))
        f = self.ff2(ag.gelu(self.ff1(h)))
        f = ag.dropout(f, self.dropout, self.rng, self.training)
        return self.norm2(ag.add(h, f))


class TransformerStack(Module):
    def __init__(self, d: int, layers: int, heads: int, ff: int, dropout: float,
                 rng: np.random.Generator):
        self.layers = [TransformerLayer(d, heads, ff, dropout, rng) for _ in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
