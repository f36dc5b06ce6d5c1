"""Edge-typed multi-head graph attention.

For centre node i, member j of N(i) ∪ {i} and head k::

    logit = a_k · LeakyReLU([W_s,k x_i ‖ W_t,k x_j ‖ W_e,k emb(type(i, j))])
    alpha = softmax over members of the logits
    x_i'  = ‖_k σ(alpha_ii W_s,k x_i + Σ_{j≠i} alpha_ij W_t,k x_j)  (+ residual)

Because LeakyReLU acts elementwise, the attention logit splits into three
per-node/per-type terms, so the layer never materialises per-edge
concatenations.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graph import EDGE_TYPES, Adjacency, HeteroGraph
from .nn import Linear, Module

ATTENTION_SLOPE = 0.2


class GatLayer(Module):
    def __init__(self, d_in: int, heads: int, head_dim: int, rng: np.random.Generator,
                 residual: bool = True, init_std: float = 0.05,
                 n_edge_types: int = len(EDGE_TYPES)):
        self.heads = heads
        self.head_dim = head_dim
        self.residual = residual
        d_out = heads * head_dim
        self.W_s = ag.parameter(rng.normal(0.0, init_std, size=(d_in, d_out)))
        self.W_t = ag.parameter(rng.normal(0.0, init_std, size=(d_in, d_out)))
        self.W_e = ag.parameter(rng.normal(0.0, init_std, size=(d_in, d_out)))
        # the attention vector a_k is stored as its three slices, head-major
        self.a_s = ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(head_dim), size=d_out))
        self.a_t = ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(head_dim), size=d_out))
        self.a_e = ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(head_dim), size=d_out))
        self.edge_embedding = ag.parameter(rng.normal(0.0, 1.0, size=(n_edge_types, d_in)))
        self.proj = Linear(d_in, d_out, rng, bias=False) if residual and d_in != d_out else None
        # block indicator: column block k of width head_dim -> head k
        self._blocks = Tensor(np.kron(np.eye(heads), np.ones((head_dim, 1))))

    @property
    def d_out(self) -> int:
        return self.heads * self.head_dim

    def attention_vector(self, k: int) -> np.ndarray:
        sl = slice(k * self.head_dim, (k + 1) * self.head_dim)
        return np.concatenate([self.a_s.data[sl], self.a_t.data[sl], self.a_e.data[sl]])

    def _transforms(self, x: Tensor):
        S = ag.matmul(x, self.W_s)
        T = ag.matmul(x, self.W_t)
        E = ag.matmul(self.edge_embedding, self.W_e)
        return S, T, E

    def _attention(self, S: Tensor, T: Tensor, E: Tensor, adj: Adjacency) -> Tensor:
        def head_scores(z: Tensor, a: Tensor) -> Tensor:
            return ag.matmul(ag.mul_row(ag.leaky_relu(z, ATTENTION_SLOPE), a), self._blocks)

        logits = ag.add(ag.add(ag.take_rows(head_scores(S, self.a_s), adj.center),
                               ag.take_rows(head_scores(T, self.a_t), adj.member)),
                        ag.take_rows(head_scores(E, self.a_e), adj.etype))
        return ag.segment_softmax(logits, adj.center, adj.n)

    def attention(self, x: Tensor, adj: Adjacency) -> Tensor:
        """Attention weights, one row per adjacency pair and one column per head."""
        return self._attention(*self._transforms(x), adj)

    def __call__(self, x: Tensor, adj: Adjacency) -> Tensor:
        S, T, E = self._transforms(x)
        alpha = self._attention(S, T, E, adj)
        n = adj.n
        values = ag.take_rows(ag.concat([S, T], axis=0),
                              np.where(adj.is_self, adj.center, n + adj.member))
        weights = ag.matmul(alpha, ag.transpose(self._blocks))
        agg = ag.segment_sum(ag.mul(weights, values), adj.center, n)
        out = ag.leaky_relu(agg, ATTENTION_SLOPE)
        if self.residual:
            out = ag.add(out, self.proj(x) if self.proj is not None else x)
        return out


class GatStack(Module):
    """``layers`` GAT layers followed by a square readout map initialised to identity."""

    def __init__(self, dim: int, layers: int = 2, heads: int = 4, rng=None,
                 residual: bool = True, init_std: float = 0.05):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [GatLayer(dim, heads, dim // heads, rng, residual, init_std)
                       for _ in range(layers)]
        self.readout = Linear(dim, dim, rng)
        self.readout.weight.data[...] = np.eye(dim)

    @property
    def hops(self) -> int:
        return len(self.layers)

    def __call__(self, graph: HeteroGraph, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        adj = graph.adjacency()
        for layer in self.layers:
            x = layer(x, adj)
        return self.readout(x)

    def readouts(self, graph: HeteroGraph, features, nodes: Sequence[int]) -> Tensor:
        return ag.take_rows(self(graph, features), nodes)
