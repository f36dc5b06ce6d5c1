"""Heterogeneous query-article graph augmented with the statute hierarchy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import LEVELS, Corpus, Query

NODE_TYPES = ("query", "article", "section", "chapter", "title", "book")
GRAPH_MODES = ("both", "bipartite-only", "statute-only")

# edges are labelled by the unordered pair of node types they join; the
# hierarchy may skip levels, so every ancestor/descendant pairing is listed
EDGE_TYPES = ("self", "query-article",
              "section-article", "chapter-article", "title-article", "book-article",
              "chapter-section", "title-section", "book-section",
              "title-chapter", "book-chapter", "book-title")
EDGE_TYPE_INDEX = {name: i for i, name in enumerate(EDGE_TYPES)}


def edge_type(parent_type: str, child_type: str) -> int:
    return EDGE_TYPE_INDEX[f"{parent_type}-{child_type}"]


@dataclass
class Adjacency:
    """Attention support: one row per (centre, member) pair, self pair first."""

    n: int
    center: np.ndarray
    member: np.ndarray
    etype: np.ndarray
    is_self: np.ndarray


class HeteroGraph:
    def __init__(self, node_keys: Sequence[str], node_types: Sequence[str],
                 edges: Iterable[tuple[int, int, int]]):
        if len(node_keys) != len(node_types):
            raise ValueError("node keys and types differ in length")
        self.node_keys = list(node_keys)
        self.node_types = list(node_types)
        self.index = {k: i for i, k in enumerate(self.node_keys)}
        if len(self.index) != len(self.node_keys):
            raise ValueError("duplicate node keys")
        self.edges: list[tuple[int, int, int]] = []
        self._nbrs: list[dict[int, int]] = [{} for _ in self.node_keys]
        for u, v, t in edges:
            if u == v:
                raise ValueError("self loops are implicit")
            if v in self._nbrs[u]:
                continue
            self._nbrs[u][v] = t
            self._nbrs[v][u] = t
            self.edges.append((u, v, t))
        self._adj: Adjacency | None = None

    def __len__(self) -> int:
        return len(self.node_keys)

    def neighbors(self, i: int) -> list[int]:
        """Neighbours of ``i`` ordered by node key, so aggregation order is stable."""
        return sorted(self._nbrs[i], key=lambda j: self.node_keys[j])

    def edge_type_between(self, i: int, j: int) -> int:
        return EDGE_TYPE_INDEX["self"] if i == j else self._nbrs[i][j]

    def adjacency(self) -> Adjacency:
        if self._adj is None:
            c, m, t, s = [], [], [], []
            for i in range(len(self)):
                c.append(i), m.append(i), t.append(EDGE_TYPE_INDEX["self"]), s.append(True)
                for j in self.neighbors(i):
                    c.append(i), m.append(j), t.append(self._nbrs[i][j]), s.append(False)
            self._adj = Adjacency(len(self), np.array(c, dtype=np.int64),
                                  np.array(m, dtype=np.int64), np.array(t, dtype=np.int64),
                                  np.array(s, dtype=bool))
        return self._adj

    def nodes_of_type(self, node_type: str) -> list[int]:
        return [i for i, t in enumerate(self.node_types) if t == node_type]

    def edge_type_histogram(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, _, t in self.edges:
            out[EDGE_TYPES[t]] = out.get(EDGE_TYPES[t], 0) + 1
        return out

    def khop(self, seeds: Iterable[int], hops: int) -> list[int]:
        frontier = set(seeds)
        seen = set(frontier)
        for _ in range(hops):
            nxt = set()
            for u in frontier:
                nxt.update(v for v in self._nbrs[u] if v not in seen)
            seen |= nxt
            frontier = nxt
        return sorted(seen)

    def induced(self, nodes: Sequence[int]) -> "HeteroGraph":
        keep = {g: i for i, g in enumerate(nodes)}
        edges = [(keep[u], keep[v], t) for u, v, t in self.edges if u in keep and v in keep]
        return HeteroGraph([self.node_keys[g] for g in nodes],
                           [self.node_types[g] for g in nodes], edges)

    def export(self, nodes_file, edges_file) -> None:
        with open(nodes_file, "w", encoding="utf-8", newline="\n") as fh:
            for k, t in zip(self.node_keys, self.node_types):
                fh.write(json.dumps({"id": k, "type": t}, ensure_ascii=False) + "\n")
        with open(edges_file, "w", encoding="utf-8", newline="\n") as fh:
            for u, v, t in self.edges:
                fh.write(json.dumps({"src": self.node_keys[u], "dst": self.node_keys[v],
                                     "type": EDGE_TYPES[t]}, ensure_ascii=False) + "\n")


@dataclass
class SubgraphBatch:
    seeds: list[int]
    nodes: list[int]
    graph: HeteroGraph
    local_seeds: np.ndarray

    def local(self, global_ids: Sequence[int]) -> np.ndarray:
        pos = {g: i for i, g in enumerate(self.nodes)}
        return np.array([pos[g] for g in global_ids], dtype=np.int64)


def sample_subgraph(graph: HeteroGraph, seeds: Sequence[int], hops: int) -> SubgraphBatch:
    """Induced subgraph on everything within ``hops`` of the seeds.

    With ``hops`` equal to the number of GAT layers the seeds' outputs depend
    only on nodes inside the subgraph.
    """
    for s in seeds:
        if not 0 <= s < len(graph):
            raise KeyError(f"seed {s} is not a node of the graph")
    nodes = graph.khop(seeds, hops)
    sub = graph.induced(nodes)
    pos = {g: i for i, g in enumerate(nodes)}
    return SubgraphBatch(list(seeds), nodes, sub, np.array([pos[s] for s in seeds], dtype=np.int64))


def query_key(qid: str) -> str:
    return f"query:{qid}"


def article_key(aid: str) -> str:
    return f"article:{aid}"


def unit_key(key: str) -> str:
    return f"unit:{key}"


def build_graph(corpus: Corpus, train_queries: Sequence[Query], mode: str = "both") -> HeteroGraph:
    """Articles are always nodes.  ``bipartite-only`` and ``both`` add training
    queries linked to their relevant articles; ``statute-only`` and ``both`` add
    the structural units linked along the hierarchy."""
    if mode not in GRAPH_MODES:
        raise ValueError(f"unknown graph mode {mode!r}; expected one of {GRAPH_MODES}")
    keys, types = [], []
    for a in corpus.articles:
        keys.append(article_key(a.id))
        types.append("article")
    edges: list[tuple[int, int, int]] = []
    idx = {k: i for i, k in enumerate(keys)}

    if mode in ("both", "bipartite-only"):
        for q in train_queries:
            if not q.relevant_article_ids:
                raise ValueError(f"training query {q.id} has no relevant articles")
            qi = len(keys)
            keys.append(query_key(q.id))
            types.append("query")
            idx[keys[-1]] = qi
            for aid in q.relevant_article_ids:
                edges.append((qi, idx[article_key(aid)], EDGE_TYPE_INDEX["query-article"]))

    if mode in ("both", "statute-only"):
        for key, unit in corpus.units.items():
            idx[unit_key(key)] = len(keys)
            keys.append(unit_key(key))
            types.append(unit.level)
        for key, unit in corpus.units.items():
            if unit.parent is not None:
                parent = corpus.units[unit.parent]
                edges.append((idx[unit_key(unit.parent)], idx[unit_key(key)],
                              edge_type(parent.level, unit.level)))
        for a in corpus.articles:
            ukeys = a.unit_keys()
            if ukeys:
                lowest = corpus.units[ukeys[-1]]
                edges.append((idx[unit_key(lowest.key)], idx[article_key(a.id)],
                              edge_type(lowest.level, "article")))
    assert all(t in NODE_TYPES for t in types) and set(LEVELS) <= set(NODE_TYPES)
    return HeteroGraph(keys, types, edges)
