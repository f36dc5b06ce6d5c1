"""Statutory article retrieval: BM25 and dense bi-encoder baselines, a
query-article graph with statute hierarchy, an edge-typed GAT teacher and
distillation into the query encoder, all on a small fp64 autodiff core."""

__version__ = "0.1.0"
