"""Ranking metrics and comparable evaluation reports.

Rankings are taken as given: retrievers own their tie-break, the harness
never re-sorts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Query

DEFAULT_KS = (5, 10, 20)
# cut-offs for full-size corpora of a few thousand articles
LARGE_CORPUS_KS = (100, 200, 500)


class ReportError(ValueError):
    """Reports that cannot be compared or a metric that is undefined."""


def _check_ranking(ranked: Sequence[str]) -> None:
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicate ids")


def recall_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rel = set(relevant)
    if not rel:
        raise ValueError("empty relevant set")
    return len(rel.intersection(ranked[:k])) / len(rel)


def average_precision(ranked: Sequence[str], relevant: Iterable[str]) -> float:
    """Mean Precision@rank over the relevant docs; a relevant doc missing from
    a truncated ranking contributes zero."""
    rel = set(relevant)
    if not rel:
        raise ValueError("empty relevant set")
    hits = 0
    total = 0.0
    for rank, doc in enumerate(ranked, start=1):
        if doc in rel:
            hits += 1
            total += hits / rank
    return total / len(rel)


def r_precision(ranked: Sequence[str], relevant: Iterable[str]) -> float:
    rel = set(relevant)
    if not rel:
        raise ValueError("empty relevant set")
    return len(rel.intersection(ranked[:len(rel)])) / len(rel)


def expected_random_recall(k: int, n_docs: int) -> float:
    """Mean recall@k of a uniformly random permutation (hypergeometric mean)."""
    return min(k, n_docs) / n_docs


@dataclass
class QueryMetrics:
    query_id: str
    recall: dict[int, float]
    ap: float
    rp: float


@dataclass
class EvalReport:
    config: str
    split: str
    ks: tuple[int, ...]
    per_query: list[QueryMetrics] = field(default_factory=list)

    @property
    def query_ids(self) -> tuple[str, ...]:
        return tuple(m.query_id for m in self.per_query)

    def recall(self, k: int) -> float:
        return float(np.mean([m.recall[k] for m in self.per_query]))

    @property
    def map(self) -> float:
        return float(np.mean([m.ap for m in self.per_query]))

    @property
    def mrp(self) -> float:
        return float(np.mean([m.rp for m in self.per_query]))

    def values(self) -> list[tuple[str, int | None, float]]:
        """(metric, k, value) triples in a fixed column order."""
        out: list[tuple[str, int | None, float]] = [("recall", k, self.recall(k)) for k in self.ks]
        out.append(("map", None, self.map))
        out.append(("mrp", None, self.mrp))
        return out

    def has_nan(self) -> bool:
        return any(math.isnan(v) for _, _, v in self.values())

    def records(self) -> list[dict]:
        return [{"config": self.config, "metric": m, "k": k, "value": v}
                for m, k, v in self.values()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def per_query_records(self) -> list[dict]:
        return [{"query": m.query_id, "recall": {str(k): v for k, v in m.recall.items()},
                 "ap": m.ap, "rp": m.rp} for m in self.per_query]


def evaluate_rankings(config: str, rankings: Mapping[str, Sequence[str]],
                      queries: Sequence[Query], ks: Sequence[int] = DEFAULT_KS,
                      split: str = "test") -> EvalReport:
    ks = tuple(int(k) for k in ks)
    report = EvalReport(config, split, ks)
    for q in sorted(queries, key=lambda q: q.id):
        ranked = list(rankings[q.id])
        _check_ranking(ranked)
        rel = q.relevant_article_ids
        report.per_query.append(QueryMetrics(
            q.id, {k: recall_at_k(ranked, rel, k) for k in ks},
            average_precision(ranked, rel), r_precision(ranked, rel)))
    return report


def evaluate(config: str, retrievers: Mapping[str, Callable[[Query], Sequence[str]]],
             queries: Sequence[Query], ks: Sequence[int] = DEFAULT_KS,
             split: str = "test") -> EvalReport:
    """Run the retriever registered under ``config`` over ``queries``.

    Each retriever maps a query to its full ranked list of article ids.
    """
    if config not in retrievers:
        raise KeyError(f"unknown configuration {config!r}; valid names: {sorted(retrievers)}")
    rank = retrievers[config]
    return evaluate_rankings(config, {q.id: rank(q) for q in queries}, queries, ks, split)


@dataclass
class Comparison:
    reports: list[EvalReport]
    columns: list[tuple[str, int | None]]
    best: dict[tuple[str, int | None], set[str]]

    def table(self) -> str:
        heads = ["config"] + [f"R@{k}" if m == "recall" else m.upper() for m, k in self.columns]
        rows = []
        for r in self.reports:
            vals = dict(((m, k), v) for m, k, v in r.values())
            cells = [r.config]
            for col in self.columns:
                mark = "*" if r.config in self.best[col] else " "
                cells.append(f"{vals[col]:.4f}{mark}")
            rows.append(cells)
        widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(heads)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(heads, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        lines.append("* best value in column (ties marked on every tied row)")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(r.to_jsonl() for r in self.reports)


def compare_reports(reports: Sequence[EvalReport]) -> Comparison:
    if len(reports) < 2:
        raise ReportError("comparison needs at least two reports")
    first = reports[0]
    for r in reports[1:]:
        if r.split != first.split or r.query_ids != first.query_ids:
            raise ReportError(f"reports {first.config!r} and {r.config!r} cover different splits")
        if r.ks != first.ks:
            raise ReportError(f"reports {first.config!r} and {r.config!r} use different k lists")
    columns = [(m, k) for m, k, _ in first.values()]
    best: dict[tuple[str, int | None], set[str]] = {}
    for col in columns:
        vals = {r.config: dict(((m, k), v) for m, k, v in r.values())[col] for r in reports}
        top = max(vals.values())
        best[col] = {c for c, v in vals.items() if v == top}
    return Comparison(list(reports), columns, best)
