"""Named retriever configurations and the desk-scale benchmark runner.

The names cover the baselines (``bm25``, ``be-flat``, ``be``,
``be+ge-stat``), the full model (``qabisar``) and its ablations.  Every
stage-2 name is a set of overrides on :class:`Stage2Config`, so the whole
lattice is reachable through configuration alone.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .biencoder import (BiEncoder, DenseIndex, EncoderConfig, Stage1Config, encode_articles,
                        stage1_train)
from .bm25 import InvertedIndex, index_corpus, rank_all
from .autograd import no_grad
from .corpus import Corpus, DatasetSplit, Query, tokenize
from .distill import Stage2Config, Stage2Result, Stage2Trainer
from .metrics import DEFAULT_KS, Comparison, EvalReport, compare_reports, evaluate
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

STAGE2_VARIANTS: dict[str, dict] = {
    "qabisar": {},
    "be+ge-stat": {"graph_mode": "statute-only", "kd_mode": "none"},
    "no-kd": {"kd_mode": "none"},
    "bipartite-only": {"graph_mode": "bipartite-only"},
    "statute-only": {"graph_mode": "statute-only"},
    "no-graph": {"graph_mode": "none", "kd_mode": "none"},
    "feature-kd": {"kd_mode": "feature"},
    "both-kd": {"kd_mode": "both"},
    "sequential": {"schedule": "sequential"},
}
STAGE1_VARIANTS = ("be-flat", "be")
CONFIG_NAMES = ("bm25", *STAGE1_VARIANTS, *STAGE2_VARIANTS)
ABLATIONS = ("no-kd", "bipartite-only", "statute-only", "no-graph",
             "feature-kd", "both-kd", "sequential")

# rows of the two ablation views: graph components and distillation strategies
ABLATION_AXES = {
    "graph": ("qabisar", "no-kd", "statute-only", "bipartite-only", "no-graph"),
    "distillation": ("no-kd", "qabisar", "feature-kd", "both-kd", "sequential"),
}


def stage2_config(name: str, base: Stage2Config | None = None) -> Stage2Config:
    if name not in STAGE2_VARIANTS:
        raise KeyError(f"unknown stage-2 configuration {name!r}; valid names: "
                       f"{sorted(STAGE2_VARIANTS)}")
    return dataclasses.replace(base or Stage2Config(), **STAGE2_VARIANTS[name])


def variant_name(cfg: Stage2Config) -> str:
    """Registry name whose overrides reproduce ``cfg``'s ablation switches."""
    switches = (cfg.kd_mode, cfg.graph_mode, cfg.schedule)
    for name in STAGE2_VARIANTS:
        ref = stage2_config(name)
        if (ref.kd_mode, ref.graph_mode, ref.schedule) == switches:
            return name
    return f"kd={cfg.kd_mode},graph={cfg.graph_mode},schedule={cfg.schedule}"


def stage1_encoder_config(name: str, base: EncoderConfig | None = None) -> EncoderConfig:
    if name not in STAGE1_VARIANTS:
        raise KeyError(f"unknown stage-1 configuration {name!r}; valid names: {STAGE1_VARIANTS}")
    return dataclasses.replace(base or EncoderConfig(), hierarchical=(name == "be"))


# ---------------------------------------------------------------------------
# retrievers: query -> full ranked list of article ids


def bm25_retriever(index: InvertedIndex) -> Callable[[Query], list[str]]:
    return lambda q: rank_all(index, tokenize(q.text))


def dense_retriever(model: BiEncoder, corpus: Corpus,
                    article_matrix: np.ndarray | None = None) -> Callable[[Query], list[str]]:
    matrix = encode_articles(model, corpus) if article_matrix is None else article_matrix
    index = DenseIndex(corpus.article_ids, matrix)

    def rank(q: Query) -> list[str]:
        model.eval()
        with no_grad():
            vec = model.encode_query(corpus.vocab.encode(q.text)).data
        return index.rank(vec)

    return rank


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkResult:
    reports: dict[str, EvalReport]
    seconds: dict[str, float]
    stage1: dict[str, BiEncoder] = field(default_factory=dict)
    stage2: dict[str, Stage2Result] = field(default_factory=dict)

    def comparison(self, names: Sequence[str] | None = None) -> Comparison:
        names = [n for n in (names or self.reports) if n in self.reports]
        return compare_reports([self.reports[n] for n in names])

    def axis_tables(self) -> dict[str, str]:
        """One comparison table per ablation view, rows in a fixed order."""
        return {axis: self.comparison(rows).table() for axis, rows in ABLATION_AXES.items()
                if sum(r in self.reports for r in rows) >= 2}


def run_benchmark(names: Sequence[str] = CONFIG_NAMES, seed: int = 7,
                  spec: SyntheticSpec | None = None,
                  data: tuple[Corpus, list[Query], DatasetSplit] | None = None,
                  encoder: EncoderConfig | None = None, stage1: Stage1Config | None = None,
                  stage2: Stage2Config | None = None, ks: Sequence[int] = DEFAULT_KS,
                  split: str = "test") -> BenchmarkResult:
    """Train and evaluate the requested configurations on one dataset.

    Stage-2 variants share a single hierarchical stage-1 model.
    """
    unknown = [n for n in names if n not in CONFIG_NAMES]
    if unknown:
        raise KeyError(f"unknown configuration(s) {unknown}; valid names: {list(CONFIG_NAMES)}")
    corpus, queries, dsplit = data or generate_synthetic(spec or SyntheticSpec(), seed=seed)
    train = dsplit.select(queries, "train")
    validation = dsplit.select(queries, "validation")
    evaluation = dsplit.select(queries, split)
    index = index_corpus(corpus)

    retrievers: dict[str, Callable[[Query], list[str]]] = {}
    result = BenchmarkResult({}, {})
    wanted_stage1 = set(n for n in names if n in STAGE1_VARIANTS)
    if any(n in STAGE2_VARIANTS for n in names):
        wanted_stage1.add("be")
    for name in STAGE1_VARIANTS:
        if name not in wanted_stage1:
            continue
        t0 = time.perf_counter()
        res = stage1_train(corpus, train, validation, stage1_encoder_config(name, encoder),
                           stage1 or Stage1Config(), seed=seed, index=index)
        result.seconds[name] = time.perf_counter() - t0
        result.stage1[name] = res.model
        retrievers[name] = dense_retriever(res.model, corpus)
        log.info("trained %s in %.1fs", name, result.seconds[name])

    for name in names:
        if name == "bm25":
            retrievers[name] = bm25_retriever(index)
        elif name in STAGE2_VARIANTS:
            t0 = time.perf_counter()
            trainer = Stage2Trainer(corpus, train, validation, result.stage1["be"],
                                    stage2_config(name, stage2), seed=seed, index=index)
            res = trainer.train()
            result.seconds[name] = time.perf_counter() - t0
            result.stage2[name] = res
            retrievers[name] = dense_retriever(res.model, corpus, res.article_matrix)
            log.info("trained %s in %.1fs", name, result.seconds[name])
    for name in names:
        result.reports[name] = evaluate(name, retrievers, evaluation, ks, split)
    return result
