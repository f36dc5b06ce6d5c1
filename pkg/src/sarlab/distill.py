"""Second-stage training: contrastive loss on graph representations plus
distillation of graph-side relevance distributions into the query encoder.

The graph teacher scores ``s(q^g, p^g)``; the student scores ``s(q^b, p^g)``
with ``q^b`` from the query bi-encoder.  At inference only ``q^b`` and the
exported graph article vectors ``p^g`` are needed, so unseen queries never
touch the graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .biencoder import (BiEncoder, ContrastiveBatch, DenseIndex, contrastive_loss,
                        encode_articles, make_batch, mean_recall, mine_all_negatives)
from .bm25 import InvertedIndex, index_corpus
from .corpus import Corpus, Query
from .gat import GatStack
from .graph import HeteroGraph, article_key, build_graph, query_key, sample_subgraph
from .optim import LinearSchedule, NumericalError, OptimizerState, adamw_step

log = logging.getLogger(__name__)

KD_MODES = ("score", "feature", "both", "none")
SCHEDULES = ("joint", "sequential")
STAGE2_GRAPH_MODES = ("both", "bipartite-only", "statute-only", "none")
PROB_FLOOR = 1e-12


class ConfigError(ValueError):
    """Inconsistent stage-2 configuration."""


@dataclass
class Stage2Config:
    lambda_con: float = 0.7
    lambda_kd: float = 0.3
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    encoder_lr: float = 1e-3
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    kd_mode: str = "score"
    schedule: str = "joint"
    graph_mode: str = "both"
    tau: float = 1.0
    gat_layers: int = 2
    gat_heads: int = 4
    gat_init_std: float = 0.01
    bm25_negatives: int = 4
    max_positives: int = 2
    inbatch_negatives: bool = True
    inbatch_with_mined: bool = True
    feature_weight: float = 0.5
    refresh_features: bool = False
    train_article_encoder: bool = False
    select_k: int = 10

    def validate(self) -> None:
        if self.kd_mode not in KD_MODES:
            raise ConfigError(f"kd_mode must be one of {KD_MODES}, got {self.kd_mode!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.graph_mode not in STAGE2_GRAPH_MODES:
            raise ConfigError(f"graph_mode must be one of {STAGE2_GRAPH_MODES}, "
                              f"got {self.graph_mode!r}")
        if self.graph_mode == "none" and self.kd_mode != "none":
            raise ConfigError("distillation needs a graph teacher: kd_mode must be 'none' "
                              "when graph_mode is 'none'")
        if self.schedule == "sequential" and self.kd_mode == "none":
            raise ConfigError("the sequential schedule needs a distillation mode")


# ---------------------------------------------------------------------------
# score distributions and distillation losses


@dataclass
class ScoreDistribution:
    probs: np.ndarray
    degenerate: bool = False


def score_distribution(q_vec, article_vecs) -> ScoreDistribution:
    """Softmax of dot products over the candidate articles (no temperature)."""
    A = np.atleast_2d(np.asarray(article_vecs, dtype=np.float64))
    s = A @ np.asarray(q_vec, dtype=np.float64)
    e = np.exp(s - s.max())
    return ScoreDistribution(e / e.sum(), degenerate=len(s) < 2)


def kl_divergence(teacher, student) -> float:
    """KL(teacher ‖ student); zero-probability teacher entries contribute nothing,
    student probabilities are floored at 1e-12."""
    t = np.asarray(getattr(teacher, "probs", teacher), dtype=np.float64)
    s = np.asarray(getattr(student, "probs", student), dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"distributions differ in shape {t.shape} vs {s.shape}")
    nz = t > 0
    return float((t[nz] * (np.log(t[nz]) - np.log(np.maximum(s[nz], PROB_FLOOR)))).sum())


@dataclass
class KdStats:
    clamped: int = 0


def kd_score_loss(teacher_scores: np.ndarray, student_scores: Tensor, mask=None,
                  stats: KdStats | None = None) -> Tensor:
    """Sum over queries of KL(softmax(teacher) ‖ softmax(student)) on each
    query's candidate list; the teacher is a constant."""
    T = np.asarray(teacher_scores, dtype=np.float64)
    m = np.ones(T.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if T.shape != student_scores.shape:
        raise ValueError(f"teacher {T.shape} and student {student_scores.shape} differ")
    tm = np.where(m, T, -np.inf)
    te = np.where(m, np.exp(tm - tm.max(axis=1, keepdims=True)), 0.0)
    tp = te / te.sum(axis=1, keepdims=True)
    log_tp = np.where(tp > 0, np.log(np.where(tp > 0, tp, 1.0)), 0.0)
    log_sp = ag.masked_log_softmax(student_scores, m)
    floor = np.log(PROB_FLOOR)
    n_clamped = int(((log_sp.data < floor) & m).sum())
    if stats is not None:
        stats.clamped += n_clamped
    if n_clamped:
        log_sp = ag.clamp_min(log_sp, floor)
    cross = ag.sum(ag.mul(Tensor(tp), log_sp))
    return ag.add(ag.scale(cross, -1.0), Tensor(np.asarray((tp * log_tp).sum())))


def kd_feature_loss(q_student: Tensor, q_teacher) -> Tensor:
    """Mean over the batch of the squared L2 distance to the (constant) teacher vectors."""
    target = np.asarray(getattr(q_teacher, "data", q_teacher), dtype=np.float64)
    if target.shape != q_student.shape:
        raise ValueError(f"student {q_student.shape} and teacher {target.shape} differ")
    n = target.shape[0] if target.ndim == 2 else 1
    return ag.scale(ag.sq_norm(ag.sub(q_student, Tensor(target))), 1.0 / n)


def combine_losses(l_con, l_kd, cfg: Stage2Config):
    """``λ_con·L_con + λ_kd·L_KD``; a missing term leaves the other unweighted."""
    if l_kd is None:
        return l_con
    if l_con is None:
        return l_kd
    if isinstance(l_con, Tensor):
        return ag.add(ag.scale(l_con, cfg.lambda_con), ag.scale(l_kd, cfg.lambda_kd))
    return cfg.lambda_con * l_con + cfg.lambda_kd * l_kd


# ---------------------------------------------------------------------------
# node features


def init_node_features(graph: HeteroGraph, model: BiEncoder, corpus: Corpus,
                       queries: dict[str, Query]) -> np.ndarray:
    """Query nodes use the query encoder; articles and structural units use the
    article encoder (units on their heading text)."""
    model.eval()
    feats = np.zeros((len(graph), model.config.dim))
    with no_grad():
        for i, (key, typ) in enumerate(zip(graph.node_keys, graph.node_types)):
            kind, _, ident = key.partition(":")
            if kind == "query":
                feats[i] = model.encode_query(corpus.vocab.encode(queries[ident].text)).data
            elif kind == "article":
                feats[i] = model.encode_article(corpus.token_ids(ident)).data
            else:
                unit = corpus.units[ident]
                feats[i] = model.encode_article(corpus.vocab.encode(unit.heading)).data
    return feats


def clone_biencoder(model: BiEncoder, vocab_size: int) -> BiEncoder:
    twin = BiEncoder(model.config, vocab_size, np.random.default_rng(0))
    twin.load_state_dict(model.state_dict())
    return twin


# ---------------------------------------------------------------------------
# trainer


@dataclass
class Stage2Result:
    gat: GatStack | None
    model: BiEncoder
    article_matrix: np.ndarray
    curve: list[dict]
    history: list[dict]
    best_epoch: int
    kd_clamped: int = 0


class Stage2Trainer:
    def __init__(self, corpus: Corpus, train: Sequence[Query], validation: Sequence[Query],
                 model: BiEncoder, cfg: Stage2Config = Stage2Config(), seed: int = 0,
                 index: InvertedIndex | None = None):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus
        self.train_queries = list(train)
        self.validation = list(validation)
        self.model = clone_biencoder(model, len(corpus.vocab))
        self.stats = KdStats()
        self._drop_rng = np.random.default_rng([seed, 12])
        self._order_rng = np.random.default_rng([seed, 11])
        self._pos_rng = np.random.default_rng([seed, 13])
        index = index or index_corpus(corpus)
        self.negatives = mine_all_negatives(index, corpus, self.train_queries,
                                            cfg.bm25_negatives, seed)
        self._query_vecs = {}
        self.graph: HeteroGraph | None = None
        self.gat: GatStack | None = None
        if cfg.graph_mode != "none":
            self.graph = build_graph(corpus, self.train_queries, cfg.graph_mode)
            self.gat = GatStack(model.config.dim, cfg.gat_layers, cfg.gat_heads,
                                np.random.default_rng([seed, 10]),
                                init_std=cfg.gat_init_std)
            by_id = {q.id: q for q in self.train_queries}
            self.features = init_node_features(self.graph, self.model, corpus, by_id)
            if cfg.graph_mode == "statute-only":
                with no_grad():
                    self.model.eval()
                    for q in self.train_queries:
                        self._query_vecs[q.id] = self.model.encode_query(
                            corpus.vocab.encode(q.text)).data

        spe = -(-len(self.train_queries) // cfg.batch_size)
        total = cfg.epochs * spe
        self.gat_opt = None
        if self.gat is not None:
            self.gat_opt = OptimizerState(self.gat.named_parameters(),
                                          LinearSchedule(cfg.lr, total, cfg.warmup_fraction),
                                          weight_decay=cfg.weight_decay,
                                          max_grad_norm=cfg.max_grad_norm)
        student = dict(self.model.query_parameters())
        if cfg.train_article_encoder:
            student.update(self.model.article_parameters())
        self.enc_opt = OptimizerState(student,
                                      LinearSchedule(cfg.encoder_lr, total, cfg.warmup_fraction),
                                      weight_decay=cfg.weight_decay,
                                      max_grad_norm=cfg.max_grad_norm)
        self.step_count = 0

    # -- graph readouts ---------------------------------------------------

    def _query_nodes_present(self) -> bool:
        return self.cfg.graph_mode in ("both", "bipartite-only")

    def graph_reps(self, batch: ContrastiveBatch, train: bool = True):
        """``(q^g, p^g)`` for the batch queries and candidates from an L-hop subgraph."""
        g = self.graph
        art = [g.index[article_key(a)] for a in batch.candidate_ids]
        seeds = list(art)
        if self._query_nodes_present():
            qn = [g.index[query_key(q)] for q in batch.query_ids]
            seeds = qn + seeds
        sub = sample_subgraph(g, list(dict.fromkeys(seeds)), self.gat.hops)
        feats = self.features[sub.nodes]
        if train:
            out = self.gat(sub.graph, feats)
        else:
            with no_grad():
                out = self.gat(sub.graph, feats)
        p_g = ag.take_rows(out, sub.local(art))
        if self._query_nodes_present():
            q_g = ag.take_rows(out, sub.local(qn))
        else:
            q_g = Tensor(np.stack([self._query_vecs[q] for q in batch.query_ids]))
        return q_g, p_g

    def encode_batch_queries(self, ids: Sequence[str]) -> Tensor:
        by_id = {q.id: q for q in self.train_queries}
        return ag.stack([self.model.encode_query(self.corpus.vocab.encode(by_id[i].text))
                         for i in ids])

    # -- one optimisation step ------------------------------------------------

    def step(self, queries: Sequence[Query], use_con: bool = True, use_kd: bool = True,
             batch: ContrastiveBatch | None = None) -> dict:
        cfg = self.cfg
        use_kd = use_kd and cfg.kd_mode != "none"
        use_con = use_con and self.gat is not None
        if batch is None:
            batch = make_batch(queries, self.negatives, self._pos_rng, cfg.max_positives,
                               cfg.inbatch_negatives, cfg.inbatch_with_mined)
        if cfg.refresh_features and self.graph is not None:
            by_id = {q.id: q for q in self.train_queries}
            self.features = init_node_features(self.graph, self.model, self.corpus, by_id)

        if self.gat is not None:
            self.gat.train(use_con)
        self.model.train(True, self._drop_rng)
        for opt in (self.gat_opt, self.enc_opt):
            if opt is not None:
                opt.zero_grad()

        out: dict = {}
        l_con = l_kd = None
        if self.gat is not None:
            q_g, p_g = self.graph_reps(batch, train=use_con)
            if use_con:
                l_con = contrastive_loss(q_g, p_g, batch, cfg.tau)
                out["con"] = l_con.item()
        if use_kd:
            q_b = self.encode_batch_queries(batch.query_ids)
            p_fixed = Tensor(p_g.data)
            parts = []
            if cfg.kd_mode in ("score", "both"):
                teacher = q_g.data @ p_g.data.T
                student = ag.matmul(q_b, ag.transpose(p_fixed))
                ks = kd_score_loss(teacher, student, batch.query_mask, self.stats)
                out["kd_score"] = ks.item()
                parts.append(ks)
            if cfg.kd_mode in ("feature", "both"):
                kf = kd_feature_loss(q_b, q_g.data)
                out["kd_feature"] = kf.item()
                parts.append(kf)
            if len(parts) == 2:
                w = cfg.feature_weight
                l_kd = ag.add(ag.scale(parts[0], 1.0 - w), ag.scale(parts[1], w))
            else:
                l_kd = parts[0]
            out["kd"] = l_kd.item()

        total = combine_losses(l_con, l_kd, cfg)
        if total is None:
            return out
        self.step_count += 1
        out["total"] = total.item()
        if not np.isfinite(out["total"]):
            raise NumericalError(f"non-finite stage-2 loss at step {self.step_count}")
        ag.backward(total)
        if l_con is not None:
            out["lr_gat"] = adamw_step(self.gat_opt)
        if l_kd is not None:
            out["lr_enc"] = adamw_step(self.enc_opt)
        return out

    # -- evaluation and export --------------------------------------------------

    def article_matrix(self) -> np.ndarray:
        """Graph readouts of every article (full-graph forward), or the stage-1
        article vectors when no graph is configured."""
        if self.gat is None:
            return encode_articles(self.model, self.corpus)
        self.gat.eval()
        with no_grad():
            out = self.gat(self.graph, self.features).data
        rows = [self.graph.index[article_key(a.id)] for a in self.corpus.articles]
        return out[rows]

    def validation_recall(self) -> float:
        if not self.validation:
            return 0.0
        index = DenseIndex(self.corpus.article_ids, self.article_matrix())
        self.model.eval()
        with no_grad():
            qv = np.stack([self.model.encode_query(self.corpus.vocab.encode(q.text)).data
                           for q in self.validation])
        return mean_recall(index, qv, self.validation, self.cfg.select_k)

    def epoch_losses(self) -> dict:
        """Contrastive and distillation losses over the whole training set in
        evaluation mode, on deterministic batches, without updating anything."""
        cfg = self.cfg
        if self.gat is None:
            return {}
        self.gat.eval()
        self.model.eval()
        sums: dict[str, float] = {}
        n = 0
        with no_grad():
            for start in range(0, len(self.train_queries), cfg.batch_size):
                qs = self.train_queries[start:start + cfg.batch_size]
                batch = make_batch(qs, self.negatives, None, cfg.max_positives,
                                   cfg.inbatch_negatives, cfg.inbatch_with_mined)
                q_g, p_g = self.graph_reps(batch, train=False)
                vals = {"con": contrastive_loss(q_g, p_g, batch, cfg.tau).item()}
                if cfg.kd_mode in ("score", "both"):
                    student = self.encode_batch_queries(batch.query_ids).data @ p_g.data.T
                    vals["kd_score"] = kd_score_loss(q_g.data @ p_g.data.T, Tensor(student),
                                                     batch.query_mask).item()
                if cfg.kd_mode in ("feature", "both"):
                    vals["kd_feature"] = kd_feature_loss(
                        self.encode_batch_queries(batch.query_ids), q_g.data).item()
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v
                n += 1
        return {f"train_{k}": v / n for k, v in sums.items()}

    def _snapshot(self):
        return (self.gat.state_dict() if self.gat is not None else None,
                self.model.state_dict())

    def _restore(self, snap) -> None:
        if snap[0] is not None:
            self.gat.load_state_dict(snap[0])
        self.model.load_state_dict(snap[1])

    def train(self) -> Stage2Result:
        cfg = self.cfg
        phases = [("joint", True, True)]
        if cfg.schedule == "sequential":
            phases = [("graph", True, False), ("distill", False, True)]
        if self.gat is None:
            phases = []
        curve, history = [], []
        best, best_score, best_epoch = self._snapshot(), -1.0, 0
        if phases:
            # the untrained starting point competes in selection as epoch 0
            best_score = self.validation_recall()
            history.append({"epoch": 0, "phase": "init", f"val_recall@{cfg.select_k}": best_score,
                            **self.epoch_losses()})
        epoch = 0
        for phase, use_con, use_kd in phases:
            for _ in range(cfg.epochs):
                epoch += 1
                perm = self._order_rng.permutation(len(self.train_queries))
                for start in range(0, len(perm), cfg.batch_size):
                    qs = [self.train_queries[i] for i in perm[start:start + cfg.batch_size]]
                    rec = self.step(qs, use_con, use_kd)
                    curve.append({"step": self.step_count, "epoch": epoch, "phase": phase, **rec})
                score = self.validation_recall()
                history.append({"epoch": epoch, "phase": phase,
                                f"val_recall@{cfg.select_k}": score, **self.epoch_losses()})
                log.info("stage2 %s epoch %d val R@%d %.3f", phase, epoch, cfg.select_k, score)
                if score > best_score:
                    best, best_score, best_epoch = self._snapshot(), score, epoch
        self._restore(best)
        return Stage2Result(self.gat, self.model, self.article_matrix(), curve, history,
                            best_epoch, self.stats.clamped)


def infer_rank(model: BiEncoder, corpus: Corpus, article_matrix: np.ndarray, text: str,
               k: int | None = None) -> list[tuple[str, float]]:
    """Encode ``text`` with the (distilled) query encoder and search the exported matrix."""
    model.eval()
    with no_grad():
        q = model.encode_query(corpus.vocab.encode(text)).data
    return DenseIndex(corpus.article_ids, article_matrix).search(q, k)
