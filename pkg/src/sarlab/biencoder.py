"""Dense bi-encoder: query encoder, hierarchical article encoder, contrastive
training with in-batch and BM25 negatives, and exhaustive dot-product search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .bm25 import InvertedIndex, index_corpus, mine_negatives
from .corpus import CLS_ID, Corpus, Query, chunk_article, tokenize
from .nn import LayerNorm, Module, TransformerStack
from .optim import LinearSchedule, NumericalError, OptimizerState, adamw_step

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    chunk_len: int = 64
    max_chunks: int = 8
    query_max_len: int = 64
    article_layers: int = 2
    hierarchical: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")


class SequenceEncoder(Module):
    """Token + learned position embeddings, layer norm, transformer stack."""

    def __init__(self, cfg: EncoderConfig, max_len: int, rng: np.random.Generator):
        # zero start: the CLS row then carries no constant offset into the readout
        self.positions = ag.parameter(np.zeros((max_len, cfg.dim)))
        self.norm = LayerNorm(cfg.dim)
        self.stack = TransformerStack(cfg.dim, cfg.layers, cfg.heads, cfg.ff_dim, cfg.dropout, rng)
        self.dropout = cfg.dropout

    def __call__(self, token_embedding: Tensor, ids: Sequence[int]) -> Tensor:
        x = ag.add(ag.take_rows(token_embedding, ids),
                   ag.take_rows(self.positions, np.arange(len(ids))))
        x = ag.dropout(self.norm(x), self.dropout, self.rng, self.training)
        return self.stack(x)


class BiEncoder(Module):
    """Query encoder and hierarchical article encoder over one shared token table.

    The article side encodes every chunk with its own transformer, adds a
    learned chunk-position vector to each chunk's CLS output, runs a second
    transformer over the chunk sequence and max-pools the result.
    """

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.config = cfg
        table = rng.normal(0.0, 0.1, size=(vocab_size, cfg.dim))
        table[CLS_ID] = 0.0
        self.token_embedding = ag.parameter(table)
        self.query_encoder = SequenceEncoder(cfg, cfg.query_max_len + 1, rng)
        self.chunk_encoder = SequenceEncoder(cfg, cfg.chunk_len + 1, rng)
        self.chunk_positions = ag.parameter(np.zeros((cfg.max_chunks, cfg.dim)))
        self.article_encoder = TransformerStack(cfg.dim, cfg.article_layers, cfg.heads,
                                                cfg.ff_dim, cfg.dropout, rng)
        self.truncations = 0

    # parameter groups used by the stage-2 partition checks
    def query_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("query_encoder.")}

    def article_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items()
                if not k.startswith("query_encoder.")}

    def query_ids(self, tokens: Sequence[int]) -> list[int]:
        return [CLS_ID, *tokens[: self.config.query_max_len]]

    def chunks(self, tokens: Sequence[int]) -> list[list[int]]:
        cfg = self.config
        chunks = chunk_article(tokens, cfg.chunk_len)
        limit = cfg.max_chunks if cfg.hierarchical else 1
        if len(chunks) > limit:
            self.truncations += 1
            chunks = chunks[:limit]
        return chunks

    def encode_query(self, tokens: Sequence[int]) -> Tensor:
        out = self.query_encoder(self.token_embedding, self.query_ids(tokens))
        return ag.row(out, 0)

    def encode_chunks(self, chunks: Sequence[Sequence[int]]) -> Tensor:
        cls = [ag.row(self.chunk_encoder(self.token_embedding, c), 0) for c in chunks]
        if not self.config.hierarchical:
            return cls[0]
        h = ag.add(ag.stack(cls), ag.take_rows(self.chunk_positions, np.arange(len(cls))))
        return ag.maxpool_rows(self.article_encoder(h))

    def encode_article(self, tokens: Sequence[int]) -> Tensor:
        return self.encode_chunks(self.chunks(tokens))


def relevance_score(q_vec, p_vec) -> float:
    q, p = np.asarray(q_vec, dtype=np.float64), np.asarray(p_vec, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"dimension mismatch {q.shape} vs {p.shape}")
    return float(q @ p)


# ---------------------------------------------------------------------------
# contrastive batches


@dataclass
class ContrastiveBatch:
    """Queries, the union of their candidate articles and the masks the loss needs.

    ``pair_mask[r]`` admits the candidates of pair ``r``: its positive, the
    query's own negatives and in-batch negatives, never another relevant
    article of the same query.  ``query_mask[i]`` is query ``i``'s full
    candidate list (sampled positives plus negatives), used for distillation.
    """

    query_ids: list[str]
    candidate_ids: list[str]
    pair_query: np.ndarray
    pair_positive: np.ndarray
    pair_mask: np.ndarray
    query_mask: np.ndarray
    positives: list[list[str]] = field(default_factory=list)
    negatives: list[list[str]] = field(default_factory=list)


def make_batch(queries: Sequence[Query], negatives: dict[str, list[str]],
               rng: np.random.Generator | None, max_positives: int = 2,
               inbatch: bool = True, inbatch_with_mined: bool = True) -> ContrastiveBatch:
    positives, negs = [], []
    for q in queries:
        rel = list(q.relevant_article_ids)
        if rng is not None and len(rel) > max_positives:
            pick = sorted(rng.choice(len(rel), size=max_positives, replace=False))
            rel = [rel[i] for i in pick]
        else:
            rel = rel[:max_positives]
        positives.append(rel)
        negs.append([n for n in negatives.get(q.id, []) if n not in q.relevant_article_ids])

    cand: dict[str, int] = {}
    for pos, neg in zip(positives, negs):
        for a in (*pos, *neg):
            cand.setdefault(a, len(cand))
    n_c = len(cand)
    qmask = np.zeros((len(queries), n_c), dtype=bool)
    for i, (q, pos, neg) in enumerate(zip(queries, positives, negs)):
        for a in (*pos, *neg):
            qmask[i, cand[a]] = True
        if inbatch:
            for j, (pos_j, neg_j) in enumerate(zip(positives, negs)):
                if j == i:
                    continue
                for a in (*pos_j, *(neg_j if inbatch_with_mined else ())):
                    if a not in q.relevant_article_ids:
                        qmask[i, cand[a]] = True

    pair_q, pair_p, rows = [], [], []
    for i, (q, pos) in enumerate(zip(queries, positives)):
        for a in pos:
            m = qmask[i].copy()
            for other in pos:
                if other != a:
                    m[cand[other]] = False
            pair_q.append(i)
            pair_p.append(cand[a])
            rows.append(m)
    pair_mask = np.array(rows, dtype=bool).reshape(len(rows), n_c)
    if len(rows) and (pair_mask.sum(axis=1) < 2).any():
        raise ValueError("contrastive batch has a positive without any negative")
    return ContrastiveBatch([q.id for q in queries], list(cand), np.array(pair_q, dtype=np.int64),
                            np.array(pair_p, dtype=np.int64), pair_mask, qmask, positives, negs)


def contrastive_loss(q_mat: Tensor, a_mat: Tensor, batch: ContrastiveBatch, tau: float = 1.0
                     ) -> Tensor:
    """Mean over (query, positive) pairs of -log softmax of the positive among
    its admitted candidates, scores divided by ``tau``."""
    if len(batch.pair_query) == 0:
        raise ValueError("empty contrastive batch")
    if (batch.pair_mask.sum(axis=1) < 2).any():
        raise ValueError("empty negative set for a (query, positive) pair")
    scores = ag.scale(ag.matmul(q_mat, ag.transpose(a_mat)), 1.0 / tau)
    logp = ag.masked_log_softmax(ag.take_rows(scores, batch.pair_query), batch.pair_mask)
    picked = ag.pick(logp, np.arange(len(batch.pair_query)), batch.pair_positive)
    return ag.scale(ag.mean(picked), -1.0)


# ---------------------------------------------------------------------------
# dense index


class DenseIndex:
    """Exhaustive dot-product search; ties broken by ascending article id."""

    def __init__(self, article_ids: Sequence[str], matrix: np.ndarray):
        self.article_ids = list(article_ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        order = sorted(range(len(self.article_ids)), key=lambda i: self.article_ids[i])
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))

    def scores(self, q_vec) -> np.ndarray:
        return self.matrix @ np.asarray(q_vec, dtype=np.float64)

    def search(self, q_vec, k: int | None = None) -> list[tuple[str, float]]:
        s = self.scores(q_vec)
        order = np.lexsort((self._id_rank, -s))
        if k is not None:
            order = order[:k]
        return [(self.article_ids[i], float(s[i])) for i in order]

    def rank(self, q_vec) -> list[str]:
        return [a for a, _ in self.search(q_vec)]


def encode_articles(model: BiEncoder, corpus: Corpus) -> np.ndarray:
    model.eval()
    with no_grad():
        return np.stack([model.encode_article(corpus.token_ids(a.id)).data
                         for a in corpus.articles])


def encode_queries(model: BiEncoder, corpus: Corpus, queries: Sequence[Query]) -> np.ndarray:
    model.eval()
    with no_grad():
        return np.stack([model.encode_query(corpus.vocab.encode(q.text)).data for q in queries])


def build_article_index(model: BiEncoder, corpus: Corpus) -> DenseIndex:
    return DenseIndex(corpus.article_ids, encode_articles(model, corpus))


def mean_recall(index: DenseIndex, q_vecs: np.ndarray, queries: Sequence[Query], k: int) -> float:
    if not len(queries):
        return 0.0
    vals = []
    for v, q in zip(q_vecs, queries):
        top = {a for a, _ in index.search(v, k)}
        vals.append(len(top & set(q.relevant_article_ids)) / len(q.relevant_article_ids))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# stage-1 training


@dataclass
class Stage1Config:
    epochs: int = 15
    batch_size: int = 24
    peak_lr: float = 2e-3
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    max_grad_norm: float = 1.0
    tau: float = 1.0
    bm25_negatives: int = 4
    max_positives: int = 2
    inbatch_negatives: bool = True
    inbatch_with_mined: bool = True
    select_k: int = 10


@dataclass
class Stage1Result:
    model: BiEncoder
    curve: list[dict]
    history: list[dict]
    best_epoch: int


def mine_all_negatives(index: InvertedIndex, corpus: Corpus, queries: Sequence[Query], n: int,
                       seed: int) -> dict[str, list[str]]:
    return {q.id: mine_negatives(index, tokenize(q.text), q.relevant_article_ids, n,
                                 seed=seed, key=q.id) for q in queries}


def stage1_train(corpus: Corpus, train: Sequence[Query], validation: Sequence[Query],
                 enc_cfg: EncoderConfig = EncoderConfig(), cfg: Stage1Config = Stage1Config(),
                 seed: int = 0, index: InvertedIndex | None = None) -> Stage1Result:
    """Contrastive training of the bi-encoder; keeps the weights with best validation recall."""
    index = index or index_corpus(corpus)
    model = BiEncoder(enc_cfg, len(corpus.vocab), np.random.default_rng([seed, 0]))
    order_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2])
    pos_rng = np.random.default_rng([seed, 3])
    negatives = mine_all_negatives(index, corpus, train, cfg.bm25_negatives, seed)

    steps_per_epoch = -(-len(train) // cfg.batch_size)
    schedule = LinearSchedule(cfg.peak_lr, cfg.epochs * steps_per_epoch, cfg.warmup_fraction)
    opt = OptimizerState(model.named_parameters(), schedule, cfg.beta1, cfg.beta2, cfg.eps,
                         cfg.weight_decay, cfg.max_grad_norm)
    curve, history = [], []
    best_state, best_score, best_epoch = model.state_dict(), -1.0, 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            qs = [train[i] for i in perm[start:start + cfg.batch_size]]
            batch = make_batch(qs, negatives, pos_rng, cfg.max_positives,
                               cfg.inbatch_negatives, cfg.inbatch_with_mined)
            model.train(True, drop_rng)
            opt.zero_grad()
            q_mat = ag.stack([model.encode_query(corpus.vocab.encode(q.text)) for q in qs])
            a_mat = ag.stack([model.encode_article(corpus.token_ids(a))
                              for a in batch.candidate_ids])
            loss = contrastive_loss(q_mat, a_mat, batch, cfg.tau)
            step += 1
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at step {step}")
            ag.backward(loss)
            lr = adamw_step(opt)
            curve.append({"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr})
        index_ = build_article_index(model, corpus)
        score = mean_recall(index_, encode_queries(model, corpus, validation), validation,
                            cfg.select_k) if validation else 0.0
        history.append({"epoch": epoch, f"val_recall@{cfg.select_k}": score})
        log.info("stage1 epoch %d loss %.4f val R@%d %.3f", epoch,
                 np.mean([c["loss"] for c in curve if c["epoch"] == epoch]), cfg.select_k, score)
        if score > best_score or not validation:
            best_state, best_score, best_epoch = model.state_dict(), score, epoch
    model.load_state_dict(best_state)
    model.eval()
    return Stage1Result(model, curve, history, best_epoch)
