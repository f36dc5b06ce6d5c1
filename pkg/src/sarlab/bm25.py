"""Okapi BM25 over an inverted index; baseline retriever and hard-negative miner."""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0 or not 0.0 <= self.b <= 1.0:
            raise ValueError(f"invalid BM25 parameters k1={self.k1}, b={self.b}")


@dataclass
class InvertedIndex:
    doc_ids: list[str]
    doc_lengths: dict[str, int]
    postings: dict[str, list[tuple[str, int]]]
    params: Bm25Params = field(default_factory=Bm25Params)

    def __post_init__(self):
        self.n_docs = len(self.doc_ids)
        total = sum(self.doc_lengths.values())
        self.avg_length = total / self.n_docs if self.n_docs else 0.0
        self.df = {t: len(p) for t, p in self.postings.items()}
        self._tf = {t: dict(p) for t, p in self.postings.items()}

    def idf(self, token: str) -> float:
        df = self.df.get(token, 0)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def save(self, path) -> None:
        rec = {"version": INDEX_FORMAT_VERSION, "k1": self.params.k1, "b": self.params.b,
               "doc_ids": self.doc_ids, "doc_lengths": self.doc_lengths,
               "postings": {t: self.postings[t] for t in sorted(self.postings)}}
        Path(path).write_text(json.dumps(rec, separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        if rec.get("version") != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index version {rec.get('version')}")
        postings = {t: [(d, int(n)) for d, n in p] for t, p in rec["postings"].items()}
        return cls(rec["doc_ids"], rec["doc_lengths"], postings, Bm25Params(rec["k1"], rec["b"]))


def build_index(docs: Iterable[tuple[str, Sequence[str]]],
                params: Bm25Params = Bm25Params()) -> InvertedIndex:
    """Index ``(doc_id, tokens)`` pairs; postings are sorted by document id."""
    doc_ids, lengths = [], {}
    post: dict[str, list[tuple[str, int]]] = {}
    for doc_id, tokens in docs:
        doc_ids.append(doc_id)
        lengths[doc_id] = len(tokens)
        for tok, n in Counter(tokens).items():
            post.setdefault(tok, []).append((doc_id, n))
    for plist in post.values():
        plist.sort()
    return InvertedIndex(doc_ids, lengths, post, params)


def index_corpus(corpus, params: Bm25Params = Bm25Params()) -> InvertedIndex:
    return build_index(((a.id, a.tokens) for a in corpus.articles), params)


def _term_weight(index: InvertedIndex, tf: int, length: int) -> float:
    k1, b = index.params.k1, index.params.b
    norm = 1.0 - b + b * length / index.avg_length if index.avg_length > 0 else 1.0
    return tf * (k1 + 1.0) / (tf + k1 * norm)


def bm25_score(index: InvertedIndex, query_tokens: Sequence[str], doc_id: str) -> float:
    if doc_id not in index.doc_lengths:
        raise KeyError(f"unknown article id {doc_id!r}")
    length = index.doc_lengths[doc_id]
    score = 0.0
    for tok in query_tokens:
        tf = index._tf.get(tok, {}).get(doc_id, 0)
        if tf:
            score += index.idf(tok) * _term_weight(index, tf, length)
    return score


def score_all(index: InvertedIndex, query_tokens: Sequence[str]) -> dict[str, float]:
    """Scores of every document sharing at least one token with the query."""
    scores: dict[str, float] = {}
    for tok in query_tokens:
        plist = index.postings.get(tok)
        if not plist:
            continue
        idf = index.idf(tok)
        for doc_id, tf in plist:
            w = idf * _term_weight(index, tf, index.doc_lengths[doc_id])
            scores[doc_id] = scores.get(doc_id, 0.0) + w
    return scores


def search_topk(index: InvertedIndex, query_tokens: Sequence[str], k: int
                ) -> list[tuple[str, float]]:
    """Top ``k`` matching documents, descending score, ties by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_all(index, query_tokens)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def rank_all(index: InvertedIndex, query_tokens: Sequence[str]) -> list[str]:
    """Full ranking: matching documents by score, then the rest by id."""
    hits = [d for d, _ in search_topk(index, query_tokens, max(index.n_docs, 1))]
    seen = set(hits)
    return hits + sorted(d for d in index.doc_ids if d not in seen)


def _stable_seed(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def mine_negatives(index: InvertedIndex, query_tokens: Sequence[str], relevant: Iterable[str],
                   n: int, seed: int = 0, key: str = "") -> list[str]:
    """``n`` highest-scoring non-relevant documents, topped up with seeded random picks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rel = set(relevant)
    pool = [d for d in index.doc_ids if d not in rel]
    if len(pool) < n:
        raise ValueError(f"corpus of {index.n_docs} documents cannot supply {n} negatives "
                         f"beside {len(rel)} relevant ones")
    scores = score_all(index, query_tokens)
    hits = sorted(((s, d) for d, s in scores.items() if s > 0 and d not in rel),
                  key=lambda sd: (-sd[0], sd[1]))
    out = [d for _, d in hits[:n]]
    if len(out) < n:
        taken = set(out)
        rest = sorted(d for d in pool if d not in taken)
        rng = _stable_seed(seed, key or " ".join(query_tokens))
        extra = rng.choice(len(rest), size=n - len(out), replace=False)
        out.extend(rest[i] for i in sorted(extra))
    return out
