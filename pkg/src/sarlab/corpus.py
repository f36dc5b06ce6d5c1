"""Statute corpus, queries, vocabulary, tokenisation and chunking.

Articles and queries are read from line-delimited JSON files::

    {"id": "a1", "text": "...", "book": "...", "title": "...", "chapter": "...", "section": "..."}
    {"id": "q1", "text": "...", "article_ids": ["a1", "a7"]}

Hierarchy fields are optional.  A structural unit is identified by its full
path from the root, so two chapters with the same label under different
titles are distinct units and the unit graph is a forest.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

LEVELS = ("book", "title", "chapter", "section")
CLS = "[CLS]"
UNK = "[UNK]"
CLS_ID = 0
UNK_ID = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class CorpusError(ValueError):
    """Invalid corpus or query data."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        words = sorted(set(tokens) - {CLS, UNK})
        self.itos = [CLS, UNK] + words
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.index(t) for t in tokenize(text)]


def chunk_article(tokens: Sequence[int], chunk_len: int, cls_id: int = CLS_ID) -> list[list[int]]:
    """Split into consecutive chunks of at most ``chunk_len`` tokens, each led by ``cls_id``.

    An empty sequence gives one chunk holding only the CLS-role token.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    if not tokens:
        return [[cls_id]]
    return [[cls_id, *tokens[i:i + chunk_len]] for i in range(0, len(tokens), chunk_len)]


@dataclass(frozen=True)
class Article:
    id: str
    text: str
    hierarchy: tuple[tuple[str, str], ...] = ()

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)

    def unit_keys(self) -> list[str]:
        """Keys of the structural units containing this article, root first."""
        keys, path = [], []
        for level, label in self.hierarchy:
            path.append(f"{level}={label}")
            keys.append("/".join(path))
        return keys

    def to_record(self) -> dict:
        rec = {"id": self.id, "text": self.text}
        rec.update(dict(self.hierarchy))
        return rec


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    relevant_article_ids: tuple[str, ...]

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "article_ids": list(self.relevant_article_ids)}


@dataclass(frozen=True)
class StructuralUnit:
    key: str
    level: str
    label: str
    parent: str | None

    @property
    def heading(self) -> str:
        return self.label


@dataclass
class Corpus:
    articles: list[Article]
    vocab: Vocabulary
    units: dict[str, StructuralUnit] = field(default_factory=dict)

    def __post_init__(self):
        self.by_id = {a.id: a for a in self.articles}
        if len(self.by_id) != len(self.articles):
            seen, dup = set(), []
            for a in self.articles:
                if a.id in seen:
                    dup.append(a.id)
                seen.add(a.id)
            raise CorpusError(f"duplicate article ids: {sorted(set(dup))}")
        if not self.units:
            self.units = build_units(self.articles)
        self._token_ids = {a.id: self.vocab.encode(a.text) for a in self.articles}

    def __len__(self) -> int:
        return len(self.articles)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Corpus) and self.articles == other.articles
                and self.vocab == other.vocab and self.units == other.units)

    @property
    def article_ids(self) -> list[str]:
        return [a.id for a in self.articles]

    def token_ids(self, article_id: str) -> list[int]:
        return self._token_ids[article_id]


def build_units(articles: Iterable[Article]) -> dict[str, StructuralUnit]:
    units: dict[str, StructuralUnit] = {}
    for a in articles:
        parent = None
        for (level, label), key in zip(a.hierarchy, a.unit_keys()):
            if key not in units:
                units[key] = StructuralUnit(key, level, label, parent)
            parent = key
    return units


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise CorpusError("split query sets overlap")

    def select(self, queries: Sequence[Query], part: str) -> list[Query]:
        ids = getattr(self, part)
        by_id = {q.id: q for q in queries}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise CorpusError(f"split references unknown queries: {missing}")
        return [by_id[i] for i in ids]

    def to_record(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation),
                "test": list(self.test)}


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return out


def _write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n")


def article_from_record(rec: dict) -> Article:
    if "id" not in rec:
        raise CorpusError(f"article record without id: {rec}")
    hierarchy = tuple((lvl, str(rec[lvl])) for lvl in LEVELS
                      if rec.get(lvl) not in (None, ""))
    return Article(str(rec["id"]), str(rec.get("text", "")), hierarchy)


def validate_queries(queries: Sequence[Query], corpus: Corpus) -> None:
    ids = [q.id for q in queries]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CorpusError(f"duplicate query ids: {dup}")
    empty = [q.id for q in queries if not q.relevant_article_ids]
    if empty:
        raise CorpusError(f"queries without relevant articles: {empty}")
    dangling = [(q.id, a) for q in queries for a in q.relevant_article_ids
                if a not in corpus.by_id]
    if dangling:
        listed = ", ".join(f"{q} -> {a}" for q, a in dangling)
        raise CorpusError(f"dangling relevant article ids: {listed}")


def load_corpus(articles_file, queries_file) -> tuple[Corpus, list[Query]]:
    articles = [article_from_record(r) for r in _read_jsonl(articles_file)]
    queries = []
    for r in _read_jsonl(queries_file):
        rel = tuple(dict.fromkeys(str(x) for x in r.get("article_ids", [])))
        queries.append(Query(str(r["id"]), str(r.get("text", "")), rel))
    vocab = Vocabulary(t for item in [*articles, *queries] for t in tokenize(item.text))
    corpus = Corpus(articles, vocab)
    validate_queries(queries, corpus)
    return corpus, queries


def write_corpus(corpus: Corpus, queries: Sequence[Query], articles_file, queries_file) -> None:
    _write_jsonl(articles_file, (a.to_record() for a in corpus.articles))
    _write_jsonl(queries_file, (q.to_record() for q in queries))


def write_split(split: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(split.to_record(), indent=1) + "\n", encoding="utf-8")


def load_split(path) -> DatasetSplit:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetSplit(tuple(rec["train"]), tuple(rec.get("validation", ())), tuple(rec["test"]))


def load_dataset(data_dir) -> tuple[Corpus, list[Query], DatasetSplit]:
    """Load ``articles.jsonl``, ``queries.jsonl`` and ``split.json`` from a directory."""
    d = Path(data_dir)
    corpus, queries = load_corpus(d / "articles.jsonl", d / "queries.jsonl")
    split = load_split(d / "split.json")
    for part in ("train", "validation", "test"):
        split.select(queries, part)
    return corpus, queries, split
