"""Topic-planted synthetic statute corpus for desk-scale experiments.

Each topic owns a sub-vocabulary made of generic topic words plus a set of
*concepts*.  A concept has a legal surface form, used by articles, and a lay
form, used most of the time by queries.  Articles cover a few concepts of
their topic; a query names two concepts and is labelled with the topic's
articles covering both.  Lexical matching therefore sees mostly topic-level
overlap, while a trained encoder can learn the lay/legal correspondence.
Sections group articles that share their leading concept.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .corpus import Article, Corpus, CorpusError, DatasetSplit, Query, Vocabulary, tokenize

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "kr", "pl", "st", "tr", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ou", "ai"]


@dataclass(frozen=True)
class SyntheticSpec:
    n_topics: int = 4
    articles_per_topic: int = 50
    n_train: int = 100
    n_val: int = 20
    n_test: int = 30
    concepts_per_topic: int = 8
    concepts_per_article: int = 2
    topic_words: int = 20
    common_words: int = 40
    background_words: int = 200
    relevant_min: int = 1
    relevant_max: int = 5
    article_len: tuple[int, int] = (30, 90)
    query_len: tuple[int, int] = (6, 14)
    lay_rate: float = 0.95
    noise_rate: float = 0.1
    sections_per_chapter: int = 3
    chapters_per_title: int = 2
    titles_per_book: int = 2

    @property
    def n_queries(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def vocab_size(self) -> int:
        per_topic = self.topic_words + 2 * self.concepts_per_topic
        return self.common_words + self.background_words + self.n_topics * per_topic


def _word_list(n: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _check_feasible(spec: SyntheticSpec) -> None:
    if spec.n_topics < 1 or spec.articles_per_topic < 1:
        raise CorpusError("need at least one topic and one article per topic")
    if not 1 <= spec.relevant_min <= spec.relevant_max:
        raise CorpusError("relevant range must satisfy 1 <= min <= max")
    if spec.relevant_max > spec.articles_per_topic:
        raise CorpusError(
            f"infeasible spec: up to {spec.relevant_max} relevant articles per query "
            f"but only {spec.articles_per_topic} articles per topic")
    if spec.concepts_per_article > spec.concepts_per_topic or spec.concepts_per_article < 2:
        raise CorpusError("concepts_per_article must be in [2, concepts_per_topic]")
    if not 0.0 <= spec.noise_rate <= 1.0 or not 0.0 <= spec.lay_rate <= 1.0:
        raise CorpusError("rates must lie in [0, 1]")


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 7
                       ) -> tuple[Corpus, list[Query], DatasetSplit]:
    """Build a corpus, its queries and a train/validation/test split; deterministic in ``seed``."""
    _check_feasible(spec)
    rng = np.random.default_rng(seed)
    C = spec.concepts_per_topic
    words = _word_list(spec.vocab_size, rng)
    it = iter(words)
    common = [next(it) for _ in range(spec.common_words)]
    topics = []
    for _ in range(spec.n_topics):
        topics.append({
            "generic": [next(it) for _ in range(spec.topic_words)],
            "legal": [next(it) for _ in range(C)],
            "lay": [next(it) for _ in range(C)],
        })
    everything = words

    def noisy(tokens: list[str]) -> list[str]:
        if spec.noise_rate <= 0:
            return tokens
        flip = rng.random(len(tokens)) < spec.noise_rate
        return [everything[rng.integers(len(everything))] if f else t
                for t, f in zip(tokens, flip)]

    # articles
    articles: list[Article] = []
    concepts_of: dict[str, frozenset[int]] = {}
    topic_of: dict[str, int] = {}
    per_topic_ids: list[list[str]] = []
    for t, top in enumerate(topics):
        drafts = []
        for j in range(spec.articles_per_topic):
            cs = sorted(rng.choice(C, size=spec.concepts_per_article, replace=False).tolist())
            length = int(rng.integers(spec.article_len[0], spec.article_len[1] + 1))
            u = rng.random(length)
            toks = []
            for x in u:
                if x < 0.35:
                    toks.append(top["legal"][cs[rng.integers(len(cs))]])
                elif x < 0.65:
                    toks.append(top["generic"][rng.integers(len(top["generic"]))])
                else:
                    toks.append(common[rng.integers(len(common))])
            drafts.append((cs, noisy(toks)))
        # group by leading concept so sections gather related articles
        order = sorted(range(len(drafts)), key=lambda j: (drafts[j][0][0], j))
        n_sections = spec.titles_per_book * spec.chapters_per_title * spec.sections_per_chapter
        ids = []
        section_lead: dict[int, str] = {}
        for pos, j in enumerate(order):
            cs, toks = drafts[j]
            aid = f"t{t}-a{pos:03d}"
            sec = pos * n_sections // len(order)
            chap = sec // spec.sections_per_chapter
            title = chap // spec.chapters_per_title
            lead = section_lead.setdefault(sec, top["legal"][cs[0]])
            gen = top["generic"]
            hierarchy = [
                ("book", f"Book {t + 1} {gen[0]} {gen[1]}"),
                ("title", f"Title {title + 1} {gen[2 + title % (len(gen) - 2)]}"),
                ("chapter", f"Chapter {chap + 1} {gen[4 + chap % (len(gen) - 4)]}"),
            ]
            # every fifth section is folded into its chapter to keep paths irregular
            if sec % 5 != 4:
                hierarchy.append(("section", f"Section {sec + 1} {lead}"))
            articles.append(Article(aid, " ".join(toks), tuple(hierarchy)))
            concepts_of[aid] = frozenset(cs)
            topic_of[aid] = t
            ids.append(aid)
        per_topic_ids.append(ids)

    # queries
    queries: list[Query] = []
    pairs_by_topic = []
    for t in range(spec.n_topics):
        usable = []
        for pair in itertools.combinations(range(C), 2):
            rel = [a for a in per_topic_ids[t] if set(pair) <= concepts_of[a]]
            if spec.relevant_min <= len(rel) <= spec.relevant_max:
                usable.append((pair, rel))
        if not usable:
            raise CorpusError(f"infeasible spec: topic {t} has no concept pair with "
                              f"{spec.relevant_min}-{spec.relevant_max} matching articles")
        pairs_by_topic.append(usable)

    for qi in range(spec.n_queries):
        t = qi % spec.n_topics
        top = topics[t]
        pair, rel = pairs_by_topic[t][rng.integers(len(pairs_by_topic[t]))]
        length = int(rng.integers(spec.query_len[0], spec.query_len[1] + 1))
        toks = []
        for k in range(length):
            x = rng.random()
            if k < 2 or x < 0.45:
                c = pair[k % 2] if k < 2 else pair[rng.integers(2)]
                form = "lay" if rng.random() < spec.lay_rate else "legal"
                toks.append(top[form][c])
            elif x < 0.7:
                toks.append(top["generic"][rng.integers(len(top["generic"]))])
            else:
                toks.append(common[rng.integers(len(common))])
        toks = noisy(toks)
        queries.append(Query(f"q{qi:04d}", " ".join(toks), tuple(rel)))

    perm = rng.permutation(len(queries))
    ids = [queries[i].id for i in perm]
    n_tr, n_va = spec.n_train, spec.n_val
    split = DatasetSplit(tuple(sorted(ids[:n_tr])), tuple(sorted(ids[n_tr:n_tr + n_va])),
                         tuple(sorted(ids[n_tr + n_va:])))

    vocab = Vocabulary(t for item in [*articles, *queries] for t in tokenize(item.text))
    corpus = Corpus(articles, vocab)
    corpus.topic_of = topic_of
    corpus.concepts_of = concepts_of
    return corpus, queries, split
