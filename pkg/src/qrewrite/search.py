"""Offline lexical search engine: inverted index, BM25 retrieval, click simulation."""

from __future__ import annotations

import math
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .catalog import Catalog, tokenize
from .relevance import expand_tokens, relev


@dataclass(frozen=True)
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: dict[int, int]
    avg_doc_length: float

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)


@dataclass(frozen=True)
class RecallItem:
    product_id: int
    score: float
    rank: int


@dataclass(frozen=True)
class RecallSet:
    query_text: str
    items: tuple[RecallItem, ...]
    k: int

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[int]:
        return [it.product_id for it in self.items]

    def rank_of(self, product_id: int) -> int | None:
        for it in self.items:
            if it.product_id == product_id:
                return it.rank
        return None


@dataclass(frozen=True)
class ClickSet:
    query_text: str
    clicks: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.clicks)

    @property
    def ids(self) -> list[int]:
        return [pid for pid, _ in self.clicks]


def build_index(catalog: Catalog) -> InvertedIndex:
    if len(catalog) == 0:
        raise ValueError("cannot index an empty catalog")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: dict[int, int] = {}
    for product in sorted(catalog.products, key=lambda p: p.id):
        doc_lengths[product.id] = len(product.tokens)
        for tok, tf in sorted(Counter(product.tokens).items()):
            postings.setdefault(tok, []).append((product.id, tf))
    avg = sum(doc_lengths.values()) / len(doc_lengths)
    return InvertedIndex(postings=dict(sorted(postings.items())), doc_lengths=doc_lengths, avg_doc_length=avg)


def bm25_idf(n_docs: int, doc_freq: int) -> float:
    return math.log((n_docs - doc_freq + 0.5) / (doc_freq + 0.5) + 1.0)


def bm25_term(tf: int, doc_len: int, avg_len: float, idf: float, k1: float, b: float) -> float:
    return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avg_len))


def retrieve(index: InvertedIndex, query_text: str, k: int, k1: float = 1.2, b: float = 0.75) -> RecallSet:
    """Any-token BM25 retrieval; ties go to the smaller product id.

    Repeated query tokens count once.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[int, float] = {}
    for tok in sorted(set(tokenize(query_text))):
        plist = index.postings.get(tok)
        if not plist:
            continue
        idf = bm25_idf(index.n_docs, len(plist))
        for pid, tf in plist:
            scores[pid] = scores.get(pid, 0.0) + bm25_term(
                tf, index.doc_lengths[pid], index.avg_doc_length, idf, k1, b
            )
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    items = tuple(RecallItem(pid, score, rank) for rank, (pid, score) in enumerate(ranked, start=1))
    return RecallSet(query_text=query_text, items=items, k=k)


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def simulate_clicks(
    catalog: Catalog, query_text: str, recall_set: RecallSet, seed: int, click_scale: float = 1.0
) -> ClickSet:
    """Position-biased Bernoulli clicks over ``recall_set``.

    Item at rank r is clicked with probability ``min(1, click_scale * relev * 1/r)``.
    The generator is keyed by (seed, query) so each query's draw is independent
    of the order in which queries are processed.
    """
    if not recall_set.items:
        return ClickSet(query_text, ())
    rng = np.random.default_rng([seed, stable_hash(query_text)])
    draws = rng.random(len(recall_set.items))
    clicks = []
    for item, u in zip(recall_set.items, draws):
        p = min(1.0, click_scale * relev(query_text, catalog[item.product_id], catalog.synonym_table) / item.rank)
        if u < p:
            clicks.append((item.product_id, item.rank))
    return ClickSet(query_text, tuple(clicks))


@dataclass
class OfflineSearchEngine:
    """Catalog + index + retrieval depth, with an optional click log keyed by query."""

    catalog: Catalog
    k: int = 10
    k1: float = 1.2
    b: float = 0.75
    click_log: dict[str, ClickSet] = field(default_factory=dict)
    index: InvertedIndex | None = None

    def __post_init__(self) -> None:
        if self.index is None:
            self.index = build_index(self.catalog)
        self._cache: dict[str, RecallSet] = {}

    def retrieve(self, text: str, k: int | None = None) -> RecallSet:
        depth = self.k if k is None else k
        if depth != self.k:
            return retrieve(self.index, text, depth, self.k1, self.b)
        hit = self._cache.get(text)
        if hit is None:
            hit = retrieve(self.index, text, depth, self.k1, self.b)
            self._cache[text] = hit
        return hit

    def result_page(self, query: str) -> RecallSet:
        """What a synonym-expanding production engine shows for ``query``; clicks land here."""
        expanded = " ".join(sorted(expand_tokens(tokenize(query), self.catalog.synonym_table)))
        rs = self.retrieve(expanded)
        return RecallSet(query_text=query, items=rs.items, k=rs.k)

    def clicks(self, query: str) -> ClickSet:
        try:
            return self.click_log[query]
        except KeyError:
            raise KeyError(f"no click set for query {query!r}") from None

    def simulate(self, query: str, seed: int, click_scale: float = 1.0) -> ClickSet:
        return simulate_clicks(self.catalog, query, self.result_page(query), seed, click_scale)
