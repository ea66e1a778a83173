"""Deterministic relevance scorer standing in for an online relevance model."""

from __future__ import annotations

from collections.abc import Iterable, Mapping

from .catalog import Product, tokenize


def expand_tokens(tokens: Iterable[str], synonym_table: Mapping[str, Iterable[str]]) -> set[str]:
    out: set[str] = set()
    for tok in tokens:
        out.add(tok)
        out.update(synonym_table.get(tok, ()))
    return out


def relev(query: str | list[str], product: Product, synonym_table: Mapping[str, Iterable[str]]) -> float:
    """Synonym-aware token-overlap F1 between a query and a product title.

    A query token matches when it, or one of its synonyms, occurs in the
    title. A title token matches when it, or one of its synonyms, occurs in
    the query. Empty query or title scores 0.
    """
    q_tokens = tokenize(query) if isinstance(query, str) else list(query)
    t_tokens = list(product.tokens)
    if not q_tokens or not t_tokens:
        return 0.0
    title_set = set(t_tokens)
    query_set = set(q_tokens)
    q_hit = sum(1 for tok in q_tokens if expand_tokens([tok], synonym_table) & title_set)
    t_hit = sum(1 for tok in t_tokens if expand_tokens([tok], synonym_table) & query_set)
    if q_hit == 0 or t_hit == 0:
        return 0.0
    precision = q_hit / len(q_tokens)
    recall = t_hit / len(t_tokens)
    return 2.0 * precision * recall / (precision + recall)


def aggregate_relevance(query, recall_set, catalog, m: int = 4) -> float:
    """Product of per-item relevance over the top ``min(m, len(recall_set))`` items.

    An empty recall set scores 0: a rewrite that retrieves nothing cannot be relevant.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    items = recall_set.items[:m]
    if not items:
        return 0.0
    score = 1.0
    for item in items:
        score *= relev(query, catalog[item.product_id], catalog.synonym_table)
    return score
