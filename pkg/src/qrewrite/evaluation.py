"""Offline metrics: tagging accuracy, click hit rate of the rewrite set, and rewrite relevance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .relevance import aggregate_relevance


@dataclass(frozen=True)
class EvalConfig:
    beam_size: int = 10
    rewrite_count: int = 3
    max_len: int = 16
    m: int = 4

    def __post_init__(self) -> None:
        if self.rewrite_count < 1:
            raise ValueError("rewrite_count must be >= 1")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass
class MetricsReport:
    tagging_accuracy: float | None
    recall_rate: float
    relevance_score: float
    evaluated: int
    skipped_malformed: int
    survivors: int
    relevance_empty: bool = False
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def row(self) -> list[str]:
        acc = "-" if self.tagging_accuracy is None else f"{self.tagging_accuracy:.4f}"
        return [acc, f"{self.recall_rate:.4f}", f"{self.relevance_score:.4f}",
                str(self.evaluated), str(self.skipped_malformed), str(self.survivors)]


REPORT_COLUMNS = ["tagging_accuracy", "recall_rate", "relevance_score", "evaluated", "skipped_malformed", "survivors"]


def tagging_accuracy(policy, records, chunk: int = 256) -> float:
    """Share of records whose argmax tag (ties go to 0) equals the gold tag."""
    records = list(records)
    if not records:
        raise ValueError("empty tagging dataset")
    hits = 0
    for start in range(0, len(records), chunk):
        part = records[start : start + chunk]
        p = policy.tag_probabilities([r.query for r in part], [policy.rewrite_ids(r.rewrite) for r in part])
        pred = (p[:, 1] > p[:, 0]).astype(int)
        hits += int(np.sum(pred == np.array([r.tag for r in part])))
    return hits / len(records)


@dataclass
class Candidates:
    """Decoded candidates for one query and the ones that pass the serving filter."""

    outputs: list
    survivors: list[str]

    @property
    def malformed(self) -> int:
        return sum(not o.well_formed for o in self.outputs)


def select_rewrites(policy, query: str, beam_size: int = 10, max_len: int = 16) -> Candidates:
    """Distinct well-formed rewrites in beam order whose predicted tag is 1 (tagged models only).

    A rewrite can appear twice in the beam, once per tag. Its predicted tag is
    the one on the higher-scoring copy, so later copies are ignored.
    """
    outputs = policy.generate(query, beam_size, max_len)
    seen, keep = set(), []
    for o in outputs:
        if not o.well_formed or o.rewrite in seen:
            continue
        seen.add(o.rewrite)
        if not policy.tagged or o.tag == 1:
            keep.append(o.rewrite)
    return Candidates(outputs, keep)


def decode_all(policy, queries, beam_size: int = 10, max_len: int = 16) -> dict[str, Candidates]:
    return {q: select_rewrites(policy, q, beam_size, max_len) for q in sorted(set(queries))}


def recall_rate(policy, records, engine, rewrite_count: int = 3, beam_size: int = 10, max_len: int = 16,
                decoded=None) -> float:
    """Fraction of records whose clicked product is retrieved by at least one of the top rewrites."""
    if rewrite_count < 1:
        raise ValueError("rewrite_count must be >= 1")
    records = list(records)
    if not records:
        return 0.0
    decoded = decoded or decode_all(policy, [r.query for r in records], beam_size, max_len)
    hits = 0
    for r in records:
        union = set()
        for y in decoded[r.query].survivors[:rewrite_count]:
            union.update(engine.retrieve(y).ids)
        hits += r.clicked_product_id in union
    return hits / len(records)


def relevance_metric(policy, queries, engine, config: EvalConfig = EvalConfig(), decoded=None):
    """(mean aggregate relevance over surviving (query, rewrite) pairs, survivor count).

    Returns 0.0 with a count of 0 when nothing survives.
    """
    queries = list(queries)
    decoded = decoded or decode_all(policy, queries, config.beam_size, config.max_len)
    scores = [
        aggregate_relevance(q, engine.retrieve(y), engine.catalog, config.m)
        for q in queries
        for y in decoded[q].survivors[: config.rewrite_count]
    ]
    if not scores:
        return 0.0, 0
    return math.fsum(scores) / len(scores), len(scores)


def evaluate(policy, tagging_records, recall_records, engine, config: EvalConfig = EvalConfig(), decoded=None):
    recall_records = list(recall_records)
    queries = [r.query for r in recall_records]
    decoded = decoded or decode_all(policy, queries, config.beam_size, config.max_len)
    acc = tagging_accuracy(policy, tagging_records) if policy.tagged and tagging_records else None
    rec = recall_rate(policy, recall_records, engine, config.rewrite_count, decoded=decoded)
    rel, n = relevance_metric(policy, queries, engine, config, decoded=decoded)
    return MetricsReport(
        tagging_accuracy=acc,
        recall_rate=rec,
        relevance_score=rel,
        evaluated=len(recall_records),
        skipped_malformed=sum(decoded[q].malformed for q in sorted(set(queries))),
        survivors=n,
        relevance_empty=n == 0,
        settings=asdict(config),
    )


def run_sweep(axis: str, values, report_for) -> list[tuple[object, MetricsReport]]:
    """One report per value; ``report_for(value)`` owns any retraining the axis needs."""
    if axis not in ("beam_size", "rewrite_number"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    return [(v, report_for(v)) for v in values]


def rewrite_number_sweep(policy, tagging_records, recall_records, engine, values, config: EvalConfig = EvalConfig()):
    """Sweep over the number of served rewrites, decoding each query once."""
    decoded = decode_all(policy, [r.query for r in recall_records], config.beam_size, config.max_len)

    def report(v):
        cfg = EvalConfig(config.beam_size, v, config.max_len, config.m)
        return evaluate(policy, tagging_records, recall_records, engine, cfg, decoded)

    return run_sweep("rewrite_number", values, report)


def format_table(axis: str, rows) -> str:
    lines = ["\t".join([axis, *REPORT_COLUMNS])]
    lines += ["\t".join([str(v), *rep.row()]) for v, rep in rows]
    return "\n".join(lines) + "\n"
