"""Composite reward for a (query, decoded rewrite) pair.

    r_feedback = r_relevance * r_increment + r_productive
    r_rewrite  = r_rule * r_feedback
    r_fusion   = r_rewrite * r_tag        (0 for malformed outputs)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .relevance import aggregate_relevance
from .search import ClickSet, OfflineSearchEngine, RecallSet

REWARD_KINDS = ("fusion", "rewrite", "feedback", "feedback_tag", "relevance", "increment", "productive")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    tau_relev: float = 0.2
    m: int = 4
    delta_tiers: tuple[int, int, int] = (1, 2, 3)
    cutoffs: tuple[float, float] = (0.70, 0.30)

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.tau_relev <= 1.0:
            raise ValueError("tau_relev must lie in [0, 1]")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        hi, lo = self.cutoffs
        if not (0.0 < lo < hi <= 1.0):
            raise ValueError("cutoffs must be strictly decreasing in (0, 1]")


@dataclass(frozen=True)
class RewardBreakdown:
    r_relevance: float = 0.0
    r_productive: float = 0.0
    r_increment: float = 0.0
    r_feedback: float = 0.0
    r_rule: float = 0.0
    r_rewrite: float = 0.0
    r_tag: float = 0.0
    r_fusion: float = 0.0
    well_formed: bool = False

    def value(self, kind: str = "fusion") -> float:
        """Scalar training reward for one of the ablation variants in ``REWARD_KINDS``."""
        if not self.well_formed:
            return 0.0
        if kind == "feedback_tag":
            return self.r_feedback * self.r_tag
        if kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {kind!r}")
        return getattr(self, f"r_{kind}")


def position_weight(rank: int, n: int, config: RewardConfig) -> int:
    """Tier weight of a recall position: strictest cutoff with rank/n <= cutoff wins."""
    low, mid, high = config.delta_tiers
    frac = rank / n
    hi_cut, lo_cut = config.cutoffs
    if frac <= lo_cut:
        return high
    if frac <= hi_cut:
        return mid
    return low


def productive_reward(clicks: ClickSet, recall_y: RecallSet, config: RewardConfig) -> float:
    n = len(recall_y)
    total = 0
    for pid, _ in clicks.clicks:
        rank = recall_y.rank_of(pid)
        if rank is not None:
            total += position_weight(rank, n, config)
    return float(total)


def increment_reward(recall_x: RecallSet, recall_y: RecallSet) -> float:
    if len(recall_x) == 0:
        raise ValueError("undefined increment for unretrievable query")
    overlap = len(set(recall_x.ids) & set(recall_y.ids))
    return (len(recall_y) - overlap) / len(recall_x)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def char_diff_rate(x: str, y: str) -> float:
    longest = max(len(x), len(y))
    return levenshtein(x, y) / longest if longest else 0.0


def rule_reward(query: str, rewrite: str, alpha: float = 1.0, diff=char_diff_rate) -> float:
    if not rewrite or not query:
        return 0.0
    return alpha * diff(query, rewrite) * len(query) / len(rewrite)


def feedback_parts(query: str, rewrite: str, engine: OfflineSearchEngine, config: RewardConfig):
    recall_y = engine.retrieve(rewrite)
    r_r = aggregate_relevance(query, recall_y, engine.catalog, config.m)
    r_i = increment_reward(engine.retrieve(query), recall_y)
    r_p = productive_reward(engine.clicks(query), recall_y, config)
    return r_r, r_i, r_p


def feedback_reward(query: str, rewrite: str, engine: OfflineSearchEngine, config: RewardConfig) -> float:
    r_r, r_i, r_p = feedback_parts(query, rewrite, engine, config)
    return r_r * r_i + r_p


def tag_reward(query: str, rewrite: str, tag: int | None, engine: OfflineSearchEngine, config: RewardConfig) -> int:
    r_r = aggregate_relevance(query, engine.retrieve(rewrite), engine.catalog, config.m)
    return int(tag is not None and tag == int(r_r > config.tau_relev))


def fusion_reward(query: str, output, engine: OfflineSearchEngine, config: RewardConfig) -> RewardBreakdown:
    """Full breakdown for a parsed policy output; malformed outputs get all zeros."""
    if not output.well_formed:
        return RewardBreakdown()
    rewrite = output.rewrite
    r_r, r_i, r_p = feedback_parts(query, rewrite, engine, config)
    r_feedback = r_r * r_i + r_p
    r_rule = rule_reward(query, rewrite, config.alpha)
    r_rewrite = r_rule * r_feedback
    r_tag = float(output.tag is not None and output.tag == int(r_r > config.tau_relev))
    return RewardBreakdown(
        r_relevance=r_r,
        r_productive=r_p,
        r_increment=r_i,
        r_feedback=r_feedback,
        r_rule=r_rule,
        r_rewrite=r_rewrite,
        r_tag=r_tag,
        r_fusion=r_rewrite * r_tag,
        well_formed=True,
    )


def trace_line(query: str, output, breakdown: RewardBreakdown) -> str:
    """One audit line for the optional reward-trace file."""
    row = {"query": query, "rewrite": output.rewrite, "tag": output.tag, **asdict(breakdown)}
    return json.dumps(row, sort_keys=True)
