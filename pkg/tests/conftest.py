from __future__ import annotations

import numpy as np
import pytest

from qrewrite.catalog import CatalogConfig, generate_catalog
from qrewrite.datasets import DataConfig, build_datasets
from qrewrite.policy import RewritePolicy, Vocab
from qrewrite.search import OfflineSearchEngine
from qrewrite.sft import MultiTaskRewriter

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []

TOY_WORDS = [f"w{i:02d}" for i in range(12)]  # 8 specials + 12 words = V 20


def toy_policy(seed=0, hidden=8, tagged=True, scale=0.5) -> RewritePolicy:
    return RewritePolicy.create(Vocab.build(TOY_WORDS), hidden, seed, tagged, scale)


class FakeClock:
    def __init__(self, now: float = 1_000_000.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class World:
    """A small catalog, engine with click log, datasets, and a trained policy."""

    def __init__(self, seed=3, sizes=(4, 3, 5), n_train=150, n_eval=40, epochs=10, hidden=32):
        self.catalog = generate_catalog(CatalogConfig(*sizes, seed=seed))
        self.engine = OfflineSearchEngine(self.catalog, k=10)
        self.bundle = build_datasets(self.engine, DataConfig(n_train_queries=n_train, n_eval_queries=n_eval), seed)
        self.engine.click_log.update(self.bundle.click_sets)
        self.estimator = MultiTaskRewriter(
            epochs=epochs, hidden_size=hidden, vocabulary=self.catalog.vocabulary(), seed=seed
        ).fit(self.bundle.sft)
        self.policy = self.estimator.policy_


@pytest.fixture(scope="session")
def world() -> World:
    return World()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def perturbed(policy, rng, scale=0.05):
    flat = policy.params.flat()
    return policy.with_params(policy.params.with_flat(flat + scale * rng.standard_normal(flat.size)))


def toy_group(policy, old, ref, rng, n=4, query="w01 w02", max_len=5):
    """A candidate group sampled from ``old`` with random rewards; no engine involved."""
    from qrewrite.grpo import CandidateGroup, group_advantages

    samples = old.sample(query, n, rng, max_len)
    outputs = [old.parse_output(s) for s in samples]
    ids = [list(o.token_ids) for o in outputs]
    rewards = rng.uniform(0, 3, size=n)
    return CandidateGroup(
        query, outputs,
        old.sequence_log_probs([query] * n, ids),
        ref.sequence_log_probs([query] * n, ids),
        rewards, group_advantages(rewards),
    )


class FakePolicy:
    """Duck-typed policy with scripted beams: ``beams[query] = [(rewrite, tag, well_formed), ...]``."""

    def __init__(self, beams, tag_probs=None, tagged=True):
        self.beams = beams
        self.tag_probs = tag_probs or {}
        self.tagged = tagged
        self.generate_calls = 0

    def generate(self, query, beam_size=10, max_len=16):
        from qrewrite.policy import RewriteOutput

        self.generate_calls += 1
        rows = self.beams.get(query, [])[:beam_size]
        return [RewriteOutput(r, t, ok, -float(i)) for i, (r, t, ok) in enumerate(rows)]

    def rewrite_ids(self, rewrite):
        return rewrite

    def tag_probabilities(self, queries, rewrites):
        return np.array([self.tag_probs[(q, r)] for q, r in zip(queries, rewrites)], dtype=float)


TINY_CONFIG = {
    "run_dir": "run",
    "seed": 5,
    "catalog": {"n_brands": 3, "n_modifiers": 2, "n_categories": 4},
    "data": {"n_train_queries": 60, "n_eval_queries": 15},
    "sft": {"epochs": 3, "hidden_size": 16, "batch_size": 32, "checkpoint_every": 2},
    "rl": {"steps": 2, "batch_size": 4, "beam_size": 4, "max_len": 8, "checkpoint_every": 1},
    "dpo": {"epochs": 1, "n_candidates": 6, "bottom": 3},
    "eval": {"beam_size": 6, "max_len": 8},
}


def write_config(directory, **sections):
    """YAML config for a tiny run inside ``directory``; keyword sections are merged over the defaults."""
    import copy

    import yaml

    raw = copy.deepcopy(TINY_CONFIG)
    for name, value in sections.items():
        if isinstance(value, dict):
            raw.setdefault(name, {}).update(value)
        else:
            raw[name] = value
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=True))
    return path
