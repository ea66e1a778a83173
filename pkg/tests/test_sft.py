import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

import oracles
from conftest import TOY_WORDS, toy_policy
from qrewrite.datasets import QueryRewritePair, TaggedExample
from qrewrite.policy import checkpoint
from qrewrite.sft import (
    MultiTaskRewriter,
    SftConfig,
    TrainingDiverged,
    multi_task_loss,
    single_task_loss,
    train_sft,
)

EXAMPLE = st.builds(
    TaggedExample,
    st.lists(st.sampled_from(TOY_WORDS), min_size=1, max_size=3).map(" ".join),
    st.lists(st.sampled_from(TOY_WORDS), min_size=1, max_size=4).map(" ".join),
    st.integers(0, 1),
)


@given(st.lists(EXAMPLE, min_size=1, max_size=6), st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_lambda_zero_is_single_task_exactly(batch, seed):
    pol = toy_policy(seed=seed, scale=1.0)
    a = multi_task_loss(pol, batch, lam=0.0)
    b = single_task_loss(pol, [QueryRewritePair(e.query, e.rewrite) for e in batch])
    assert a.loss == b.loss and a.nll == b.nll
    np.testing.assert_array_equal(a.grads.flat(), b.grads.flat())


def test_uniform_model_analytic_loss():
    pol = toy_policy(seed=None)
    batch = [TaggedExample("w00", "w01 w02", 1), TaggedExample("w03", "w04", 0)]
    lv = multi_task_loss(pol, batch, lam=0.7)
    # rewrite tokens plus the separator, each at 1/V
    nll = (3 * math.log(20) + 2 * math.log(20)) / 2
    assert lv.nll == pytest.approx(nll, abs=1e-12)
    assert lv.bce == pytest.approx(math.log(2), abs=1e-12)
    assert lv.loss == pytest.approx(nll + 0.7 * math.log(2), abs=1e-12)


def test_multi_task_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pol = toy_policy(seed=7, scale=1.0)
    batch = [TaggedExample(" ".join(rng.choice(TOY_WORDS, 2)), " ".join(rng.choice(TOY_WORDS, 2)), i % 2)
             for i in range(4)]
    lv = multi_task_loss(pol, batch, lam=1.3)

    def f(v):
        return multi_task_loss(pol.with_params(pol.params.with_flat(v)), batch, 1.3, need_grad=False).loss

    assert oracles.fd_relative_error(f, pol.params.flat(), lv.grads.flat()) < 1e-4


def test_loss_rejects_empty_and_zero_length():
    pol = toy_policy()
    with pytest.raises(ValueError):
        multi_task_loss(pol, [])
    with pytest.raises(ValueError):
        single_task_loss(pol, [QueryRewritePair("w00", " - ")])


def toy_set(n=50, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        q = " ".join(rng.choice(TOY_WORDS, 2))
        out.append(TaggedExample(q, " ".join(rng.choice(TOY_WORDS, 2)), i % 2))
    return out


def test_single_task_loss_decreases_for_ten_full_batch_steps():
    data = [QueryRewritePair(e.query, e.rewrite) for e in toy_set()]
    cfg = SftConfig(lam=0.0, learning_rate=0.01, epochs=10, batch_size=len(data), momentum=0.0, clip_norm=None)
    _, curve = train_sft(cfg, data, toy_policy(seed=0, hidden=8), multitask=False)
    losses = [row[1] for row in curve]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_memorising_a_small_set_drives_loss_below_001_per_token():
    data = [TaggedExample(f"w{i:02d}", f"w{(i + 3) % 12:02d} w{(i + 5) % 12:02d}", i % 2) for i in range(6)]
    pol = toy_policy(seed=0, hidden=16)
    cfg = SftConfig(lam=1.0, learning_rate=0.1, epochs=400, batch_size=6, momentum=0.9, optimizer="adam")
    trained, _ = train_sft(cfg, data, pol)
    lv = multi_task_loss(trained, data, lam=1.0, need_grad=False)
    n_tokens = sum(len(e.rewrite.split()) + 1 for e in data) / len(data)
    assert lv.nll / n_tokens < 0.01
    assert lv.bce < 0.01


def test_training_is_bit_identical_under_a_fixed_seed():
    data = toy_set(30)
    cfg = SftConfig(epochs=3, batch_size=8, seed=4)
    a, ca = train_sft(cfg, data, toy_policy(seed=1))
    b, cb = train_sft(cfg, data, toy_policy(seed=1))
    assert checkpoint.to_bytes(a) == checkpoint.to_bytes(b)
    assert ca == cb
    assert [row[0] for row in ca] == [1, 2, 3]


def test_training_does_not_mutate_the_initial_policy():
    pol = toy_policy(seed=1)
    before = pol.params.flat().copy()
    train_sft(SftConfig(epochs=1), toy_set(10), pol)
    np.testing.assert_array_equal(before, pol.params.flat())


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        train_sft(SftConfig(), [], toy_policy())


def test_divergence_aborts(monkeypatch):
    import qrewrite.sft as sft

    real = sft.weighted_logprob
    monkeypatch.setattr(sft, "weighted_logprob", lambda *a, **k: (math.nan, *real(*a, **k)[1:]))
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train_sft(SftConfig(epochs=2), toy_set(5), toy_policy())


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"epochs": 0}, {"lam": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SftConfig(**kw)


def test_epoch_hook_sees_every_epoch():
    seen = []
    train_sft(SftConfig(epochs=3), toy_set(8), toy_policy(), on_epoch=lambda e, p: seen.append(e))
    assert seen == [1, 2, 3]


# -- estimator -----------------------------------------------------------------------------


def test_estimator_follows_sklearn_conventions(world):
    est = MultiTaskRewriter(epochs=2, hidden_size=8, seed=1)
    assert clone(est).get_params() == est.get_params()
    data = world.bundle.sft[:40]
    est.fit(data)
    queries = [e.query for e in data[:5]]
    preds = est.predict(queries)
    assert len(preds) == 5 and all(isinstance(p, str) for p in preds)
    assert 0.0 <= est.score(data) <= 1.0
    assert set(est.predict_tags(queries, [e.rewrite for e in data[:5]])) <= {0, 1}


def test_single_task_estimator_is_untagged(world):
    est = MultiTaskRewriter(epochs=1, hidden_size=8, multitask=False).fit(world.bundle.single_task[:20])
    assert not est.policy_.tagged
    with pytest.raises(TypeError):
        MultiTaskRewriter(epochs=1).fit(world.bundle.single_task[:5])


def test_heavy_tag_weight_tags_at_least_as_well_as_none():
    from qrewrite.catalog import CatalogConfig, generate_catalog
    from qrewrite.datasets import DataConfig, build_datasets
    from qrewrite.evaluation import tagging_accuracy
    from qrewrite.search import OfflineSearchEngine

    acc = {0.0: [], 10.0: []}
    for seed in range(5):
        cat = generate_catalog(CatalogConfig(4, 3, 5, seed=seed))
        b = build_datasets(OfflineSearchEngine(cat), DataConfig(n_train_queries=150, n_eval_queries=40), seed)
        for lam in acc:
            est = MultiTaskRewriter(lam=lam, epochs=10, hidden_size=32, vocabulary=cat.vocabulary(), seed=seed)
            acc[lam].append(tagging_accuracy(est.fit(b.sft).policy_, b.tagging_eval))
    assert np.mean(acc[10.0]) >= np.mean(acc[0.0])
