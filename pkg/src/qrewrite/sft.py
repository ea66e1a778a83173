"""Supervised training of the rewrite policy: multi-task (rewrite + relevance tag)
and single-task (rewrite only) objectives, and a scikit-learn style estimator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datasets import QueryRewritePair, TaggedExample
from .optim import make_optimizer
from .policy import RewritePolicy, Vocab
from .policy.network import FULL, SKIP, TAG, weighted_logprob

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossValue:
    loss: float
    nll: float
    bce: float
    grads: object = field(default=None, repr=False)


def _check_rewrites(policy: RewritePolicy, items) -> None:
    for it in items:
        if not policy.rewrite_ids(it.rewrite):
            raise ValueError(f"zero-length rewrite for query {it.query!r}")


def multi_task_loss(policy: RewritePolicy, batch, lam: float = 1.0, need_grad: bool = True) -> LossValue:
    """Mean over the batch of rewrite NLL (tokens through ``<|sep|>``) plus ``lam`` times tag BCE.

    The tag term uses the renormalised tag distribution at the position
    after ``<|sep|>``; the tag token itself is not part of the NLL.
    """
    if not batch:
        raise ValueError("empty batch")
    _check_rewrites(policy, batch)
    v = policy.vocab
    outputs, modes = [], []
    for ex in batch:
        r = policy.rewrite_ids(ex.rewrite)
        outputs.append(r + [v.sep, v.tag1 if ex.tag == 1 else v.tag0, v.eos])
        modes.append([FULL] * (len(r) + 1) + [TAG, SKIP])
    return _loss(policy, [ex.query for ex in batch], outputs, modes, lam, need_grad)


def single_task_loss(policy: RewritePolicy, batch, need_grad: bool = True) -> LossValue:
    """Rewrite NLL only; targets carry no tag token."""
    if not batch:
        raise ValueError("empty batch")
    _check_rewrites(policy, batch)
    v = policy.vocab
    outputs, modes = [], []
    for ex in batch:
        r = policy.rewrite_ids(ex.rewrite)
        outputs.append(r + [v.sep, v.eos])
        modes.append([FULL] * (len(r) + 1) + [SKIP])
    return _loss(policy, [ex.query for ex in batch], outputs, modes, 0.0, need_grad)


def _loss(policy, queries, outputs, modes, lam, need_grad) -> LossValue:
    b = policy.batch(queries, outputs, modes)
    n = len(outputs)
    coef = np.where(b.modes == FULL, -1.0 / n, np.where(b.modes == TAG, -lam / n, 0.0))
    value, lp, grads = weighted_logprob(policy.params, b, coef, need_grad)
    nll = -math.fsum(lp[b.modes == FULL].tolist()) / n
    bce = -math.fsum(lp[b.modes == TAG].tolist()) / n
    return LossValue(value, nll, bce, grads)


@dataclass(frozen=True)
class SftConfig:
    lam: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    optimizer: str = "sgd"
    clip_norm: float | None = 5.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def train_sft(config: SftConfig, dataset, policy: RewritePolicy, multitask: bool = True, on_epoch=None):
    """Mini-batch training; returns (trained policy, per-epoch log rows).

    Each log row is ``(epoch, loss, bce, nll)`` averaged over the epoch's
    mini-batches. ``on_epoch(epoch, policy)`` is called after every epoch
    (checkpointing hook). Deterministic given ``config.seed``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    policy = policy.with_params(policy.params.copy())
    opt = make_optimizer(config.optimizer, config.learning_rate, config.momentum, config.clip_norm)
    rng = np.random.default_rng(config.seed)
    data = list(dataset)
    curve = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        tot = np.zeros(3)
        n_batches = 0
        for start in range(0, len(data), config.batch_size):
            chunk = [data[i] for i in order[start : start + config.batch_size]]
            if multitask:
                lv = multi_task_loss(policy, chunk, config.lam)
            else:
                lv = single_task_loss(policy, chunk)
            if not math.isfinite(lv.loss) or not lv.grads.is_finite():
                raise TrainingDiverged(f"loss diverged at epoch {epoch} (loss={lv.loss})")
            opt.step(policy.params, lv.grads)
            tot += (lv.loss, lv.bce, lv.nll)
            n_batches += 1
        row = (epoch, *(tot / n_batches))
        curve.append(row)
        log.debug("epoch %d loss %.4f bce %.4f nll %.4f", *row)
        if on_epoch is not None:
            on_epoch(epoch, policy)
    return policy, curve


class MultiTaskRewriter(BaseEstimator):
    """Rewrite policy trained on (query, rewrite, tag) examples.

    With ``multitask=False`` the tag is ignored and the model only learns to
    generate rewrites; its outputs then close at ``<|sep|>`` and carry no tag.
    """

    def __init__(
        self,
        lam=1.0,
        multitask=True,
        hidden_size=64,
        learning_rate=0.05,
        momentum=0.9,
        optimizer="sgd",
        epochs=30,
        batch_size=64,
        clip_norm=5.0,
        init_scale=0.5,
        vocabulary=None,
        beam_size=10,
        max_len=32,
        seed=0,
    ):
        self.lam = lam
        self.multitask = multitask
        self.hidden_size = hidden_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.optimizer = optimizer
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.init_scale = init_scale
        self.vocabulary = vocabulary
        self.beam_size = beam_size
        self.max_len = max_len
        self.seed = seed

    def _sft_config(self) -> SftConfig:
        return SftConfig(
            lam=self.lam if self.multitask else 0.0,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            momentum=self.momentum,
            optimizer=self.optimizer,
            clip_norm=self.clip_norm,
        )

    def fit(self, X, y=None, on_epoch=None):
        X = list(X)
        if not X:
            raise ValueError("cannot fit on an empty dataset")
        if self.multitask and not all(isinstance(x, TaggedExample) for x in X):
            raise TypeError("multi-task training needs TaggedExample records")
        words = self.vocabulary
        if words is None:
            words = {tok for x in X for tok in (x.query + " " + x.rewrite).split()}
        vocab = Vocab.build(words)
        init = RewritePolicy.create(vocab, self.hidden_size, self.seed, self.multitask, self.init_scale)
        self.policy_, self.loss_curve_ = train_sft(self._sft_config(), X, init, self.multitask, on_epoch)
        return self

    def generate(self, queries, beam_size=None, max_len=None):
        check_is_fitted(self, "policy_")
        n = beam_size or self.beam_size
        return [self.policy_.generate(q, n, max_len or self.max_len) for q in queries]

    def predict(self, queries):
        """Highest-scoring well-formed rewrite per query (the query itself if none)."""
        out = []
        for q, cands in zip(queries, self.generate(queries)):
            best = next((c.rewrite for c in cands if c.well_formed), q)
            out.append(best)
        return out

    def predict_tags(self, queries, rewrites):
        check_is_fitted(self, "policy_")
        p = self.policy_.tag_probabilities(list(queries), [self.policy_.rewrite_ids(r) for r in rewrites])
        return (p[:, 1] > p[:, 0]).astype(int)

    def score(self, X, y=None):
        """Tagging accuracy on records with ``query``, ``rewrite`` and ``tag``."""
        X = list(X)
        tags = self.predict_tags([x.query for x in X], [x.rewrite for x in X])
        return float(np.mean(tags == np.array([x.tag for x in X])))
