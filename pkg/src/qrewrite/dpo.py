"""Direct preference optimisation baseline.

Pairs come from the SFT policy's own beam candidates ranked by the fusion
reward: the best candidate is preferred over two seeded picks from the five
worst. The objective is the usual

    -log sigmoid(beta * [(lp(y+) - lp_ref(y+)) - (lp(y-) - lp_ref(y-))])
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .optim import make_optimizer
from .policy import RewriteOutput, RewritePolicy
from .policy.network import SKIP, backward, dlogits_from_coef, forward, position_logprobs
from .rewards import RewardConfig, fusion_reward
from .sft import TrainingDiverged


@dataclass(frozen=True)
class DpoPair:
    query: str
    positive: RewriteOutput
    negative: RewriteOutput
    positive_reward: float
    negative_reward: float

    def __post_init__(self) -> None:
        if self.positive_reward < self.negative_reward:
            raise ValueError("positive reward must be >= negative reward")


@dataclass
class DpoLoss:
    loss: float
    margin: float
    grads: object = None


def build_dpo_pairs(policy, records, engine, reward_config=None, seed=0, n_candidates=10, n_negatives=2,
                    bottom=5, max_len=16):
    """Returns (pairs, skipped) where skipped counts queries without enough candidates or signal."""
    reward_config = reward_config or RewardConfig()
    rng = np.random.default_rng(seed)
    pairs, skipped = [], 0
    for query in sorted({r.query for r in records}):
        outputs = [policy.parse_output(s) for s in policy.beam_search(query, n_candidates, max_len)]
        if len(outputs) < n_candidates:
            skipped += 1
            continue
        rewards = np.array([fusion_reward(query, o, engine, reward_config).r_fusion for o in outputs])
        if np.all(rewards == rewards[0]):
            skipped += 1
            continue
        # stable sort keeps beam order among equal rewards
        ranked = np.argsort(-rewards, kind="stable")
        best = int(ranked[0])
        worst = ranked[-bottom:]
        for j in rng.choice(worst, size=n_negatives, replace=False):
            j = int(j)
            pairs.append(DpoPair(query, outputs[best], outputs[j], float(rewards[best]), float(rewards[j])))
    return pairs, skipped


def _seq_logps(policy: RewritePolicy, queries, ids, need_cache=False):
    b = policy.batch(queries, ids)
    cache = forward(policy.params, b.inputs, b.ctx_mask)
    lp, aux = position_logprobs(cache, b)
    seq = lp.sum(axis=1)
    if not np.all(np.isfinite(seq)):
        raise FloatingPointError("non-finite sequence log-probability")
    return (seq, b, cache, aux) if need_cache else seq


def dpo_loss(policy: RewritePolicy, policy_ref: RewritePolicy, pairs, beta: float = 0.1, need_grad=True) -> DpoLoss:
    """Mean preference loss over ``pairs`` and the mean implicit-reward margin ``z``."""
    if not pairs:
        raise ValueError("empty batch")
    n = len(pairs)
    queries = [p.query for p in pairs] * 2
    ids = [list(p.positive.token_ids) for p in pairs] + [list(p.negative.token_ids) for p in pairs]
    seq, b, cache, aux = _seq_logps(policy, queries, ids, need_cache=True)
    ref = _seq_logps(policy_ref, queries, ids)
    diff = seq - ref
    z = beta * (diff[:n] - diff[n:])
    # -log sigmoid(z) = log(1 + exp(-z))
    loss = float(np.mean(np.logaddexp(0.0, -z)))
    if not need_grad:
        return DpoLoss(loss, float(np.mean(z)))
    dz = -1.0 / (1.0 + np.exp(z)) / n
    dseq = np.concatenate([beta * dz, -beta * dz])
    coef = np.where(b.modes != SKIP, dseq[:, None], 0.0)
    grads = backward(policy.params, cache, dlogits_from_coef(b, aux, coef))
    return DpoLoss(loss, float(np.mean(z)), grads)


def train_dpo(pairs, policy_sft: RewritePolicy, beta=0.1, learning_rate=0.05, epochs=5, batch_size=32, seed=0,
              optimizer="sgd", momentum=0.0, clip_norm=5.0):
    """Returns (policy, per-epoch mean losses). The starting policy is the frozen reference."""
    if not pairs:
        raise ValueError("no preference pairs")
    ref = policy_sft.with_params(policy_sft.params.copy())
    policy = policy_sft.with_params(policy_sft.params.copy())
    opt = make_optimizer(optimizer, learning_rate, momentum, clip_norm)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), batch_size):
            chunk = [pairs[i] for i in order[start : start + batch_size]]
            lv = dpo_loss(policy, ref, chunk, beta)
            if not math.isfinite(lv.loss) or not lv.grads.is_finite():
                raise TrainingDiverged(f"DPO diverged at epoch {epoch}")
            opt.step(policy.params, lv.grads)
            losses.append(lv.loss)
        curve.append((epoch, float(np.mean(losses))))
    return policy, curve


class DPOAligner(BaseEstimator):
    """Preference-optimises a trained rewrite policy on self-generated pairs."""

    def __init__(self, beta=0.1, learning_rate=0.05, epochs=5, batch_size=32, n_candidates=10, n_negatives=2,
                 bottom=5, max_len=16, optimizer="sgd", momentum=0.0, clip_norm=5.0, alpha=1.0, tau_relev=0.2,
                 m=4, seed=0):
        self.beta = beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.n_candidates = n_candidates
        self.n_negatives = n_negatives
        self.bottom = bottom
        self.max_len = max_len
        self.optimizer = optimizer
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.alpha = alpha
        self.tau_relev = tau_relev
        self.m = m
        self.seed = seed

    def fit(self, X, y=None, *, policy: RewritePolicy, engine):
        rc = RewardConfig(alpha=self.alpha, tau_relev=self.tau_relev, m=self.m)
        self.pairs_, self.skipped_ = build_dpo_pairs(
            policy, list(X), engine, rc, self.seed, self.n_candidates, self.n_negatives, self.bottom, self.max_len
        )
        self.policy_, self.loss_curve_ = train_dpo(
            self.pairs_, policy, self.beta, self.learning_rate, self.epochs, self.batch_size, self.seed,
            self.optimizer, self.momentum, self.clip_norm,
        )
        return self

    def predict(self, queries):
        check_is_fitted(self, "policy_")
        out = []
        for q in queries:
            cands = self.policy_.generate(q, self.n_candidates, self.max_len)
            out.append(next((c.rewrite for c in cands if c.well_formed), q))
        return out
