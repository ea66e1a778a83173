"""Group-relative policy optimisation of the rewrite policy.

For each query the frozen old policy decodes a group of N candidates, the
reward engine scores them, and rewards are normalised inside the group. The
loss is the clipped sequence-level surrogate minus a KL penalty towards the
frozen reference (SFT) policy:

    L = -(1/N) sum_i [ min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) - beta KL_i ]
    rho_i = pi_theta(y_i|x) / pi_old(y_i|x)
    KL_i  = u_i - log u_i - 1,   u_i = pi_ref(y_i|x) / pi_theta(y_i|x)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .optim import make_optimizer
from .policy import RewriteOutput, RewritePolicy
from .policy.network import SKIP, backward, dlogits_from_coef, forward, position_logprobs
from .rewards import REWARD_KINDS, RewardBreakdown, RewardConfig, fusion_reward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RlConfig:
    beam_size: int = 10
    epsilon: float = 0.2
    beta: float = 0.4
    learning_rate: float = 0.05
    steps: int = 80
    batch_size: int = 16
    sigma_floor: float = 1e-8
    seed: int = 0
    reward_kind: str = "fusion"
    max_len: int = 16
    sampling: str = "beam"
    optimizer: str = "sgd"
    momentum: float = 0.0
    clip_norm: float | None = 5.0

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.beam_size < 2:
            raise ValueError("group size must be >= 2")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be > 0")
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.reward_kind!r}")
        if self.sampling not in ("beam", "sample"):
            raise ValueError("sampling must be 'beam' or 'sample'")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


# -- group statistics --------------------------------------------------------


def group_advantages(rewards, sigma_floor: float = 1e-8) -> np.ndarray:
    """(r - mean) / std with the population std; all zeros when std < sigma_floor."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least 2 rewards")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite reward in group")
    centred = r - r.mean()
    std = float(np.sqrt(np.mean(centred**2)))
    if std < sigma_floor:
        return np.zeros_like(r)
    return centred / std


def _finite(*values) -> None:
    if not all(math.isfinite(v) for v in values):
        raise FloatingPointError("non-finite sequence log-probability")


def probability_ratio(policy_new: RewritePolicy, policy_old: RewritePolicy, query: str, output_ids) -> float:
    new = policy_new.sequence_log_prob(query, output_ids)
    old = policy_old.sequence_log_prob(query, output_ids)
    _finite(new, old)
    return math.exp(new - old)


def kl_term(log_prob: float, ref_log_prob: float) -> float:
    """u - log u - 1 with u = exp(ref_log_prob - log_prob)."""
    log_u = ref_log_prob - log_prob
    u = math.exp(log_u)
    if not math.isfinite(u):
        raise FloatingPointError("non-finite reference ratio")
    return u - log_u - 1.0


def kl_estimate(policy: RewritePolicy, policy_ref: RewritePolicy, query: str, output_ids) -> float:
    lp = policy.sequence_log_prob(query, output_ids)
    ref = policy_ref.sequence_log_prob(query, output_ids)
    _finite(lp, ref)
    return kl_term(lp, ref)


# -- candidate groups --------------------------------------------------------


@dataclass
class CandidateGroup:
    query: str
    outputs: list[RewriteOutput]
    old_log_probs: np.ndarray
    ref_log_probs: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    breakdowns: list[RewardBreakdown] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        n = len(self.outputs)
        if n < 2:
            raise ValueError(f"group for {self.query!r} has fewer than 2 candidates")
        for arr in (self.old_log_probs, self.ref_log_probs, self.rewards, self.advantages):
            if len(arr) != n:
                raise ValueError("group arrays must all have one entry per candidate")

    @property
    def token_ids(self) -> list[list[int]]:
        return [list(o.token_ids) for o in self.outputs]


def decode_candidates(policy: RewritePolicy, query: str, config: RlConfig, rng=None) -> list[RewriteOutput]:
    if config.sampling == "sample":
        samples = policy.sample(query, config.beam_size, rng, config.max_len)
    else:
        samples = policy.beam_search(query, config.beam_size, config.max_len)
    return [policy.parse_output(s) for s in samples]


def make_group(
    policy_old: RewritePolicy,
    policy_ref: RewritePolicy,
    query: str,
    engine,
    reward_config: RewardConfig,
    config: RlConfig,
    rng=None,
) -> CandidateGroup:
    """Decode, score and normalise one query's candidate group under a frozen snapshot."""
    outputs = decode_candidates(policy_old, query, config, rng)
    try:
        breakdowns = [fusion_reward(query, o, engine, reward_config) for o in outputs]
    except Exception as exc:
        raise RuntimeError(f"reward computation failed for query {query!r}: {exc}") from exc
    rewards = np.array([b.value(config.reward_kind) for b in breakdowns])
    ids = [list(o.token_ids) for o in outputs]
    queries = [query] * len(ids)
    return CandidateGroup(
        query,
        outputs,
        policy_old.sequence_log_probs(queries, ids),
        policy_ref.sequence_log_probs(queries, ids),
        rewards,
        group_advantages(rewards, config.sigma_floor),
        breakdowns,
    )


# -- loss --------------------------------------------------------------------


@dataclass
class GrpoLoss:
    loss: float
    grads: object
    ratios: np.ndarray
    kls: np.ndarray
    clipped: np.ndarray


def surrogate_terms(ratios, advantages, epsilon: float):
    """(unclipped, clipped-min) surrogate per candidate."""
    ratios = np.asarray(ratios, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    unclipped = ratios * adv
    return unclipped, np.minimum(unclipped, np.clip(ratios, 1 - epsilon, 1 + epsilon) * adv)


def grpo_loss(policy: RewritePolicy, group: CandidateGroup, config: RlConfig, need_grad: bool = True) -> GrpoLoss:
    """Clipped surrogate with KL penalty for one group, and its gradient.

    ``group`` carries the old- and reference-policy log-probabilities of its
    candidates, so only the current policy is evaluated here.
    """
    ids = group.token_ids
    n = len(ids)
    b = policy.batch([group.query] * n, ids)
    cache = forward(policy.params, b.inputs, b.ctx_mask)
    lp, aux = position_logprobs(cache, b)
    seq = lp.sum(axis=1)
    if not np.all(np.isfinite(seq)):
        raise FloatingPointError(f"non-finite log-probability in group for {group.query!r}")
    ratios = np.exp(seq - group.old_log_probs)
    log_u = group.ref_log_probs - seq
    u = np.exp(log_u)
    kls = u - log_u - 1.0
    adv = group.advantages
    unclipped, surr = surrogate_terms(ratios, adv, config.epsilon)
    # the min picks the clipped constant only when clipping lowers the term
    clipped = surr < unclipped
    loss = -float(np.mean(surr - config.beta * kls))
    if not need_grad:
        return GrpoLoss(loss, None, ratios, kls, clipped)
    g = np.where(clipped, 0.0, ratios * adv)
    dseq = -(g - config.beta * (1.0 - u)) / n
    coef = np.where(b.modes != SKIP, dseq[:, None], 0.0)
    grads = backward(policy.params, cache, dlogits_from_coef(b, aux, coef))
    return GrpoLoss(loss, grads, ratios, kls, clipped)


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    mean_reward: float
    mean_kl: float
    clip_fraction: float
    malformed_fraction: float

    def line(self) -> str:
        return (
            f"{self.step}\t{self.mean_reward:.6f}\t{self.mean_kl:.6f}\t"
            f"{self.clip_fraction:.6f}\t{self.malformed_fraction:.6f}"
        )


DIAGNOSTICS_HEADER = "step\tmean_reward\tmean_kl\tclip_fraction\tmalformed_fraction"


def grpo_step(policy, policy_ref, queries, engine, reward_config, config: RlConfig, optimizer, step=0, rng=None):
    """One update: decode groups under a snapshot of ``policy``, average group losses, apply.

    ``policy`` is updated in place and returned with the step diagnostics.
    """
    snapshot = policy.with_params(policy.params.copy())
    groups = [make_group(snapshot, policy_ref, q, engine, reward_config, config, rng) for q in queries]
    total = policy.params.zeros_like()
    rewards, kls, clipped, malformed = [], [], [], []
    for grp in groups:
        res = grpo_loss(policy, grp, config)
        total.axpy(1.0 / len(groups), res.grads)
        rewards.extend(grp.rewards)
        kls.extend(res.kls)
        clipped.extend(res.clipped)
        malformed.extend(not o.well_formed for o in grp.outputs)
    if not total.is_finite():
        raise FloatingPointError(f"non-finite GRPO gradient at step {step}")
    optimizer.step(policy.params, total)
    diag = StepDiagnostics(step, float(np.mean(rewards)), float(np.mean(kls)),
                           float(np.mean(clipped)), float(np.mean(malformed)))
    return policy, diag


def rl_queries(records, engine) -> list[str]:
    """Distinct RL queries that retrieve something (the increment reward needs a non-empty recall set)."""
    return sorted({r.query for r in records if engine.retrieve(r.query).items})


def train_grpo(config: RlConfig, records, policy_sft: RewritePolicy, engine, reward_config=None, on_step=None):
    """Returns (aligned policy, list of StepDiagnostics). ``policy_sft`` is the frozen reference."""
    reward_config = reward_config or RewardConfig()
    queries = rl_queries(records, engine)
    if not queries:
        raise ValueError("no usable RL queries")
    for q in queries:
        engine.clicks(q)
    policy_ref = policy_sft.with_params(policy_sft.params.copy())
    policy = policy_sft.with_params(policy_sft.params.copy())
    opt = make_optimizer(config.optimizer, config.learning_rate, config.momentum, config.clip_norm)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(queries))
    cursor = 0
    history = []
    for step in range(1, config.steps + 1):
        batch = []
        while len(batch) < min(config.batch_size, len(queries)):
            if cursor == len(order):
                order, cursor = rng.permutation(len(queries)), 0
            batch.append(queries[order[cursor]])
            cursor += 1
        policy, diag = grpo_step(policy, policy_ref, batch, engine, reward_config, config, opt, step, rng)
        history.append(diag)
        log.debug(diag.line())
        if on_step is not None:
            on_step(step, policy, diag)
    return policy, history


class GRPOAligner(BaseEstimator):
    """Aligns a trained rewrite policy with GRPO against a search engine.

    ``fit(records, policy=..., engine=...)`` takes RL records (query plus
    clicks); the starting policy doubles as the frozen reference.
    """

    def __init__(
        self,
        beam_size=10,
        epsilon=0.2,
        beta=0.4,
        learning_rate=0.05,
        steps=80,
        batch_size=16,
        sigma_floor=1e-8,
        reward_kind="fusion",
        max_len=16,
        sampling="beam",
        optimizer="sgd",
        momentum=0.0,
        clip_norm=5.0,
        alpha=1.0,
        tau_relev=0.2,
        m=4,
        seed=0,
    ):
        self.beam_size = beam_size
        self.epsilon = epsilon
        self.beta = beta
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.sigma_floor = sigma_floor
        self.reward_kind = reward_kind
        self.max_len = max_len
        self.sampling = sampling
        self.optimizer = optimizer
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.alpha = alpha
        self.tau_relev = tau_relev
        self.m = m
        self.seed = seed

    def rl_config(self) -> RlConfig:
        return RlConfig(
            beam_size=self.beam_size, epsilon=self.epsilon, beta=self.beta,
            learning_rate=self.learning_rate, steps=self.steps, batch_size=self.batch_size,
            sigma_floor=self.sigma_floor, seed=self.seed, reward_kind=self.reward_kind,
            max_len=self.max_len, sampling=self.sampling, optimizer=self.optimizer,
            momentum=self.momentum, clip_norm=self.clip_norm,
        )

    def reward_config(self) -> RewardConfig:
        return RewardConfig(alpha=self.alpha, tau_relev=self.tau_relev, m=self.m)

    def fit(self, X, y=None, *, policy: RewritePolicy, engine, on_step=None):
        self.policy_, self.history_ = train_grpo(
            self.rl_config(), list(X), policy, engine, self.reward_config(), on_step
        )
        return self

    def generate(self, queries, beam_size=None):
        check_is_fitted(self, "policy_")
        return [self.policy_.generate(q, beam_size or self.beam_size, self.max_len) for q in queries]

    def predict(self, queries):
        return [next((c.rewrite for c in cands if c.well_formed), q) for q, cands in zip(queries, self.generate(queries))]
