"""Single-layer tanh recurrent network with an exact backward pass.

The recurrence is conditioned on a context vector, the mean embedding of the
query tokens, fed to every step::

    h_t = tanh(E[x_t] W_in + h_{t-1} W_rec + c W_ctx + b)
    logits_t = h_t W_out + b_out

Everything here is vocabulary-agnostic. Losses are expressed as weighted
sums of per-position log-probabilities so that one backward routine serves
every objective in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

PARAM_NAMES = ("embed", "w_in", "w_rec", "w_ctx", "b_rec", "w_out", "b_out")

# per-position scoring modes
SKIP, FULL, TAG = 0, 1, 2


@dataclass
class RNNParams:
    embed: np.ndarray  # (V, d)
    w_in: np.ndarray  # (d, d)
    w_rec: np.ndarray  # (d, d)
    w_ctx: np.ndarray  # (d, d)
    b_rec: np.ndarray  # (d,)
    w_out: np.ndarray  # (d, V)
    b_out: np.ndarray  # (V,)

    @classmethod
    def zeros(cls, vocab_size: int, hidden: int) -> "RNNParams":
        d = hidden
        return cls(
            np.zeros((vocab_size, d)), np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)),
            np.zeros(d), np.zeros((d, vocab_size)), np.zeros(vocab_size),
        )

    @classmethod
    def init(cls, vocab_size: int, hidden: int, rng: np.random.Generator, scale: float = 1.0) -> "RNNParams":
        d = hidden
        s = scale / np.sqrt(d)
        return cls(
            rng.normal(0.0, scale, (vocab_size, d)),
            rng.normal(0.0, s, (d, d)),
            rng.normal(0.0, s, (d, d)),
            rng.normal(0.0, s, (d, d)),
            np.zeros(d),
            rng.normal(0.0, s, (d, vocab_size)),
            np.zeros(vocab_size),
        )

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden(self) -> int:
        return self.embed.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "RNNParams":
        return RNNParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "RNNParams":
        return RNNParams(*(np.zeros_like(a) for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "RNNParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return RNNParams(*out)

    def axpy(self, alpha: float, other: "RNNParams") -> None:
        """In place ``self += alpha * other``."""
        for a, g in zip(self.arrays(), other.arrays()):
            a += alpha * g

    def scaled(self, alpha: float) -> "RNNParams":
        return RNNParams(*(alpha * a for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def max_abs_diff(self, other: "RNNParams") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays(), other.arrays()))


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def context(params: RNNParams, inputs: np.ndarray, ctx_mask: np.ndarray) -> np.ndarray:
    """Mean embedding of the masked positions of each row; zeros for an empty mask."""
    counts = np.maximum(ctx_mask.sum(axis=1, keepdims=True), 1)
    return np.einsum("bt,btd->bd", ctx_mask, params.embed[inputs]) / counts


def step(params: RNNParams, h_prev: np.ndarray, ctx: np.ndarray, token_ids: np.ndarray):
    """One recurrence step for a batch. Returns (new hidden, logits)."""
    h = np.tanh(params.embed[token_ids] @ params.w_in + h_prev @ params.w_rec + ctx @ params.w_ctx + params.b_rec)
    return h, h @ params.w_out + params.b_out


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (B, T)
    ctx_mask: np.ndarray  # (B, T)
    ctx: np.ndarray  # (B, d)
    hidden: np.ndarray  # (B, T, d)
    logits: np.ndarray  # (B, T, V)


def forward(params: RNNParams, inputs: np.ndarray, ctx_mask: np.ndarray | None = None) -> ForwardCache:
    inputs = np.asarray(inputs, dtype=np.int64)
    if inputs.size and (inputs.min() < 0 or inputs.max() >= params.vocab_size):
        raise ValueError("token id outside vocabulary")
    bsz, T = inputs.shape
    if ctx_mask is None:
        ctx_mask = np.zeros((bsz, T))
    ctx_mask = np.asarray(ctx_mask, dtype=np.float64)
    ctx = context(params, inputs, ctx_mask)
    hs = np.empty((bsz, T, params.hidden))
    h = np.zeros((bsz, params.hidden))
    x = params.embed[inputs] @ params.w_in + (ctx @ params.w_ctx + params.b_rec)[:, None, :]
    for t in range(T):
        h = np.tanh(x[:, t] + h @ params.w_rec)
        hs[:, t] = h
    logits = hs @ params.w_out + params.b_out
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite values in forward pass")
    return ForwardCache(inputs, ctx_mask, ctx, hs, logits)


@dataclass
class ScoredBatch:
    """Token targets with a scoring mode per position.

    ``FULL`` positions score ``log softmax(logits)[target]``; ``TAG`` positions
    score the target among the two tag ids only, renormalised; ``SKIP``
    positions contribute nothing. ``ctx_mask`` marks the input positions
    averaged into the context vector.
    """

    inputs: np.ndarray  # (B, T) int
    targets: np.ndarray  # (B, T) int
    modes: np.ndarray  # (B, T) int
    ctx_mask: np.ndarray | None = None
    tag_ids: tuple[int, int] = (4, 5)


def position_logprobs(cache: ForwardCache, batch: ScoredBatch) -> tuple[np.ndarray, dict]:
    """Per-position log-probabilities (B, T) plus what the backward pass needs."""
    logp = log_softmax(cache.logits)
    tgt = batch.targets
    full = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    t0, t1 = batch.tag_ids
    tag_logp = log_softmax(cache.logits[..., [t0, t1]])
    which = (tgt == t1).astype(np.int64)
    tag = np.take_along_axis(tag_logp, which[..., None], axis=-1)[..., 0]
    out = np.where(batch.modes == FULL, full, np.where(batch.modes == TAG, tag, 0.0))
    return out, {"logp": logp, "tag_logp": tag_logp, "which": which}


def dlogits_from_coef(batch: ScoredBatch, aux: dict, coef: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(coef * position_logprobs)`` with respect to the logits."""
    full_w = np.where(batch.modes == FULL, coef, 0.0)
    d = -np.exp(aux["logp"]) * full_w[..., None]
    tgt = batch.targets[..., None]
    np.put_along_axis(d, tgt, np.take_along_axis(d, tgt, axis=-1) + full_w[..., None], axis=-1)
    tag_w = np.where(batch.modes == TAG, coef, 0.0)
    if np.any(tag_w):
        q = np.exp(aux["tag_logp"])
        onehot = np.stack([1 - aux["which"], aux["which"]], axis=-1)
        g = (onehot - q) * tag_w[..., None]
        t0, t1 = batch.tag_ids
        d[..., t0] += g[..., 0]
        d[..., t1] += g[..., 1]
    return d


def backward(params: RNNParams, cache: ForwardCache, dlogits: np.ndarray) -> RNNParams:
    """Exact gradient of a scalar loss given its gradient with respect to every logit."""
    grads = params.zeros_like()
    hs = cache.hidden
    bsz, T, d = hs.shape
    grads.w_out = np.einsum("btd,btv->dv", hs, dlogits)
    grads.b_out = dlogits.sum(axis=(0, 1))
    dh_all = dlogits @ params.w_out.T
    dpre = np.empty_like(hs)
    dh_next = np.zeros((bsz, d))
    for t in range(T - 1, -1, -1):
        da = (dh_all[:, t] + dh_next) * (1.0 - hs[:, t] ** 2)
        dpre[:, t] = da
        dh_next = da @ params.w_rec.T
    emb = params.embed[cache.inputs]
    grads.w_in = np.einsum("btd,bte->de", emb, dpre)
    grads.b_rec = dpre.sum(axis=(0, 1))
    h_prev = np.concatenate([np.zeros((bsz, 1, d)), hs[:, :-1]], axis=1)
    grads.w_rec = np.einsum("btd,bte->de", h_prev, dpre)
    dctx_pre = dpre.sum(axis=1)  # (B, d)
    grads.w_ctx = cache.ctx.T @ dctx_pre
    demb = dpre @ params.w_in.T
    counts = np.maximum(cache.ctx_mask.sum(axis=1, keepdims=True), 1)
    dctx = (dctx_pre @ params.w_ctx.T) / counts  # (B, d)
    demb += cache.ctx_mask[..., None] * dctx[:, None, :]
    np.add.at(grads.embed, cache.inputs.ravel(), demb.reshape(-1, d))
    return grads


def weighted_logprob(params: RNNParams, batch: ScoredBatch, coef: np.ndarray, need_grad: bool = True):
    """Value and gradient of ``sum(coef * position_logprobs)``."""
    cache = forward(params, batch.inputs, batch.ctx_mask)
    lp, aux = position_logprobs(cache, batch)
    active = coef != 0
    # exactly rounded, so the value does not depend on padding width
    value = math.fsum((coef[active] * lp[active]).tolist())
    if not need_grad:
        return value, lp, None
    grads = backward(params, cache, dlogits_from_coef(batch, aux, coef))
    return value, lp, grads
