"""The rewrite policy: vocabulary, recurrent network, and the output grammar.

Serialized outputs follow the training template ``rewrite <|sep|> tag``. The
tag is drawn from the two tag tokens renormalised against each other, and the
sequence closes after the tag (``EOS`` is implied there). A model trained
without tags (``tagged=False``) closes its output at ``<|sep|>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..catalog import tokenize
from . import network
from .decoding import Hypothesis, beam_search, greedy_decode, sample_decode
from .network import FULL, SKIP, TAG, RNNParams, ScoredBatch
from .vocab import Vocab


class GrammarError(ValueError):
    """Raised when a token sequence cannot be produced under the output grammar."""


@dataclass(frozen=True)
class SequenceSample:
    token_ids: tuple[int, ...]
    log_prob: float
    source: str = "beam"
    truncated: bool = False


@dataclass(frozen=True)
class RewriteOutput:
    rewrite: str
    tag: int | None
    well_formed: bool
    log_prob: float
    token_ids: tuple[int, ...] = ()


class RewritePolicy:
    def __init__(self, vocab: Vocab, params: RNNParams, tagged: bool = True):
        if params.vocab_size != len(vocab):
            raise ValueError("parameter shapes do not match the vocabulary")
        self.vocab = vocab
        self.params = params
        self.tagged = tagged

    @classmethod
    def create(cls, vocab: Vocab, hidden: int = 32, seed: int | None = 0, tagged: bool = True, scale: float = 0.5):
        """Randomly initialised policy; ``seed=None`` gives all-zero parameters."""
        if seed is None:
            params = RNNParams.zeros(len(vocab), hidden)
        else:
            params = RNNParams.init(len(vocab), hidden, np.random.default_rng(seed), scale)
        return cls(vocab, params, tagged)

    def with_params(self, params: RNNParams) -> "RewritePolicy":
        return RewritePolicy(self.vocab, params, self.tagged)

    # -- encoding --------------------------------------------------------
    def prompt_ids(self, query: str) -> list[int]:
        v = self.vocab
        return [v.bos] + v.encode(tokenize(query)) + [v.go]

    def rewrite_ids(self, rewrite: str) -> list[int]:
        return self.vocab.encode(tokenize(rewrite))

    def serialize(self, rewrite: str, tag: int | None = None) -> list[int]:
        """Output ids for ``rewrite`` (and ``tag`` on tagged models), EOS-terminated."""
        v = self.vocab
        ids = self.rewrite_ids(rewrite) + [v.sep]
        if self.tagged:
            if tag not in (0, 1):
                raise ValueError("tagged policies need a tag in {0, 1}")
            ids.append(v.tag1 if tag == 1 else v.tag0)
        return ids + [v.eos]

    @property
    def closers(self) -> frozenset[int]:
        v = self.vocab
        return frozenset((v.tag0, v.tag1)) if self.tagged else frozenset((v.sep,))

    def output_modes(self, output_ids) -> list[int]:
        """Scoring mode of each output token under the output grammar."""
        v = self.vocab
        modes, prev = [], None
        for tok in output_ids:
            if prev in self.closers:
                if tok != v.eos:
                    raise GrammarError("tokens after a closing token")
                modes.append(SKIP)
            elif self.tagged and prev == v.sep and tok != v.eos:
                if tok not in (v.tag0, v.tag1):
                    raise GrammarError("only a tag may follow the separator")
                modes.append(TAG)
            else:
                modes.append(FULL)
            prev = tok
        return modes

    def batch(self, queries, outputs, modes=None) -> ScoredBatch:
        """Teacher-forced batch. ``modes`` overrides the grammar-derived scoring modes."""
        rows = []
        for i, (q, out) in enumerate(zip(queries, outputs)):
            prompt = self.prompt_ids(q)
            m = self.output_modes(out) if modes is None else list(modes[i])
            full = prompt + list(out)
            rows.append((full[:-1], full[1:], [SKIP] * (len(prompt) - 1) + m))
        T = max(len(r[0]) for r in rows)
        n = len(rows)
        inputs = np.full((n, T), self.vocab.pad, dtype=np.int64)
        targets = np.full((n, T), self.vocab.pad, dtype=np.int64)
        mode_arr = np.zeros((n, T), dtype=np.int64)
        ctx_mask = np.zeros((n, T))
        for i, (x, y, m) in enumerate(rows):
            inputs[i, : len(x)] = x
            targets[i, : len(y)] = y
            mode_arr[i, : len(m)] = m
            ctx_mask[i] = self._ctx_mask(inputs[i])
        return ScoredBatch(inputs, targets, mode_arr, ctx_mask, (self.vocab.tag0, self.vocab.tag1))

    def _ctx_mask(self, ids) -> np.ndarray:
        """Query positions of a BOS-prefixed id row: everything between BOS and the first GO."""
        ids = list(ids)
        mask = np.zeros(len(ids))
        end = ids.index(self.vocab.go) if self.vocab.go in ids else len(ids)
        mask[1:end] = 1.0
        return mask

    # -- scoring -----------------------------------------------------------
    def next_token_distribution(self, context_ids) -> np.ndarray:
        ctx = np.asarray(context_ids, dtype=np.int64)[None, :]
        if ctx.shape[1] == 0 or ctx[0, 0] != self.vocab.bos:
            raise ValueError("context must start with BOS")
        cache = network.forward(self.params, ctx, self._ctx_mask(ctx[0])[None, :])
        return np.exp(network.log_softmax(cache.logits[0, -1]))

    def sequence_log_probs(self, queries, outputs) -> np.ndarray:
        for out in outputs:
            if not out or out[-1] != self.vocab.eos:
                raise ValueError("output sequence must terminate with EOS")
        b = self.batch(queries, outputs)
        cache = network.forward(self.params, b.inputs, b.ctx_mask)
        lp, _ = network.position_logprobs(cache, b)
        return lp.sum(axis=1)

    def sequence_log_prob(self, query: str, output_ids) -> float:
        return float(self.sequence_log_probs([query], [list(output_ids)])[0])

    def tag_probability(self, query: str, rewrite_ids) -> tuple[float, float]:
        return tuple(self.tag_probabilities([query], [list(rewrite_ids)])[0])

    def tag_probabilities(self, queries, rewrite_id_lists) -> np.ndarray:
        """(n, 2) array of renormalised (p0, p1) at the position after ``<|sep|>``."""
        v = self.vocab
        # a placeholder tag keeps <|sep|> inside the teacher-forced inputs
        outs = [list(r) + [v.sep, v.tag0] for r in rewrite_id_lists]
        b = self.batch(queries, outs, modes=[[SKIP] * len(o) for o in outs])
        cache = network.forward(self.params, b.inputs, b.ctx_mask)
        last = np.array([len(self.prompt_ids(q)) + len(r) for q, r in zip(queries, rewrite_id_lists)])
        z = cache.logits[np.arange(len(outs)), last][:, [v.tag0, v.tag1]]
        return np.exp(network.log_softmax(z))

    # -- decoding --------------------------------------------------------
    def _encode_prompt(self, query: str) -> np.ndarray:
        """Decoder state after the prompt: hidden vector and context vector, concatenated."""
        ids = np.asarray(self.prompt_ids(query), dtype=np.int64)[None, :]
        cache = network.forward(self.params, ids, self._ctx_mask(ids[0])[None, :])
        return np.concatenate([cache.hidden[0, -1], cache.ctx[0]])

    def _logits(self, states):
        return states[:, : self.params.hidden] @ self.params.w_out + self.params.b_out

    def _next_logp(self, states, prefixes):
        v = self.vocab
        lp = network.log_softmax(self._logits(states))
        for i, p in enumerate(prefixes):
            last = p[-1] if p else None
            if last in self.closers:
                lp[i] = -np.inf
                lp[i, v.eos] = 0.0
            elif self.tagged and last == v.sep:
                tags = network.log_softmax(lp[i, [v.tag0, v.tag1]])
                lp[i] = -np.inf
                lp[i, v.tag0], lp[i, v.tag1] = tags
        return lp

    def _advance(self, states, tokens):
        d = self.params.hidden
        h, _ = network.step(self.params, states[:, :d], states[:, d:], tokens)
        return np.concatenate([h, states[:, d:]], axis=1)

    def _force_eos(self, states, prefixes):
        raw = network.log_softmax(self._logits(states))[:, self.vocab.eos]
        closed = np.array([bool(p) and p[-1] in self.closers for p in prefixes])
        return np.where(closed, 0.0, raw), ~closed

    def beam_search(self, query: str, beam_size: int = 10, max_len: int = 32) -> list[SequenceSample]:
        hyps = beam_search(
            self._next_logp, self._advance, self._encode_prompt(query),
            beam_size, max_len, self.vocab.eos, self._force_eos,
        )
        return [_to_sample(h, "beam") for h in hyps]

    def greedy(self, query: str, max_len: int = 32) -> SequenceSample:
        h = greedy_decode(
            self._next_logp, self._advance, self._encode_prompt(query), max_len, self.vocab.eos, self._force_eos
        )
        return _to_sample(h, "greedy")

    def sample(self, query: str, n: int, rng, max_len: int = 32) -> list[SequenceSample]:
        hyps = sample_decode(
            self._next_logp, self._advance, self._encode_prompt(query),
            n, max_len, self.vocab.eos, rng, self._force_eos,
        )
        return [_to_sample(h, "sample") for h in hyps]

    def generate(self, query: str, beam_size: int = 10, max_len: int = 32) -> list[RewriteOutput]:
        return [self.parse_output(s) for s in self.beam_search(query, beam_size, max_len)]

    def parse_output(self, sample) -> RewriteOutput:
        return parse_output(sample, self.vocab, self.tagged)


def _to_sample(h: Hypothesis, source: str) -> SequenceSample:
    return SequenceSample(h.tokens, h.log_prob, source, h.truncated)


def parse_output(sample, vocab: Vocab, tagged: bool = True) -> RewriteOutput:
    """Split a decoded sequence into rewrite text and tag. Never raises.

    Well-formed means: a non-empty run of word tokens, exactly one
    ``<|sep|>``, then (tagged models) exactly one tag token, then ``EOS``, and
    the sequence was not force-terminated.
    """
    if isinstance(sample, SequenceSample):
        ids, log_prob, truncated = list(sample.token_ids), sample.log_prob, sample.truncated
    else:
        ids, log_prob, truncated = list(sample), 0.0, False
    if ids and ids[0] == vocab.bos:
        ids = ids[1:]
    words = set(vocab.word_ids)
    n_sep = ids.count(vocab.sep)
    cut = ids.index(vocab.sep) if n_sep else len(ids)
    body = [t for t in ids[:cut] if t != vocab.eos]
    rewrite = " ".join(vocab.tokens[t] for t in body if t in words)
    tail = ids[cut + 1 :] if n_sep else []
    tag = None
    if tail and tail[0] in (vocab.tag0, vocab.tag1):
        tag = 1 if tail[0] == vocab.tag1 else 0
    if tagged:
        shape_ok = n_sep == 1 and len(tail) == 2 and tag is not None and tail[1] == vocab.eos
    else:
        shape_ok = n_sep == 1 and tail == [vocab.eos]
        tag = None
    well_formed = (
        shape_ok
        and not truncated
        and len(body) > 0
        and all(t in words for t in body)
    )
    return RewriteOutput(rewrite, tag, well_formed, log_prob, tuple(ids))
