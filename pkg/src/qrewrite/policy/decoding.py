"""Length-bounded beam search and greedy decoding over an abstract step interface.

A decoder is described by three callables working on batches of live
hypotheses:

``next_logp(states, prefixes) -> (n, V)``
    log-probabilities of the next token (``-inf`` marks a disallowed token);
``advance(states, tokens) -> states``
    the recurrent state after appending ``tokens``;
``force_eos(states, prefixes) -> (logp (n,), truncated (n,))``
    score of closing a hypothesis that reached ``max_len`` tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    truncated: bool = False


def _default_force(next_logp, eos_id):
    def force(states, prefixes):
        lp = next_logp(states, prefixes)[:, eos_id]
        return lp, np.ones(len(prefixes), dtype=bool)

    return force


def beam_search(next_logp, advance, init_state, beam_size: int, max_len: int, eos_id: int, force_eos=None):
    """Beam search whose width shrinks as hypotheses complete.

    Every step keeps the ``beam_size - len(finished)`` best extensions of the
    live beam; extensions ending in ``eos_id`` move to the finished pool. With
    ``beam_size == 1`` this is greedy decoding, and once the beam is at least
    as large as the number of possible sequences it is exhaustive. Results
    are ordered by non-increasing raw log-probability.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    force_eos = force_eos or _default_force(next_logp, eos_id)
    states = np.asarray(init_state)[None, :]
    prefixes: list[tuple[int, ...]] = [()]
    scores = np.zeros(1)
    finished: list[Hypothesis] = []
    for length in range(max_len + 1):
        cap = beam_size - len(finished)
        if not prefixes or cap <= 0:
            break
        if length == max_len:
            lp, trunc = force_eos(states, prefixes)
            for p, s, e, tr in zip(prefixes, scores, lp, trunc):
                finished.append(Hypothesis(p + (eos_id,), float(s + e), bool(tr)))
            break
        cand = scores[:, None] + next_logp(states, prefixes)
        n, V = cand.shape
        flat = cand.ravel()
        valid = np.flatnonzero(np.isfinite(flat))
        rows, toks = np.divmod(valid, V)
        order = np.lexsort((toks, rows, -flat[valid]))[:cap]
        keep_rows, keep_toks = [], []
        for i in order:
            r, t, s = int(rows[i]), int(toks[i]), float(flat[valid[i]])
            if t == eos_id:
                finished.append(Hypothesis(prefixes[r] + (t,), s, False))
            else:
                keep_rows.append(r)
                keep_toks.append(t)
        if not keep_rows:
            break
        idx = np.asarray(keep_rows)
        states = advance(states[idx], np.asarray(keep_toks))
        scores = np.array([float(cand[r, t]) for r, t in zip(keep_rows, keep_toks)])
        prefixes = [prefixes[r] + (t,) for r, t in zip(keep_rows, keep_toks)]
    finished.sort(key=lambda h: (-h.log_prob, h.tokens))
    return finished[:beam_size]


def greedy_decode(next_logp, advance, init_state, max_len: int, eos_id: int, force_eos=None) -> Hypothesis:
    """Arg-max decoding (lowest id wins ties) with the same termination rules as :func:`beam_search`."""
    force_eos = force_eos or _default_force(next_logp, eos_id)
    state = np.asarray(init_state)[None, :]
    prefix: tuple[int, ...] = ()
    score = 0.0
    for _ in range(max_len):
        lp = next_logp(state, [prefix])[0]
        tok = int(np.argmax(lp))
        score += float(lp[tok])
        prefix += (tok,)
        if tok == eos_id:
            return Hypothesis(prefix, score, False)
        state = advance(state, np.array([tok]))
    lp, trunc = force_eos(state, [prefix])
    return Hypothesis(prefix + (eos_id,), score + float(lp[0]), bool(trunc[0]))


def sample_decode(next_logp, advance, init_state, n: int, max_len: int, eos_id: int, rng, force_eos=None):
    """``n`` independent ancestral samples, in draw order (duplicates possible)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    force_eos = force_eos or _default_force(next_logp, eos_id)
    states = np.repeat(np.asarray(init_state)[None, :], n, axis=0)
    prefixes: list[tuple[int, ...]] = [()] * n
    scores = np.zeros(n)
    live = np.arange(n)
    for _ in range(max_len):
        if live.size == 0:
            break
        lp = next_logp(states, [prefixes[i] for i in live])
        probs = np.exp(lp)
        probs /= probs.sum(axis=1, keepdims=True)
        toks = np.array([rng.choice(probs.shape[1], p=p) for p in probs])
        for j, i in enumerate(live):
            prefixes[i] += (int(toks[j]),)
            scores[i] += lp[j, toks[j]]
        cont = toks != eos_id
        live = live[cont]
        states = advance(states[cont], toks[cont]) if live.size else states[cont]
    out = [Hypothesis(p, float(s), False) for p, s in zip(prefixes, scores)]
    if live.size:
        lp, trunc = force_eos(states, [prefixes[i] for i in live])
        for j, i in enumerate(live):
            out[i] = Hypothesis(prefixes[i] + (eos_id,), float(scores[i] + lp[j]), bool(trunc[j]))
    return out
