"""Exact posterior and information-gain oracle by enumeration.

The generative process of a :class:`~reina_lab.tasks.TaskParams` is inverted
by Bayes: sum over every source sequence (and, for the stochastic reorder
task, every block-swap assignment) consistent with the observed frame prefix
and target prefix. Feasibility is capped so a request can never explode:
|V_s|^M times 2^(M/b) must stay within ``ENUMERATION_BOUND``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument, ResourceLimit
from .tasks import ENUMERATION_BOUND, TaskParams, Utterance, _reorder_permutation

_CHUNK = 1 << 15


@dataclass
class ExactPosterior:
    """Distribution over the next target token given (t frames, n tokens)."""

    probs: np.ndarray
    t: int
    n: int


def _combo_count(params: TaskParams) -> int:
    count = params.n_src_vocab**params.n_tokens
    if params.stochastic_reorder:
        count *= 2 ** (params.n_tokens // params.block_size)
    return count


def check_enumeration_bound(params: TaskParams) -> int:
    count = _combo_count(params)
    if count > ENUMERATION_BOUND:
        raise ResourceLimit(
            f"enumeration of {count} source/reorder combinations exceeds "
            f"the {ENUMERATION_BOUND} feasibility bound"
        )
    return count


@lru_cache(maxsize=8)
def _enumeration(params: TaskParams):
    """All (source sequence, swap assignment) combos with prior weights.

    Returns (src (K, M), tgt (K, M), log-free prior weights (K,)). Chunked
    callers slice these arrays; K is bounded by ``check_enumeration_bound``.
    """
    check_enumeration_bound(params)
    vs, m = params.n_src_vocab, params.n_tokens
    base = np.indices((vs,) * m).reshape(m, -1).T.astype(np.int64)
    if params.stochastic_reorder:
        nblk = m // params.block_size
        rho = params.swap_prob
        src_parts, tgt_parts, prior_parts = [], [], []
        for a in range(2**nblk):
            bits = np.array([(a >> i) & 1 for i in range(nblk)], dtype=bool)
            perm = _reorder_permutation(params, bits)
            src_parts.append(base)
            tgt_parts.append(params.bijection_array(base[:, perm]))
            w = float(np.prod(np.where(bits, rho, 1.0 - rho)))
            prior_parts.append(np.full(base.shape[0], w))
        src = np.concatenate(src_parts)
        tgt = np.concatenate(tgt_parts)
        prior = np.concatenate(prior_parts)
    else:
        perm = _reorder_permutation(params, None)
        src = base
        tgt = params.bijection_array(base[:, perm])
        prior = np.ones(base.shape[0])
    return src, tgt, prior


@lru_cache(maxsize=8)
def _frame_likelihood_table(params: TaskParams) -> np.ndarray:
    """lik[z, f] = P(frame f | source token z)."""
    vs = params.n_src_vocab
    lik = np.zeros((vs, params.n_frame_symbols))
    eta = params.noise_rate
    for z in range(vs):
        lik[z, z] = 1.0 - eta
        if params.noise_symbols:
            lik[z, vs:] = eta / params.noise_symbols
    return lik


def exact_posterior(params: TaskParams, frames_prefix, tgt_prefix) -> ExactPosterior:
    """Bayes posterior over the next target token.

    ``frames_prefix`` is the observed frame symbols so far (possibly empty),
    ``tgt_prefix`` the target tokens already given.
    """
    frames = np.asarray(list(frames_prefix), dtype=np.int64)
    prefix = np.asarray(list(tgt_prefix), dtype=np.int64)
    n = prefix.size
    t = frames.size
    if n >= params.n_tokens:
        raise InvalidArgument("tgt_prefix already covers every token")
    if t > params.n_frames:
        raise InvalidArgument("frames_prefix longer than the task stream")
    if frames.size and (frames.min() < 0 or frames.max() >= params.n_frame_symbols):
        raise InvalidArgument("frame symbol out of range")
    src, tgt, prior = _enumeration(params)
    lik = _frame_likelihood_table(params)
    k = params.frames_per_token
    probs = np.zeros(params.n_tgt_vocab)
    for lo in range(0, src.shape[0], _CHUNK):
        s = src[lo : lo + _CHUNK]
        g = tgt[lo : lo + _CHUNK]
        w = prior[lo : lo + _CHUNK].copy()
        for j in range(t):
            w *= lik[s[:, j // k], frames[j]]
        if n:
            w = np.where(np.all(g[:, :n] == prefix, axis=1), w, 0.0)
        probs += np.bincount(g[:, n], weights=w, minlength=params.n_tgt_vocab)
    total = probs.sum()
    if total <= 0.0:
        raise InvalidArgument("conditioning event has zero probability")
    return ExactPosterior(probs=probs / total, t=t, n=n)


def exact_info_gain(params: TaskParams, utt: Utterance, n: int, t: int) -> float:
    """Expected gain in log-probability of token n+1 from hearing the rest of
    the stream, with the expectation over the full-audio posterior. Equals
    KL(posterior_full || posterior_partial), hence >= 0, and exactly 0 at
    t = T."""
    if not 0 <= n < len(utt.tgt_tokens):
        raise InvalidArgument("token index n out of range")
    if not 0 <= t <= len(utt.frames):
        raise InvalidArgument("frame index t out of range")
    p_full = exact_posterior(params, utt.frames, utt.tgt_tokens[:n]).probs
    p_part = exact_posterior(params, utt.frames[:t], utt.tgt_tokens[:n]).probs
    sel = p_full > 0.0
    return float(np.sum(p_full[sel] * (np.log(p_full[sel]) - np.log(p_part[sel]))))
