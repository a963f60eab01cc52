"""Chunked streaming inference.

The stream decoder consumes the frame stream one chunk at a time and runs a
policy-gated beam search inside each chunk: before a beam expands, the READ
score at its last decoder state is compared against the threshold alpha, and
beams with score > alpha stop to wait for more audio. The search inside a
chunk ends when every beam is waiting or finished, or when the number of
waiting/finished beams reaches beam_size * patience. The best of those (by
average log-probability over the tokens generated this chunk) becomes the
new committed prefix; commitments are never retracted. After the final chunk
the policy is disabled and a plain beam search finishes the hypothesis.

Offline beam search and a wait-k baseline share the same machinery.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .errors import InvalidArgument
from .tasks import Utterance
from .util import thread_count

POLICY_KINDS = ("learned", "always_read", "never_read")


@dataclass
class DecodeConfig:
    chunk_s: float = 0.25
    beam_size: int = 3
    patience: int = 3
    alpha: float | None = None
    max_len: int | None = None  # generated tokens incl. EOS; default from arch
    policy: str = "learned"
    reencode_per_chunk: bool = False
    length_penalty: float | None = None

    def __post_init__(self):
        if self.beam_size < 1:
            raise InvalidArgument("beam_size must be >= 1")
        if self.patience < 1:
            raise InvalidArgument("patience must be >= 1")
        if self.chunk_s <= 0.0:
            raise InvalidArgument("chunk_s must be positive")
        if self.policy not in POLICY_KINDS:
            raise InvalidArgument(f"unknown policy kind {self.policy!r}")
        if self.length_penalty not in (None, 0.0):
            raise InvalidArgument("length penalties are not supported (default none)")


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)  # vocab ids beyond the prefix
    logprob: float = 0.0  # sum over generated tokens
    scores: list[float] = field(default_factory=list)  # READ score before each step
    status: str = "alive"  # alive | waited | completed
    forced: bool = False  # completed by the length cap, not by EOS

    @property
    def avg_logprob(self) -> float:
        return self.logprob / max(1, len(self.tokens))


@dataclass
class DelayTrace:
    delays_s: list[float]
    total_s: float

    def __post_init__(self):
        if any(b < a - 1e-12 for a, b in zip(self.delays_s, self.delays_s[1:])):
            raise InvalidArgument("delays must be non-decreasing")
        if any(d > self.total_s + 1e-12 for d in self.delays_s):
            raise InvalidArgument("delay exceeds total duration")


def _allowed_ids(cfg: M.ArchConfig) -> np.ndarray:
    """Candidate emissions for translation decoding: target tokens and EOS."""
    return np.array([M.EOS_ID] + [cfg.target_id(t) for t in range(cfg.n_target_tokens)])


def _max_new(params: M.ModelParams, cfg: DecodeConfig, prefix_len: int) -> int:
    room = params.cfg.max_tokens - 1 - prefix_len  # input = tag + prefix + generated
    cap = cfg.max_len if cfg.max_len is not None else room
    return max(0, min(cap, room))


def _beam_search(
    params: M.ModelParams,
    enc: np.ndarray,
    prefix: list[int],
    cfg: DecodeConfig,
    gate=None,
) -> Hypothesis:
    """One inner search from ``prefix`` over encoder states ``enc``.

    ``gate(scores) -> bool mask`` marks beams that must wait; ``None``
    disables the policy (offline mode). Returns the selected hypothesis.
    """
    arch = params.cfg
    allowed = _allowed_ids(arch)
    beams = [Hypothesis()]
    parked: list[tuple[float, int, Hypothesis]] = []  # (-avg, order, hyp)
    order = 0
    limit = cfg.beam_size * cfg.patience
    max_new = _max_new(params, cfg, len(prefix))

    def park(h: Hypothesis) -> None:
        nonlocal order
        parked.append((-h.avg_logprob, order, h))
        order += 1

    if max_new == 0:
        h = Hypothesis(status="completed", forced=True)
        return h
    while beams and len(parked) < limit:
        tokens = np.array(
            [[M.TAG_TGT_ID] + prefix + b.tokens for b in beams], dtype=np.int64
        )
        enc_b = np.repeat(enc[None, :, :], len(beams), axis=0)
        klen = np.full(len(beams), enc.shape[0], dtype=np.int64)
        logprobs, states = M.decode_batch(params, tokens, enc_b, klen)
        if gate is not None:
            r = M.policy_batch(params, states)[:, -1]
            keep = []
            for i, b in enumerate(beams):
                b.scores.append(float(r[i]))
                if gate(float(r[i])):
                    b.status = "waited"
                    park(b)
                else:
                    keep.append(b)
            beams = keep
            if not beams or len(parked) >= limit:
                break
        last = logprobs[:, -1, :]
        pool: list[tuple[float, int, Hypothesis]] = []
        for i, b in enumerate(beams):
            for tok in allowed:
                pool.append((b.logprob + float(last[i, tok]), int(tok), b))
        pool.sort(key=lambda c: (-c[0], c[1]))
        next_beams = []
        for score, tok, parent in pool[: cfg.beam_size]:
            child = Hypothesis(
                tokens=parent.tokens + [tok],
                logprob=score,
                scores=list(parent.scores),
            )
            if tok == M.EOS_ID:
                child.status = "completed"
                park(child)
            elif len(child.tokens) >= max_new:
                child.status = "completed"
                child.forced = True
                park(child)
            else:
                next_beams.append(child)
        beams = next_beams
    if not parked:
        # only reachable gate-free when the pool was empty, which cannot
        # happen (allowed is nonempty); defensive fallback
        raise AssertionError("beam search ended with no candidates")
    parked.sort(key=lambda c: (c[0], c[1]))
    return parked[0][2]


def offline_beam_decode(params: M.ModelParams, frames, cfg: DecodeConfig):
    """Full-audio beam search to EOS; returns (target tokens, avg logprob,
    forced-completion flag)."""
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size == 0:
        raise InvalidArgument("frames must be nonempty")
    enc = M.encode(params, frames)
    best = _beam_search(params, enc, [], cfg, gate=None)
    toks = [t for t in best.tokens if t != M.EOS_ID]
    return [params.cfg.target_index(t) for t in toks], best.avg_logprob, best.forced


def _gate_for(cfg: DecodeConfig):
    if cfg.policy == "learned":
        if cfg.alpha is None or not 0.0 <= cfg.alpha <= 1.0:
            raise InvalidArgument("learned policy requires alpha in [0, 1]")
        alpha = cfg.alpha
        return lambda r: r > alpha
    if cfg.policy == "always_read":
        return lambda r: True
    return lambda r: False  # never_read


def stream_decode(params: M.ModelParams, frames, cfg: DecodeConfig, frame_dur_s: float):
    """Chunked policy-gated decode; returns (target tokens, DelayTrace, info)."""
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size == 0:
        raise InvalidArgument("frames must be nonempty")
    gate = _gate_for(cfg)
    chunk_frames = max(1, round(cfg.chunk_s / frame_dur_s))
    T = int(frames.size)
    total_s = T * frame_dur_s
    n_chunks = math.ceil(T / chunk_frames)
    enc_full = None if cfg.reencode_per_chunk else M.encode(params, frames)
    committed: list[int] = []
    delays: list[float] = []
    scores: list[float] = []
    done = False
    for c in range(1, n_chunks + 1):
        if cfg.policy == "always_read":
            continue  # every beam waits immediately; nothing can commit
        t = min(c * chunk_frames, T)
        consumed_s = t * frame_dur_s
        enc_t = M.encode(params, frames[:t]) if enc_full is None else enc_full[:t]
        best = _beam_search(params, enc_t, committed, cfg, gate=gate)
        scores.extend(best.scores)
        for tok in best.tokens:
            if tok == M.EOS_ID:
                done = True
                break
            committed.append(tok)
            delays.append(consumed_s)
        if done or len(committed) >= _max_new(params, cfg, 0):
            done = True
            break
    if not done:
        enc = enc_full if enc_full is not None else M.encode(params, frames)
        best = _beam_search(params, enc, committed, cfg, gate=None)
        for tok in best.tokens:
            if tok == M.EOS_ID:
                break
            committed.append(tok)
            delays.append(total_s)
    toks = [params.cfg.target_index(t) for t in committed]
    trace = DelayTrace(delays_s=delays, total_s=total_s)
    return toks, trace, {"scores": scores, "n_chunks": n_chunks}


def waitk_decode(params: M.ModelParams, frames, k: int, cfg: DecodeConfig, frame_dur_s: float):
    """Fixed policy: read k chunks, then one greedy emission per chunk."""
    if k < 1:
        raise InvalidArgument("wait-k requires k >= 1")
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size == 0:
        raise InvalidArgument("frames must be nonempty")
    arch = params.cfg
    chunk_frames = max(1, round(cfg.chunk_s / frame_dur_s))
    T = int(frames.size)
    total_s = T * frame_dur_s
    n_chunks = math.ceil(T / chunk_frames)
    enc_full = M.encode(params, frames)
    committed: list[int] = []
    delays: list[float] = []
    done = False
    for c in range(1, n_chunks + 1):
        if c < k:
            continue
        t = min(c * chunk_frames, T)
        consumed_s = t * frame_dur_s
        if len(committed) >= _max_new(params, cfg, 0):
            done = True
            break
        tokens = np.array([[M.TAG_TGT_ID] + committed], dtype=np.int64)
        logprobs, _ = M.decode_batch(params, tokens, enc_full[None, :t, :], [t])
        allowed = _allowed_ids(arch)
        tok = int(allowed[np.argmax(logprobs[0, -1, allowed])])
        if tok == M.EOS_ID:
            done = True
            break
        committed.append(tok)
        delays.append(consumed_s)
    if not done:
        best = _beam_search(params, enc_full, committed, cfg, gate=None)
        for tok in best.tokens:
            if tok == M.EOS_ID:
                break
            committed.append(tok)
            delays.append(total_s)
    toks = [arch.target_index(t) for t in committed]
    return toks, DelayTrace(delays_s=delays, total_s=total_s)


# -- dataset-level decoding -------------------------------------------------------


def decode_utterance(params: M.ModelParams, utt: Utterance, mode: str, cfg: DecodeConfig, k: int | None = None) -> dict:
    """One decode-log record (the metrics module's input contract)."""
    if mode == "offline":
        toks, avg, forced = offline_beam_decode(params, utt.frames, cfg)
        rec = {
            "id": utt.id,
            "mode": mode,
            "alpha": None,
            "tokens": toks,
            "d_i": [utt.duration_s] * len(toks),
            "T_s": utt.duration_s,
            "forced": forced,
        }
    elif mode == "stream":
        toks, trace, _ = stream_decode(params, utt.frames, cfg, utt.frame_dur_s)
        rec = {
            "id": utt.id,
            "mode": mode,
            "alpha": cfg.alpha,
            "tokens": toks,
            "d_i": trace.delays_s,
            "T_s": trace.total_s,
        }
    elif mode == "waitk":
        if k is None:
            raise InvalidArgument("waitk mode requires k")
        toks, trace = waitk_decode(params, utt.frames, k, cfg, utt.frame_dur_s)
        rec = {
            "id": utt.id,
            "mode": mode,
            "alpha": None,
            "k": k,
            "tokens": toks,
            "d_i": trace.delays_s,
            "T_s": trace.total_s,
        }
    else:
        raise InvalidArgument(f"unknown decode mode {mode!r}")
    rec["ref_tokens"] = list(utt.tgt_tokens)
    return rec


def decode_split(
    params: M.ModelParams,
    utts: Sequence[Utterance],
    mode: str,
    cfg: DecodeConfig,
    k: int | None = None,
) -> list[dict]:
    """Decode every utterance; parallel fan-out capped by REINA_LAB_THREADS,
    results always merged in input order."""
    workers = thread_count()
    if workers <= 1 or len(utts) < 2:
        return [decode_utterance(params, u, mode, cfg, k) for u in utts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda u: decode_utterance(params, u, mode, cfg, k), utts))
