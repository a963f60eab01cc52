"""Synthetic streaming-translation tasks.

Each utterance is a discrete frame stream paired with source and target
token sequences. Frames are symbols, not acoustics: every source token emits
``frames_per_token`` frames, each kept clean with probability 1 - noise_rate
or replaced by a symbol from a disjoint noise alphabet. Targets are a fixed
bijection of the (possibly block-reordered) source tokens, so information
arrives gradually and reordering forces lookahead while exact posteriors
stay computable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import InvalidArgument

TASK_KINDS = ("copy", "block_reorder", "noisy_channel")
ENUMERATION_BOUND = 10**7


@dataclass(frozen=True)
class TaskParams:
    kind: str
    n_src_vocab: int
    n_tgt_vocab: int
    n_tokens: int
    frames_per_token: int = 1
    noise_rate: float = 0.0
    block_size: int = 2
    swap_prob: float = 0.0
    frame_dur_s: float = 0.25
    n_noise_symbols: int = 0  # 0 means "same size as the source vocabulary"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidArgument(f"unknown task kind {self.kind!r}")
        if min(self.n_src_vocab, self.n_tgt_vocab, self.n_tokens, self.frames_per_token) < 1:
            raise InvalidArgument("vocab sizes, token count and frames_per_token must be >= 1")
        if not 0.0 <= self.noise_rate < 1.0:
            raise InvalidArgument("noise_rate must be in [0, 1)")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise InvalidArgument("swap_prob must be in [0, 1]")
        if self.n_tgt_vocab != self.n_src_vocab:
            raise InvalidArgument("target vocabulary must match source (bijection tasks)")
        if self.frame_dur_s <= 0.0:
            raise InvalidArgument("frame_dur_s must be positive")
        if self.kind == "block_reorder":
            if self.block_size < 2:
                raise InvalidArgument("block_size must be >= 2")
            if self.n_tokens % self.block_size:
                raise InvalidArgument("n_tokens must be a multiple of block_size")
            if self.swap_prob > 0.0 and self.block_size != 2:
                raise InvalidArgument("stochastic pair swap requires block_size == 2")

    @property
    def noise_symbols(self) -> int:
        return self.n_noise_symbols or self.n_src_vocab

    @property
    def n_frame_symbols(self) -> int:
        """Clean symbols plus the disjoint noise alphabet."""
        return self.n_src_vocab + self.noise_symbols

    @property
    def n_frames(self) -> int:
        return self.n_tokens * self.frames_per_token

    @property
    def stochastic_reorder(self) -> bool:
        return self.kind == "block_reorder" and self.swap_prob > 0.0

    def bijection(self, token: int) -> int:
        return (int(token) + 1) % self.n_tgt_vocab

    def bijection_array(self, tokens: np.ndarray) -> np.ndarray:
        return (tokens + 1) % self.n_tgt_vocab

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskParams":
        return cls(**d)


@dataclass
class Utterance:
    id: str
    split: str
    src_tokens: list[int]
    frames: list[int]
    tgt_tokens: list[int]
    frame_dur_s: float

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def duration_s(self) -> float:
        return len(self.frames) * self.frame_dur_s


def _split_of(utt_id: str) -> str:
    bucket = int(hashlib.sha256(utt_id.encode()).hexdigest(), 16) % 100
    if bucket < 80:
        return "train"
    if bucket < 90:
        return "dev"
    return "test"


def _reorder_permutation(params: TaskParams, swaps: np.ndarray | None) -> np.ndarray:
    """Index permutation applied to the source before the bijection."""
    perm = np.arange(params.n_tokens)
    if params.kind != "block_reorder":
        return perm
    b = params.block_size
    if params.stochastic_reorder:
        for blk, swap in enumerate(swaps):
            if swap:
                lo = blk * 2
                perm[lo], perm[lo + 1] = perm[lo + 1], perm[lo]
    else:
        for lo in range(0, params.n_tokens, b):
            perm[lo : lo + b] = perm[lo : lo + b][::-1]
    return perm


def _emit_frames(params: TaskParams, src: np.ndarray, rng: np.random.Generator) -> list[int]:
    frames: list[int] = []
    for tok in src:
        for _ in range(params.frames_per_token):
            if params.noise_rate > 0.0 and rng.random() < params.noise_rate:
                frames.append(params.n_src_vocab + int(rng.integers(params.noise_symbols)))
            else:
                frames.append(int(tok))
    return frames


def make_utterance(params: TaskParams, seed: int, index: int) -> Utterance:
    """One deterministic sample; the RNG stream is derived from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    src = rng.integers(0, params.n_src_vocab, size=params.n_tokens)
    if params.stochastic_reorder:
        swaps = rng.random(params.n_tokens // 2) < params.swap_prob
    else:
        swaps = None
    perm = _reorder_permutation(params, swaps)
    tgt = [params.bijection(int(src[p])) for p in perm]
    frames = _emit_frames(params, src, rng)
    utt_id = f"{params.kind}-{seed}-{index:06d}"
    return Utterance(
        id=utt_id,
        split=_split_of(utt_id),
        src_tokens=[int(z) for z in src],
        frames=frames,
        tgt_tokens=tgt,
        frame_dur_s=params.frame_dur_s,
    )


def gen_task(params: TaskParams, count: int, seed: int) -> list[Utterance]:
    """Generate ``count`` utterances with 80/10/10 train/dev/test splits."""
    if count <= 0:
        raise InvalidArgument("count must be positive")
    return [make_utterance(params, seed, i) for i in range(count)]


def truncate_sample(utt: Utterance, rng: np.random.Generator, p_full: float) -> Utterance:
    """Keep the full stream with probability p_full, else cut it to a uniform
    length in [1, T-1]. Tokens are never touched; single-frame utterances are
    returned unchanged."""
    if not 0.0 <= p_full <= 1.0:
        raise InvalidArgument("p_full must be in [0, 1]")
    if len(utt.frames) <= 1:
        return utt
    if p_full >= 1.0 or rng.random() < p_full:
        return utt
    t = int(rng.integers(1, len(utt.frames)))
    return replace(utt, frames=utt.frames[:t])


def split_utterances(utts: Iterable[Utterance]) -> dict[str, list[Utterance]]:
    out: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
    for u in utts:
        out[u.split].append(u)
    return out


# -- dataset files -------------------------------------------------------------


def params_path(dataset_path: str) -> str:
    return dataset_path + ".params.json"


def save_dataset(utts: list[Utterance], params: TaskParams, path: str) -> None:
    """JSONL, one utterance per line, plus a sidecar params header file."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(
                json.dumps(
                    {
                        "id": u.id,
                        "split": u.split,
                        "src_tokens": u.src_tokens,
                        "frames": u.frames,
                        "tgt_tokens": u.tgt_tokens,
                        "frame_dur_s": u.frame_dur_s,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
    with open(params_path(path), "w", encoding="utf-8") as fh:
        json.dump(params.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str) -> tuple[list[Utterance], TaskParams]:
    with open(params_path(path), "r", encoding="utf-8") as fh:
        params = TaskParams.from_dict(json.load(fh))
    utts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            utts.append(Utterance(**d))
    return utts, params
