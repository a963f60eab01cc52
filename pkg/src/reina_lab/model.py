"""Micro encoder-decoder with a READ/WRITE policy head.

Architecture shape: causal acoustic encoder over frame symbols, causal text
decoder with cross-attention, and a small causal transformer + linear +
sigmoid policy head on top of the decoder's last-layer states. Pre-LN
blocks, learned absolute positional embeddings, label vocabulary with task
tags so one decoder serves both translation and the auxiliary transcription
task.

Every forward is written once against an "ops provider": ``EvalOps`` runs
plain numpy (inference, frozen params), ``TapeOps`` builds an autodiff graph
for training. Both call the same kernels, so the two paths compute the same
math.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import InvalidArgument
from .util import STREAM_INIT, rng_stream

# Token vocabulary layout. Task tags start the decoder input (they play the
# BOS role); BOS is reserved for compatibility but never fed.
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
TAG_TGT_ID = 3
TAG_SRC_ID = 4
N_SPECIAL = 5


@dataclass(frozen=True)
class ArchConfig:
    n_frame_symbols: int
    n_target_tokens: int
    n_source_tokens: int
    max_frames: int = 64
    max_tokens: int = 32
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    policy_layers: int = 2
    policy_heads: int = 2
    ff_mult: int = 4
    dropout: float = 0.1
    label_smoothing: float = 0.1

    def __post_init__(self):
        for name in (
            "n_frame_symbols",
            "n_target_tokens",
            "n_source_tokens",
            "max_frames",
            "max_tokens",
            "d_model",
            "n_heads",
            "enc_layers",
            "dec_layers",
            "policy_layers",
            "policy_heads",
            "ff_mult",
        ):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"ArchConfig.{name} must be positive")
        if self.d_model % self.n_heads or self.d_model % self.policy_heads:
            raise InvalidArgument("d_model must be divisible by the head counts")

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.n_target_tokens + self.n_source_tokens

    @property
    def frame_pad_id(self) -> int:
        return self.n_frame_symbols

    def target_id(self, tok: int) -> int:
        return N_SPECIAL + tok

    def source_id(self, tok: int) -> int:
        return N_SPECIAL + self.n_target_tokens + tok

    def target_ids(self, toks: Iterable[int]) -> list[int]:
        return [self.target_id(t) for t in toks]

    def target_index(self, vocab_id: int) -> int:
        idx = vocab_id - N_SPECIAL
        if not 0 <= idx < self.n_target_tokens:
            raise InvalidArgument(f"vocab id {vocab_id} is not a target token")
        return idx

    def source_ids(self, toks: Iterable[int]) -> list[int]:
        return [self.source_id(t) for t in toks]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


@dataclass
class ModelParams:
    cfg: ArchConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def policy_names(self) -> list[str]:
        return [n for n in self.arrays if n.startswith("policy")]

    def base_names(self) -> list[str]:
        return [n for n in self.arrays if not n.startswith("policy")]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})


def _param_specs(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in a fixed order; kind selects the scale."""
    d, ff = cfg.d_model, cfg.d_model * cfg.ff_mult
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("frame_emb", (cfg.n_frame_symbols + 1, d), "emb"),
        ("tok_emb", (cfg.vocab_size, d), "emb"),
        ("enc_pos", (cfg.max_frames, d), "emb"),
        ("dec_pos", (cfg.max_tokens, d), "emb"),
    ]

    def ln(name):
        specs.append((f"{name}.g", (d,), "one"))
        specs.append((f"{name}.b", (d,), "zero"))

    def attn(name):
        # no key bias: softmax is invariant to a constant shift per query,
        # so a key bias would be a dead parameter
        for w in ("wq", "wk", "wv", "wo"):
            specs.append((f"{name}.{w}", (d, d), "fan_in"))
        for b in ("bq", "bv", "bo"):
            specs.append((f"{name}.{b}", (d,), "zero"))

    def ffb(name):
        specs.append((f"{name}.w1", (d, ff), "fan_in"))
        specs.append((f"{name}.b1", (ff,), "zero"))
        specs.append((f"{name}.w2", (ff, d), "fan_in"))
        specs.append((f"{name}.b2", (d,), "zero"))

    for i in range(cfg.enc_layers):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffb(f"enc{i}.ff")
    ln("enc_lnf")
    for i in range(cfg.dec_layers):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffb(f"dec{i}.ff")
    ln("dec_lnf")
    specs.append(("out_proj.w", (d, cfg.vocab_size), "out"))
    specs.append(("out_proj.b", (cfg.vocab_size,), "zero"))
    for i in range(cfg.policy_layers):
        ln(f"policy{i}.ln1")
        attn(f"policy{i}.attn")
        ln(f"policy{i}.ln2")
        ffb(f"policy{i}.ff")
    ln("policy_lnf")
    specs.append(("policy_out.w", (d, 1), "zero"))
    specs.append(("policy_out.b", (1,), "zero"))
    return specs


def init_params(cfg: ArchConfig, seed: int) -> ModelParams:
    """Deterministic fan-in-scaled initialization.

    The vocabulary projection uses a smaller 1/d scale so an untrained model
    emits near-uniform rows; the final policy linear starts at zero so
    initial READ scores sit exactly at sigmoid(0) = 0.5.
    """
    rng = rng_stream(seed, STREAM_INIT)
    arrays: dict[str, np.ndarray] = {}
    d = cfg.d_model
    for name, shape, kind in _param_specs(cfg):
        if kind == "zero":
            arrays[name] = np.zeros(shape)
        elif kind == "one":
            arrays[name] = np.ones(shape)
        elif kind == "emb":
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape)
        elif kind == "fan_in":
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif kind == "out":
            arrays[name] = rng.normal(0.0, 1.0 / shape[0], size=shape)
        else:  # pragma: no cover
            raise AssertionError(kind)
    return ModelParams(cfg, arrays)


# -- ops providers -----------------------------------------------------------


class EvalOps:
    """Plain numpy forward over frozen parameters; dropout is a no-op."""

    def __init__(self, params: ModelParams):
        self._arrays = params.arrays

    def param(self, name):
        return self._arrays[name]

    def embed(self, name, ids):
        return self._arrays[name][ids]

    def linear(self, x, wname, bname=None):
        w = self._arrays[wname]
        b = np.zeros(w.shape[1]) if bname is None else self._arrays[bname]
        y2 = kernels.linear2d(np.ascontiguousarray(x.reshape(-1, x.shape[-1])), w, b)
        return y2.reshape(x.shape[:-1] + (w.shape[1],))

    def layer_norm(self, x, gname, bname):
        d = x.shape[-1]
        y, _, _ = kernels.layer_norm_fwd(
            np.ascontiguousarray(x.reshape(-1, d)),
            self._arrays[gname],
            self._arrays[bname],
            1e-5,
        )
        return y.reshape(x.shape)

    def causal_attn(self, q, k, v, scale):
        return kernels.causal_attention_fwd(q, k, v, scale)[0]

    def cross_attn(self, q, k, v, klen, scale):
        return kernels.cross_attention_fwd(q, k, v, klen, scale)[0]

    def relu(self, x):
        return np.maximum(x, 0.0)

    def sigmoid(self, x):
        return 1.0 / (1.0 + np.exp(-x))

    def log_softmax(self, x):
        return kernels.log_softmax_fwd(
            np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
        ).reshape(x.shape)

    def dropout(self, x, p):
        return x

    def reshape(self, x, shape):
        return np.ascontiguousarray(x.reshape(shape))

    def transpose(self, x, axes):
        return np.ascontiguousarray(x.transpose(axes))

    def lift(self, x):
        return x


class TapeOps:
    """Graph-building forward. Parameters become tape leaves on first use;
    only names in ``trainable`` are marked trainable (others enter as frozen
    constants, which realizes the stage-wise freeze contracts exactly)."""

    def __init__(
        self,
        tape: ad.Tape,
        params: ModelParams,
        trainable: set[str] | None = None,
        dropout_rng: np.random.Generator | None = None,
        train: bool = False,
    ):
        self.tape = tape
        self._params = params
        self._trainable = set(params.arrays) if trainable is None else trainable
        self._leaves: dict[str, ad.Tensor] = {}
        self._rng = dropout_rng
        self._train = train

    def param(self, name) -> ad.Tensor:
        if name not in self._leaves:
            self._leaves[name] = self.tape.leaf(
                self._params.arrays[name],
                trainable=name in self._trainable,
                name=name,
            )
        return self._leaves[name]

    def leaves(self) -> dict[str, ad.Tensor]:
        return dict(self._leaves)

    def embed(self, name, ids):
        return ad.embedding(self.param(name), ids)

    def linear(self, x, wname, bname=None):
        y = x @ self.param(wname)
        if bname is None:
            return y
        return y + self.param(bname)

    def layer_norm(self, x, gname, bname):
        return x.layer_norm(self.param(gname), self.param(bname), 1e-5)

    def causal_attn(self, q, k, v, scale):
        return ad.causal_attention(q, k, v, scale)

    def cross_attn(self, q, k, v, klen, scale):
        return ad.cross_attention(q, k, v, klen, scale)

    def relu(self, x):
        return x.relu()

    def sigmoid(self, x):
        return x.sigmoid()

    def log_softmax(self, x):
        return x.log_softmax()

    def dropout(self, x, p):
        if not self._train or p <= 0.0:
            return x
        return ad.dropout(x, p, self._rng)

    def reshape(self, x, shape):
        return x.reshape(shape)

    def transpose(self, x, axes):
        return x.transpose(axes)

    def lift(self, x):
        """Wrap a constant array (e.g. frozen decoder states) as a leaf."""
        if isinstance(x, ad.Tensor):
            return x
        return self.tape.constant(x)


# -- shared forward definition -------------------------------------------------


def _split_heads(ops, x, n_heads):
    b, l, d = x.shape
    return ops.transpose(ops.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(ops, x):
    b, h, l, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _attn(ops, cfg, x_q, x_kv, name, n_heads, klen=None):
    scale = 1.0 / np.sqrt(cfg.d_model // n_heads)
    q = _split_heads(ops, ops.linear(x_q, f"{name}.wq", f"{name}.bq"), n_heads)
    k = _split_heads(ops, ops.linear(x_kv, f"{name}.wk"), n_heads)
    v = _split_heads(ops, ops.linear(x_kv, f"{name}.wv", f"{name}.bv"), n_heads)
    if klen is None:
        a = ops.causal_attn(q, k, v, scale)
    else:
        a = ops.cross_attn(q, k, v, klen, scale)
    return ops.linear(_merge_heads(ops, a), f"{name}.wo", f"{name}.bo")


def _ff(ops, cfg, x, name):
    h = ops.relu(ops.linear(x, f"{name}.w1", f"{name}.b1"))
    return ops.linear(h, f"{name}.w2", f"{name}.b2")


def encoder_forward(ops, cfg: ArchConfig, frames: np.ndarray):
    """frames: (B, T) int ids (pad id allowed); causal states (B, T, d)."""
    B, T = frames.shape
    pos = np.arange(T, dtype=np.int64)
    x = ops.embed("frame_emb", frames) + ops.embed("enc_pos", pos)
    x = ops.dropout(x, cfg.dropout)
    for i in range(cfg.enc_layers):
        h = ops.layer_norm(x, f"enc{i}.ln1.g", f"enc{i}.ln1.b")
        x = x + ops.dropout(_attn(ops, cfg, h, h, f"enc{i}.attn", cfg.n_heads), cfg.dropout)
        h = ops.layer_norm(x, f"enc{i}.ln2.g", f"enc{i}.ln2.b")
        x = x + ops.dropout(_ff(ops, cfg, h, f"enc{i}.ff"), cfg.dropout)
    return ops.layer_norm(x, "enc_lnf.g", "enc_lnf.b")


def decoder_forward(ops, cfg: ArchConfig, tokens: np.ndarray, enc_states, enc_klen: np.ndarray):
    """tokens: (B, L) vocab ids starting with a task tag.

    Returns (logprob rows (B, L, V), last-layer states (B, L, d)). Row n is
    the log-distribution over the vocabulary for the token at position n+1,
    conditioned causally on tokens <= n and on encoder states < enc_klen[b].
    """
    B, L = tokens.shape
    pos = np.arange(L, dtype=np.int64)
    x = ops.embed("tok_emb", tokens) + ops.embed("dec_pos", pos)
    x = ops.dropout(x, cfg.dropout)
    for i in range(cfg.dec_layers):
        h = ops.layer_norm(x, f"dec{i}.ln1.g", f"dec{i}.ln1.b")
        x = x + ops.dropout(_attn(ops, cfg, h, h, f"dec{i}.self", cfg.n_heads), cfg.dropout)
        h = ops.layer_norm(x, f"dec{i}.ln2.g", f"dec{i}.ln2.b")
        x = x + ops.dropout(
            _attn(ops, cfg, h, enc_states, f"dec{i}.cross", cfg.n_heads, klen=enc_klen),
            cfg.dropout,
        )
        h = ops.layer_norm(x, f"dec{i}.ln3.g", f"dec{i}.ln3.b")
        x = x + ops.dropout(_ff(ops, cfg, h, f"dec{i}.ff"), cfg.dropout)
    states = ops.layer_norm(x, "dec_lnf.g", "dec_lnf.b")
    logprobs = ops.log_softmax(ops.linear(states, "out_proj.w", "out_proj.b"))
    return logprobs, states


def policy_forward(ops, cfg: ArchConfig, dec_states):
    """READ scores (B, L) in (0, 1); score at position i sees states <= i."""
    x = ops.lift(dec_states)
    for i in range(cfg.policy_layers):
        h = ops.layer_norm(x, f"policy{i}.ln1.g", f"policy{i}.ln1.b")
        x = x + ops.dropout(
            _attn(ops, cfg, h, h, f"policy{i}.attn", cfg.policy_heads), cfg.dropout
        )
        h = ops.layer_norm(x, f"policy{i}.ln2.g", f"policy{i}.ln2.b")
        x = x + ops.dropout(_ff(ops, cfg, h, f"policy{i}.ff"), cfg.dropout)
    x = ops.layer_norm(x, "policy_lnf.g", "policy_lnf.b")
    scores = ops.linear(x, "policy_out.w", "policy_out.b")
    b, l = dec_states.shape[0], dec_states.shape[1]
    return ops.sigmoid(ops.reshape(scores, (b, l)))


# -- eval-mode public wrappers ---------------------------------------------------


def _validate_frames(cfg: ArchConfig, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    if frames.ndim != 1 or frames.size == 0:
        raise InvalidArgument("frames must be a nonempty 1-D sequence")
    if frames.size > cfg.max_frames:
        raise InvalidArgument(f"frames longer than max_frames={cfg.max_frames}")
    if frames.min() < 0 or frames.max() > cfg.frame_pad_id:
        raise InvalidArgument("frame symbol out of range")
    return frames


def encode(params: ModelParams, frames) -> np.ndarray:
    """Causal encoder states for one utterance prefix: (T, d)."""
    frames = _validate_frames(params.cfg, frames)
    ops = EvalOps(params)
    return encoder_forward(ops, params.cfg, frames[None, :])[0]


def encode_batch(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    return encoder_forward(EvalOps(params), params.cfg, np.asarray(frames, dtype=np.int64))


def decode_logprobs(params: ModelParams, enc_states: np.ndarray, token_prefix):
    """Teacher-forced next-token log-prob rows for one sequence: (L, V)."""
    cfg = params.cfg
    tokens = np.asarray(token_prefix, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InvalidArgument("token_prefix must be a nonempty 1-D sequence")
    if tokens[0] not in (TAG_TGT_ID, TAG_SRC_ID):
        raise InvalidArgument("token_prefix must start with a task tag token")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InvalidArgument("unknown token id in token_prefix")
    if tokens.size > cfg.max_tokens:
        raise InvalidArgument(f"token_prefix longer than max_tokens={cfg.max_tokens}")
    ops = EvalOps(params)
    klen = np.array([enc_states.shape[0]], dtype=np.int64)
    logprobs, _ = decoder_forward(ops, cfg, tokens[None, :], enc_states[None, :, :], klen)
    return logprobs[0]


def decode_batch(params: ModelParams, tokens: np.ndarray, enc_states: np.ndarray, enc_klen):
    ops = EvalOps(params)
    return decoder_forward(
        ops,
        params.cfg,
        np.asarray(tokens, dtype=np.int64),
        enc_states,
        np.asarray(enc_klen, dtype=np.int64),
    )


def policy_scores(params: ModelParams, dec_states: np.ndarray) -> np.ndarray:
    """READ scores for one sequence of decoder states: (L,)."""
    if dec_states.ndim != 2 or dec_states.shape[0] == 0:
        raise InvalidArgument("dec_states must be a nonempty (L, d) array")
    ops = EvalOps(params)
    return policy_forward(ops, params.cfg, dec_states[None, :, :])[0]


def policy_batch(params: ModelParams, dec_states: np.ndarray) -> np.ndarray:
    return policy_forward(EvalOps(params), params.cfg, dec_states)
