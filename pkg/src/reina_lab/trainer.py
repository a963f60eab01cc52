"""Three-stage training recipe.

Stage 1 fits the translation model on full streams (teacher-forced CE, with
an auxiliary transcription task under the source tag). Stage 2 continues the
same objective on randomly truncated streams so partial-audio log-probs are
calibrated. Stage 3 freezes the base model and trains only the policy head:
each sample is decoded twice (full stream and a uniformly drawn prefix), the
per-position log-prob differences form the information-gain estimate, and
the configured policy loss shapes the READ scores.

Freezing is structural, not masked: the frozen side never enters the tape,
so stage-3 base parameters are bit-identical before and after by
construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .errors import CheckpointError, InvalidArgument, TrainingDiverged
from .tasks import TaskParams, Utterance, truncate_sample
from .util import (
    STREAM_BATCH,
    STREAM_DROPOUT,
    STREAM_POLICY_T,
    STREAM_TRUNCATE,
    dump_json,
    rng_stream,
)

POLICY_LOSS_KINDS = ("reina", "reina_no_mono", "divergence")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    stage: int
    steps: int
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    seed: int = 0
    p_full: float = 0.2
    policy_loss: str = "reina"
    asr_weight: float = 1.0
    lambda_l2: float = 0.05
    mono_eps: float = 0.5
    bn_eps: float = 1e-5
    warmup_steps: int = 500
    eval_every: int = 200
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise InvalidArgument("stage must be 1, 2 or 3")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.policy_loss not in POLICY_LOSS_KINDS:
            raise InvalidArgument(f"unknown policy loss {self.policy_loss!r}")
        if not 0.0 <= self.p_full <= 1.0:
            raise InvalidArgument("p_full must be in [0, 1]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    params: M.ModelParams
    stage: int
    seed: int
    provenance: list[dict] = field(default_factory=list)
    train_config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    curve_log: list[dict] = field(default_factory=list)
    train_stats: dict = field(default_factory=dict)


def arch_for_task(params: TaskParams, **overrides) -> M.ArchConfig:
    """ArchConfig sized for one task's vocabularies and sequence lengths."""
    base = dict(
        n_frame_symbols=params.n_frame_symbols,
        n_target_tokens=params.n_tgt_vocab,
        n_source_tokens=params.n_src_vocab,
        max_frames=max(8, params.n_frames),
        max_tokens=max(4, params.n_tokens + 2),
    )
    base.update(overrides)
    return M.ArchConfig(**base)


# -- batch assembly -------------------------------------------------------------


def _pad_frames(cfg: M.ArchConfig, utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(u.frames) for u in utts], dtype=np.int64)
    tmax = int(lens.max())
    frames = np.full((len(utts), tmax), cfg.frame_pad_id, dtype=np.int64)
    for i, u in enumerate(utts):
        frames[i, : lens[i]] = u.frames
    return frames, lens


def _token_batch(cfg: M.ArchConfig, utts: Sequence[Utterance], task: str):
    """Teacher-forcing arrays: decoder inputs, labels and the validity mask."""
    if task == "s2tt":
        tag = M.TAG_TGT_ID
        seqs = [cfg.target_ids(u.tgt_tokens) for u in utts]
    elif task == "asr":
        tag = M.TAG_SRC_ID
        seqs = [cfg.source_ids(u.src_tokens) for u in utts]
    else:  # pragma: no cover
        raise AssertionError(task)
    lmax = max(len(s) for s in seqs) + 1  # room for EOS
    tokens = np.full((len(utts), lmax), M.PAD_ID, dtype=np.int64)
    labels = np.full((len(utts), lmax), M.PAD_ID, dtype=np.int64)
    mask = np.zeros((len(utts), lmax), dtype=np.float64)
    for i, s in enumerate(seqs):
        n = len(s)
        labels[i, :n] = s
        labels[i, n] = M.EOS_ID
        mask[i, : n + 1] = 1.0
    # decoder input = labels shifted right behind the task tag
    tokens[:, 0] = tag
    tokens[:, 1:] = labels[:, :-1]
    return tokens, labels, mask


def _batch_iter(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Deterministic epoch-shuffled index batches."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos : pos + batch_size]
        pos += batch_size


class _CsvLog:
    def __init__(self, path: str | None, fieldnames: list[str]):
        self._rows: list[dict] = []
        self._path = path
        self._fields = fieldnames

    def add(self, row: dict) -> None:
        self._rows.append(row)

    def flush(self) -> None:
        if self._path is None:
            return
        with open(self._path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self._fields)
            w.writeheader()
            for row in self._rows:
                w.writerow(row)


def _check_loss_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became non-finite at step {step}")


# -- stages 1 and 2 ---------------------------------------------------------------


def _dev_ce(params: M.ModelParams, dev: Sequence[Utterance], cap: int = 64) -> float:
    if not dev:
        return float("nan")
    dev = dev[:cap]
    cfg = params.cfg
    frames, lens = _pad_frames(cfg, dev)
    enc = M.encode_batch(params, frames)
    tokens, labels, mask = _token_batch(cfg, dev, "s2tt")
    lp, _ = M.decode_batch(params, tokens, enc, lens)
    return float(L.cross_entropy_loss(lp, labels, mask, 0.0))


def _train_ce_stage(
    start: M.ModelParams,
    cfg: TrainConfig,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    truncate: bool,
) -> tuple[M.ModelParams, list[dict], dict, dict]:
    params = start.copy()
    arch = params.cfg
    base_names = set(params.base_names())
    batch_rng = rng_stream(cfg.seed, STREAM_BATCH)
    drop_rng = rng_stream(cfg.seed, STREAM_DROPOUT)
    trunc_rng = rng_stream(cfg.seed, STREAM_TRUNCATE)
    opt = ad.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = _CsvLog(
        cfg.log_path, ["step", "loss", "ce_s2tt", "ce_asr", "grad_norm", "clipped"]
    )
    curve: list[dict] = []
    stats = {"tag_tgt_batches": 0, "tag_src_batches": 0, "clip_engaged": 0}
    for step, idx in enumerate(_batch_iter(len(train), cfg.batch_size, cfg.steps, batch_rng), 1):
        utts = [train[i] for i in idx]
        if truncate:
            utts = [truncate_sample(u, trunc_rng, cfg.p_full) for u in utts]
        frames, lens = _pad_frames(arch, utts)
        tape = ad.Tape()
        ops = M.TapeOps(tape, params, trainable=base_names, dropout_rng=drop_rng, train=True)
        enc = M.encoder_forward(ops, arch, frames)
        tokens, labels, mask = _token_batch(arch, utts, "s2tt")
        lp, _ = M.decoder_forward(ops, arch, tokens, enc, lens)
        ce_tgt = L.cross_entropy_loss(lp, labels, mask, arch.label_smoothing)
        stats["tag_tgt_batches"] += 1
        loss = ce_tgt
        ce_asr_val = 0.0
        if cfg.asr_weight > 0.0:
            tokens_a, labels_a, mask_a = _token_batch(arch, utts, "asr")
            lp_a, _ = M.decoder_forward(ops, arch, tokens_a, enc, lens)
            ce_asr = L.cross_entropy_loss(lp_a, labels_a, mask_a, arch.label_smoothing)
            loss = ce_tgt + ce_asr * cfg.asr_weight
            ce_asr_val = float(ce_asr.data)
            stats["tag_src_batches"] += 1
        _check_loss_finite(float(loss.data), step)
        leaf_grads = ad.backward(tape, loss)
        grads = {t.name: g for t, g in leaf_grads.items()}
        norm, clipped = ad.clip_gradients(grads, cfg.clip_norm)
        stats["clip_engaged"] += int(clipped)
        trainable = {n: params.arrays[n] for n in grads}
        ad.adamw_step(trainable, grads, opt)
        log.add(
            {
                "step": step,
                "loss": repr(float(loss.data)),
                "ce_s2tt": repr(float(ce_tgt.data)),
                "ce_asr": repr(ce_asr_val),
                "grad_norm": repr(norm),
                "clipped": int(clipped),
            }
        )
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            curve.append({"step": step, "dev_ce": _dev_ce(params, dev)})
    log.flush()
    return params, curve, stats, {"batch": batch_rng.bit_generator.state}


def train_stage1(
    cfg: TrainConfig,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    arch: M.ArchConfig | None = None,
    task_params: TaskParams | None = None,
    init: Checkpoint | None = None,
) -> Checkpoint:
    """Full-stream CE training (optionally continuing from a checkpoint)."""
    if cfg.stage != 1:
        raise InvalidArgument("train_stage1 requires cfg.stage == 1")
    if not train:
        raise InvalidArgument("dataset has no train split")
    if init is not None:
        start = init.params
        provenance = list(init.provenance)
    else:
        if arch is None:
            if task_params is None:
                raise InvalidArgument("need arch or task_params to initialize")
            arch = arch_for_task(task_params)
        start = M.init_params(arch, cfg.seed)
        provenance = []
    params, curve, stats, rng_state = _train_ce_stage(start, cfg, train, dev, truncate=False)
    provenance.append({"stage": 1, "seed": cfg.seed, "steps": cfg.steps})
    return Checkpoint(
        params=params,
        stage=1,
        seed=cfg.seed,
        provenance=provenance,
        train_config=cfg.to_dict(),
        rng_state=rng_state,
        curve_log=curve,
        train_stats=stats,
    )


def train_stage2(
    ckpt: Checkpoint, cfg: TrainConfig, train: Sequence[Utterance], dev: Sequence[Utterance]
) -> Checkpoint:
    """Truncated-stream adaptation of a stage-1 checkpoint."""
    if cfg.stage != 2:
        raise InvalidArgument("train_stage2 requires cfg.stage == 2")
    if ckpt.stage != 1:
        raise InvalidArgument("stage-2 training must start from a stage-1 checkpoint")
    if not train:
        raise InvalidArgument("dataset has no train split")
    params, curve, stats, rng_state = _train_ce_stage(
        ckpt.params, cfg, train, dev, truncate=True
    )
    return Checkpoint(
        params=params,
        stage=2,
        seed=cfg.seed,
        provenance=ckpt.provenance + [{"stage": 2, "seed": cfg.seed, "steps": cfg.steps}],
        train_config=cfg.to_dict(),
        rng_state=rng_state,
        curve_log=curve,
        train_stats=stats,
    )


# -- stage 3 -----------------------------------------------------------------------


def _inv_sqrt_lr(base: float, step: int, warmup: int) -> float:
    if warmup <= 0:
        return base * np.sqrt(1.0 / max(1, step))
    if step < warmup:
        return base * step / warmup
    return base * np.sqrt(warmup / step)


def _policy_pass(params: M.ModelParams, utts: Sequence[Utterance], t_draws: np.ndarray):
    """Frozen-base double decode: full-stream and prefix-stream label
    log-probs, plus the partial-pass decoder states feeding the policy."""
    arch = params.cfg
    frames, lens = _pad_frames(arch, utts)
    enc = M.encode_batch(params, frames)
    tokens, labels, mask = _token_batch(arch, utts, "s2tt")
    lp_full_rows, _ = M.decode_batch(params, tokens, enc, lens)
    lp_part_rows, states_part = M.decode_batch(params, tokens, enc, t_draws)
    lp_full = np.take_along_axis(lp_full_rows, labels[..., None], axis=-1)[..., 0]
    lp_part = np.take_along_axis(lp_part_rows, labels[..., None], axis=-1)[..., 0]
    return lp_full_rows, lp_part_rows, lp_full, lp_part, states_part, mask


def _dev_policy_cov(params: M.ModelParams, dev: Sequence[Utterance], seed: int, cap: int = 64) -> float:
    """Covariance between READ scores and the estimated gain on a fixed dev
    slice; the model-selection signal for stage 3."""
    if not dev:
        return float("nan")
    dev = dev[:cap]
    rng = rng_stream(seed, STREAM_POLICY_T, 9999)
    t_draws = np.array([rng.integers(1, len(u.frames) + 1) for u in dev], dtype=np.int64)
    _, _, lp_full, lp_part, states, mask = _policy_pass(params, dev, t_draws)
    q = M.policy_batch(params, states)
    gain = lp_full - lp_part
    sel = mask > 0
    qv, gv = q[sel], gain[sel]
    return float(np.mean(qv * gv) - np.mean(qv) * np.mean(gv))


def train_stage3_policy(
    ckpt: Checkpoint, cfg: TrainConfig, train: Sequence[Utterance], dev: Sequence[Utterance]
) -> Checkpoint:
    """Frozen-base policy-head training with the configured policy loss."""
    if cfg.stage != 3:
        raise InvalidArgument("train_stage3_policy requires cfg.stage == 3")
    if ckpt.stage not in (1, 2):
        raise InvalidArgument("stage-3 training must start from a stage-1 or stage-2 checkpoint")
    if not train:
        raise InvalidArgument("dataset has no train split")
    params = ckpt.params.copy()
    arch = params.cfg
    policy_names = set(params.policy_names())
    batch_rng = rng_stream(cfg.seed, STREAM_BATCH)
    t_rng = rng_stream(cfg.seed, STREAM_POLICY_T)
    opt = ad.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_cfg = L.LossConfig(
        lambda_l2=cfg.lambda_l2, mono_eps=cfg.mono_eps, bn_eps=cfg.bn_eps
    )
    log = _CsvLog(
        cfg.log_path, ["step", "loss", "l_p", "l_m", "l_r", "lr", "grad_norm", "clipped"]
    )
    curve: list[dict] = []
    stats = {"clip_engaged": 0}
    for step, idx in enumerate(_batch_iter(len(train), cfg.batch_size, cfg.steps, batch_rng), 1):
        utts = [train[i] for i in idx]
        t_draws = np.array(
            [t_rng.integers(1, len(u.frames) + 1) for u in utts], dtype=np.int64
        )
        lp_full_rows, lp_part_rows, lp_full, lp_part, states, mask = _policy_pass(
            params, utts, t_draws
        )
        if float(mask.sum()) < 2.0:
            raise InvalidArgument("batch has fewer than 2 valid token positions")
        tape = ad.Tape()
        ops = M.TapeOps(tape, params, trainable=policy_names, train=False)
        q = M.policy_forward(ops, arch, states)
        l_m_val = 0.0
        if cfg.policy_loss == "divergence":
            loss = L.divergence_baseline_loss(
                q, np.exp(lp_part_rows), np.exp(lp_full_rows), mask
            )
            l_p_val = float(loss.data)
            l_r_val = 0.0
        else:
            l_p = L.reina_policy_loss(q, lp_part, lp_full, mask, cfg.bn_eps)
            l_r = L.l2_policy_loss(q, mask)
            if cfg.policy_loss == "reina":
                l_m = L.monotonicity_loss(q, cfg.mono_eps, mask)
                l_m_val = float(l_m.data)
                loss = L.reina_total(l_p, l_m, l_r, cfg.lambda_l2)
            else:  # reina_no_mono
                loss = l_p + l_r * cfg.lambda_l2
            l_p_val = float(l_p.data)
            l_r_val = float(l_r.data)
        _check_loss_finite(float(loss.data), step)
        leaf_grads = ad.backward(tape, loss)
        grads = {t.name: g for t, g in leaf_grads.items()}
        norm, clipped = ad.clip_gradients(grads, cfg.clip_norm)
        stats["clip_engaged"] += int(clipped)
        lr = _inv_sqrt_lr(cfg.lr, step, cfg.warmup_steps)
        trainable = {n: params.arrays[n] for n in grads}
        ad.adamw_step(trainable, grads, opt, lr=lr)
        log.add(
            {
                "step": step,
                "loss": repr(float(loss.data)),
                "l_p": repr(l_p_val),
                "l_m": repr(l_m_val),
                "l_r": repr(l_r_val),
                "lr": repr(lr),
                "grad_norm": repr(norm),
                "clipped": int(clipped),
            }
        )
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            curve.append({"step": step, "dev_cov": _dev_policy_cov(params, dev, cfg.seed)})
    log.flush()
    return Checkpoint(
        params=params,
        stage=3,
        seed=cfg.seed,
        provenance=ckpt.provenance
        + [{"stage": 3, "seed": cfg.seed, "steps": cfg.steps, "policy_loss": cfg.policy_loss}],
        train_config=cfg.to_dict(),
        rng_state={"batch": batch_rng.bit_generator.state},
        curve_log=curve,
        train_stats=stats,
    )


# -- checkpoint files ----------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Lossless JSON serialization (floats via shortest round-trip repr)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "arch_config": ckpt.params.cfg.to_dict(),
        "provenance": ckpt.provenance,
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "curve_log": ckpt.curve_log,
        "train_stats": ckpt.train_stats,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in ckpt.params.arrays.items()
        },
    }
    dump_json(doc, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path!r}")
    try:
        arch = M.ArchConfig.from_dict(doc["arch_config"])
        arrays = {}
        for name, rec in doc["params"].items():
            arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
            arrays[name] = arr
        params = M.ModelParams(arch, arrays)
        return Checkpoint(
            params=params,
            stage=int(doc["stage"]),
            seed=int(doc["seed"]),
            provenance=doc.get("provenance", []),
            train_config=doc.get("train_config", {}),
            rng_state=doc.get("rng_state"),
            curve_log=doc.get("curve_log", []),
            train_stats=doc.get("train_stats", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path!r}: {exc}") from exc
