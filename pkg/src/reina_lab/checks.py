"""Gradient-integrity checks: every differentiable op and the full training
losses are validated against central finite differences (h = 1e-5), using
the relative-error measure max|analytic - numeric| / max(|a|, |n|, 1e-8).

Used by the ``gradcheck`` CLI subcommand and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from . import trainer as TR
from .tasks import TaskParams, gen_task
from .util import STREAM_DROPOUT, rng_stream


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    """Random values bounded away from 0 so relu/max kinks stay clear of the
    finite-difference window."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _weighted_sum_loss(build_out):
    """Wrap an op into a scalar loss: sum(out * fixed_weights)."""

    def loss_fn(params):
        tape = ad.Tape()
        leaves = {k: tape.leaf(v, trainable=True, name=k) for k, v in params.items()}
        out, weights = build_out(tape, leaves)
        loss = (out * weights).sum()
        grads = ad.backward(tape, loss)
        return float(loss.data), {t.name: g for t, g in grads.items()}

    return loss_fn


def op_grad_checks(num_coords: int = 60, seed: int = 0) -> dict[str, float]:
    """Max finite-difference relative error per engine op."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def w(shape):
        return rng.normal(size=shape)

    cases = {}

    x34, y34 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    bias4 = rng.normal(size=4)
    w_add = w((3, 4))
    cases["add_broadcast"] = (
        {"x": x34, "b": bias4},
        lambda tape, lv: (lv["x"] + lv["b"], w_add),
    )
    cases["sub"] = ({"x": x34, "y": y34}, lambda tape, lv: (lv["x"] - lv["y"], w_add))
    cases["neg"] = ({"x": x34}, lambda tape, lv: (-lv["x"], w_add))
    cases["mul_broadcast"] = (
        {"x": x34, "b": bias4},
        lambda tape, lv: (lv["x"] * lv["b"], w_add),
    )
    xw, ww = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w_mm = w((2, 3, 5))
    cases["matmul"] = ({"x": xw, "w": ww}, lambda tape, lv: (lv["x"] @ lv["w"], w_mm))
    xr = _away_from_zero(rng, (4, 5))
    w_r = w((4, 5))
    cases["relu"] = ({"x": xr}, lambda tape, lv: (lv["x"].relu(), w_r))
    cases["sigmoid"] = ({"x": x34}, lambda tape, lv: (lv["x"].sigmoid(), w_add))
    cases["square"] = ({"x": x34}, lambda tape, lv: (lv["x"].square(), w_add))
    w_rs = w((12,))
    cases["reshape"] = ({"x": x34}, lambda tape, lv: (lv["x"].reshape((12,)), w_rs))
    w_tr = w((4, 3))
    cases["transpose"] = ({"x": x34}, lambda tape, lv: (lv["x"].transpose((1, 0)), w_tr))
    w_s = w(())
    cases["sum"] = ({"x": x34}, lambda tape, lv: (lv["x"].sum(), w_s))
    w_sl = w((3,))
    cases["sum_last"] = ({"x": x34}, lambda tape, lv: (lv["x"].sum_last(), w_sl))
    xls = rng.normal(size=(3, 6))
    w_ls = w((3, 6))
    cases["log_softmax"] = ({"x": xls}, lambda tape, lv: (lv["x"].log_softmax(), w_ls))
    ids_g = rng.integers(0, 6, size=3)
    w_g = w((3,))
    cases["gather_last"] = (
        {"x": xls},
        lambda tape, lv: (lv["x"].gather_last(ids_g), w_g),
    )
    # well-separated values keep the running max away from ties
    xpm = rng.permutation(np.linspace(-2.0, 2.0, 10)).reshape(2, 5)
    w_pm = w((2, 5))
    cases["shifted_prefix_max"] = (
        {"x": xpm},
        lambda tape, lv: (lv["x"].shifted_prefix_max(), w_pm),
    )
    xln = rng.normal(size=(5, 8))
    g_ln, b_ln = rng.normal(size=8), rng.normal(size=8)
    w_ln = w((5, 8))
    cases["layer_norm"] = (
        {"x": xln, "g": g_ln, "b": b_ln},
        lambda tape, lv: (lv["x"].layer_norm(lv["g"], lv["b"]), w_ln),
    )
    mask_bn = (rng.random(12) < 0.7).astype(np.float64)
    mask_bn[:2] = 1.0
    xbn = rng.normal(size=12)
    w_bn = w((12,))
    cases["batch_norm_masked"] = (
        {"x": xbn},
        lambda tape, lv: (lv["x"].batch_norm_masked(mask_bn, 1e-5), w_bn),
    )
    table = rng.normal(size=(7, 4))
    ids_e = rng.integers(0, 7, size=(2, 3))
    w_e = w((2, 3, 4))
    cases["embedding"] = (
        {"t": table},
        lambda tape, lv: (ad.embedding(lv["t"], ids_e), w_e),
    )
    qkv = {k: rng.normal(size=(2, 2, 4, 3)) for k in ("q", "k", "v")}
    w_at = w((2, 2, 4, 3))
    cases["causal_attention"] = (
        dict(qkv),
        lambda tape, lv: (ad.causal_attention(lv["q"], lv["k"], lv["v"], 0.6), w_at),
    )
    klen = np.array([3, 5])
    kv = {"q": rng.normal(size=(2, 2, 3, 3)), "k": rng.normal(size=(2, 2, 5, 3)), "v": rng.normal(size=(2, 2, 5, 3))}
    w_ca = w((2, 2, 3, 3))
    cases["cross_attention"] = (
        dict(kv),
        lambda tape, lv: (ad.cross_attention(lv["q"], lv["k"], lv["v"], klen, 0.6), w_ca),
    )
    xd = rng.normal(size=(4, 6))
    w_d = w((4, 6))
    cases["dropout"] = (
        {"x": xd},
        lambda tape, lv: (ad.dropout(lv["x"], 0.3, np.random.default_rng(123)), w_d),
    )

    for name, (params, build) in cases.items():
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        results[name] = ad.grad_check(
            _weighted_sum_loss(build), params, num_coords=num_coords, seed=seed
        )
    return results


def _tiny_setup(seed: int = 0):
    task = TaskParams(
        kind="noisy_channel",
        n_src_vocab=3,
        n_tgt_vocab=3,
        n_tokens=2,
        frames_per_token=2,
        noise_rate=0.2,
    )
    utts = gen_task(task, 2, seed=seed)
    arch = TR.arch_for_task(task, d_model=16, n_heads=2, enc_layers=1, dec_layers=1, policy_layers=1)
    params = M.init_params(arch, seed=seed)
    return task, utts, arch, params


def stage1_loss_grad_check(num_coords: int = 50, seed: int = 0) -> float:
    """Full stage-1 objective (dual-task CE with label smoothing and a fixed
    dropout mask) against finite differences, over every base parameter."""
    _, utts, arch, params = _tiny_setup(seed)
    frames, lens = TR._pad_frames(arch, utts)
    tok_t, lab_t, mask_t = TR._token_batch(arch, utts, "s2tt")
    tok_a, lab_a, mask_a = TR._token_batch(arch, utts, "asr")
    base_names = set(params.base_names())
    policy_arrays = {n: params.arrays[n] for n in params.policy_names()}

    def loss_fn(base_arrays):
        p = M.ModelParams(arch, {**base_arrays, **policy_arrays})
        tape = ad.Tape()
        # reseeding per call fixes the dropout masks, keeping the loss
        # deterministic in the parameters
        drop_rng = rng_stream(seed, STREAM_DROPOUT)
        ops = M.TapeOps(tape, p, trainable=base_names, dropout_rng=drop_rng, train=True)
        enc = M.encoder_forward(ops, arch, frames)
        lp_t, _ = M.decoder_forward(ops, arch, tok_t, enc, lens)
        lp_a, _ = M.decoder_forward(ops, arch, tok_a, enc, lens)
        loss = L.cross_entropy_loss(lp_t, lab_t, mask_t, arch.label_smoothing)
        loss = loss + L.cross_entropy_loss(lp_a, lab_a, mask_a, arch.label_smoothing)
        grads = ad.backward(tape, loss)
        out = {t.name: g for t, g in grads.items()}
        return float(loss.data), out

    base = {n: params.arrays[n] for n in base_names}
    return ad.grad_check(loss_fn, base, num_coords=num_coords, seed=seed)


def stage3_loss_grad_check(kind: str = "reina", num_coords: int = 50, seed: int = 0) -> float:
    """Full policy objective through the policy head (base frozen)."""
    _, utts, arch, params = _tiny_setup(seed)
    t_draws = np.array([2, 3], dtype=np.int64)
    lp_full_rows, lp_part_rows, lp_full, lp_part, states, mask = TR._policy_pass(
        params, utts, t_draws
    )
    policy_names = set(params.policy_names())
    # zero-initialized final layer has exactly-zero grads through the hinge;
    # nudge all policy weights so the check probes a generic point
    nudger = np.random.default_rng(seed + 1)
    for name in sorted(policy_names):
        params.arrays[name] = params.arrays[name] + 0.05 * nudger.normal(
            size=params.arrays[name].shape
        )

    def loss_fn(arrays):
        p = M.ModelParams(arch, arrays)
        tape = ad.Tape()
        ops = M.TapeOps(tape, p, trainable=policy_names, train=False)
        q = M.policy_forward(ops, arch, states)
        if kind == "divergence":
            loss = L.divergence_baseline_loss(
                q, np.exp(lp_part_rows), np.exp(lp_full_rows), mask
            )
        else:
            l_p = L.reina_policy_loss(q, lp_part, lp_full, mask)
            l_m = L.monotonicity_loss(q, 0.1, mask)
            l_r = L.l2_policy_loss(q, mask)
            loss = L.reina_total(l_p, l_m, l_r, 0.05)
        grads = ad.backward(tape, loss)
        out = {t.name: g for t, g in grads.items()}
        return float(loss.data), out

    pol = {n: params.arrays[n] for n in policy_names}
    return ad.grad_check(loss_fn, pol, num_coords=num_coords, seed=seed)


def run_all(num_coords: int = 60, seed: int = 0) -> dict[str, float]:
    out = op_grad_checks(num_coords=num_coords, seed=seed)
    out["stage1_full_loss"] = stage1_loss_grad_check(seed=seed)
    out["stage3_reina_loss"] = stage3_loss_grad_check("reina", seed=seed)
    out["stage3_divergence_loss"] = stage3_loss_grad_check("divergence", seed=seed)
    return out
