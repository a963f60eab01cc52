"""End-to-end experiment pipelines: dataset -> stages -> sweeps -> ablation
tables. The CLI `ablate` subcommand and the acceptance suite both drive these
functions, so a paper-style comparison is always a one-call reproduction.

Every artifact is written under a run directory and reused when present
(byte-identical reruns under the determinism contract); ``force=True``
regenerates.
"""

from __future__ import annotations

import os

from . import metrics as MT
from . import trainer as TR
from .config import ExperimentConfig
from .errors import InvalidArgument
from .tasks import gen_task, load_dataset, save_dataset, split_utterances
from .trainer import Checkpoint, load_checkpoint, save_checkpoint

ABLATIONS = ("monotonicity", "truncation", "baseline")


def ensure_dataset(cfg: ExperimentConfig, out_dir: str, force: bool = False):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "dataset.jsonl")
    if force or not os.path.exists(path):
        utts = gen_task(cfg.task, cfg.data.count, cfg.data.seed)
        save_dataset(utts, cfg.task, path)
    utts, _ = load_dataset(path)
    return utts, split_utterances(utts)


def _cached_stage(path: str, force: bool, builder) -> Checkpoint:
    if not force and os.path.exists(path):
        return load_checkpoint(path)
    ckpt = builder()
    save_checkpoint(ckpt, path)
    return ckpt


def base_checkpoints(
    cfg: ExperimentConfig, splits, seed: int, out_dir: str, force: bool = False
) -> tuple[Checkpoint, Checkpoint]:
    """Stage-1 and stage-2 checkpoints for one seed, cached on disk."""
    os.makedirs(out_dir, exist_ok=True)
    arch = TR.arch_for_task(cfg.task, **cfg.arch)
    ck1 = _cached_stage(
        os.path.join(out_dir, f"stage1_seed{seed}.json"),
        force,
        lambda: TR.train_stage1(
            cfg.stage_config(1, seed=seed), splits["train"], splits["dev"], arch=arch
        ),
    )
    ck2 = _cached_stage(
        os.path.join(out_dir, f"stage2_seed{seed}.json"),
        force,
        lambda: TR.train_stage2(ck1, cfg.stage_config(2, seed=seed), splits["train"], splits["dev"]),
    )
    return ck1, ck2


def _sweep_cached(path: str, force: bool, builder) -> MT.SweepResult:
    if not force and os.path.exists(path):
        return MT.read_curve_csv(path)
    result = builder()
    MT.write_curve_csv(result, path)
    return result


def system_curves(
    cfg: ExperimentConfig,
    splits,
    systems: dict[str, Checkpoint],
    seed: int,
    out_dir: str,
    include_waitk: bool = False,
    force: bool = False,
) -> dict[str, MT.SweepResult]:
    """Threshold sweeps on the test split for each named system."""
    curves: dict[str, MT.SweepResult] = {}
    test = splits["test"]
    for name, ckpt in systems.items():
        curves[name] = _sweep_cached(
            os.path.join(out_dir, f"curve_{name}_seed{seed}.csv"),
            force,
            lambda ckpt=ckpt: MT.sweep_curve(
                ckpt.params, test, cfg.sweep.alphas, cfg.decode, mode="stream"
            ),
        )
    if include_waitk:
        base = next(iter(systems.values()))
        curves["waitk"] = _sweep_cached(
            os.path.join(out_dir, f"curve_waitk_seed{seed}.csv"),
            force,
            lambda: MT.sweep_curve(
                base.params, test, [float(k) for k in cfg.sweep.waitk_ks], cfg.decode, mode="waitk"
            ),
        )
    return curves


def shared_bounds(curves: dict[str, MT.SweepResult], explicit=None) -> tuple[float, float]:
    """Widest [x, y] covered by every system's measured curve."""
    if explicit is not None:
        return float(explicit[0]), float(explicit[1])
    lows, highs = [], []
    for res in curves.values():
        als = sorted(p.al_s for p in res.points())
        lows.append(als[0])
        highs.append(als[-1])
    x, y = max(lows), min(highs)
    if not x < y:
        raise InvalidArgument(
            f"system curves do not overlap: shared bounds would be [{x}, {y}]"
        )
    return x, y


def nose_table(curves: dict[str, MT.SweepResult], bounds=None) -> dict:
    x, y = shared_bounds(curves, bounds)
    table = {
        name: MT.nose(res.curve(x, y)) for name, res in sorted(curves.items())
    }
    return {"x": x, "y": y, "nose": table}


def run_seed_systems(
    cfg: ExperimentConfig,
    splits,
    seed: int,
    out_dir: str,
    kinds: dict[str, tuple[str, int]],
    force: bool = False,
) -> dict[str, Checkpoint]:
    """Train the requested stage-3 systems for one seed.

    ``kinds`` maps system name -> (policy loss kind, base stage 1 or 2).
    """
    ck1, ck2 = base_checkpoints(cfg, splits, seed, out_dir, force)
    bases = {1: ck1, 2: ck2}
    systems: dict[str, Checkpoint] = {}
    for name, (loss_kind, base_stage) in kinds.items():
        systems[name] = _cached_stage(
            os.path.join(out_dir, f"stage3_{name}_seed{seed}.json"),
            force,
            lambda loss_kind=loss_kind, base_stage=base_stage: TR.train_stage3_policy(
                bases[base_stage],
                cfg.stage_config(3, seed=seed, policy_loss=loss_kind),
                splits["train"],
                splits["dev"],
            ),
        )
    return systems


def ablate(cfg: ExperimentConfig, which: str, out_dir: str, force: bool = False) -> dict:
    """Run one paired ablation across the config's seeds; returns the table."""
    if which not in ABLATIONS:
        raise InvalidArgument(f"unknown ablation {which!r}")
    utts, splits = ensure_dataset(cfg, out_dir, force=False)
    per_seed = []
    for seed in cfg.seeds:
        if which == "monotonicity":
            systems = run_seed_systems(
                cfg,
                splits,
                seed,
                out_dir,
                {"reina": ("reina", 2), "no_mono": ("reina_no_mono", 2)},
                force,
            )
            curves = system_curves(cfg, splits, systems, seed, out_dir, force=force)
            entry = dict(nose_table(curves, cfg.sweep.bounds), seed=seed)
            level = min(max(p.bleu for p in res.points()) for res in curves.values())
            entry["matched_bleu"] = level
            entry["al_at_matched"] = {
                name: MT.lowest_latency_at_bleu(res.points(), level)
                for name, res in sorted(curves.items())
            }
        elif which == "truncation":
            systems = run_seed_systems(
                cfg,
                splits,
                seed,
                out_dir,
                {"reina": ("reina", 2), "no_trunc": ("reina", 1)},
                force,
            )
            curves = system_curves(cfg, splits, systems, seed, out_dir, force=force)
            entry = dict(nose_table(curves, cfg.sweep.bounds), seed=seed)
        else:  # baseline
            systems = run_seed_systems(
                cfg,
                splits,
                seed,
                out_dir,
                {"reina": ("reina", 2), "divergence": ("divergence", 2)},
                force,
            )
            curves = system_curves(
                cfg, splits, systems, seed, out_dir, include_waitk=True, force=force
            )
            entry = dict(nose_table(curves, cfg.sweep.bounds), seed=seed)
        per_seed.append(entry)
    return {"which": which, "seeds": cfg.seeds, "per_seed": per_seed}


def format_ablation_table(result: dict) -> str:
    names = sorted(result["per_seed"][0]["nose"])
    lines = []
    header = "seed  bounds[x,y]        " + "  ".join(f"{n:>12}" for n in names)
    lines.append(header)
    for entry in result["per_seed"]:
        row = f"{entry['seed']:>4}  [{entry['x']:.3f}, {entry['y']:.3f}]  " + "  ".join(
            f"{entry['nose'][n]:>12.4f}" for n in names
        )
        lines.append(row)
        if "al_at_matched" in entry:
            al = entry["al_at_matched"]
            lines.append(
                "      AL@BLEU>={:.2f}: ".format(entry["matched_bleu"])
                + ", ".join(f"{n}={al[n]:.3f}" if al[n] is not None else f"{n}=n/a" for n in names)
            )
    return "\n".join(lines)
