"""Quality and latency metrics.

BLEU is a self-contained corpus implementation (1-4-gram modified precision,
add-one smoothing on higher orders only when the raw match count is zero,
exponential brevity penalty). Absolute values are not meant to be compared
against other BLEU implementations; within this package only curves and
ratios matter.

AL counts, over the tokens committed no later than the source ended, the
mean difference between each token's commit time and an ideal proportional
pacing. LAAL replaces the pacing denominator with max(reference length,
hypothesis length). NoSE is the area under the piecewise-linear AL/BLEU
curve over [x, y], normalized by the rectangle (y - x) * offline BLEU; it
refuses to extrapolate outside the measured curve.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import decoding as D
from . import model as M
from .errors import InvalidArgument, OutOfDomain
from .tasks import Utterance


@dataclass
class CurvePoint:
    alpha: float  # policy threshold (or k for a wait-k sweep)
    al_s: float
    laal_s: float
    bleu: float
    n_sentences: int


@dataclass
class CurveSpec:
    points: list[CurvePoint]  # sorted by AL
    x: float
    y: float
    offline_bleu: float

    def __post_init__(self):
        if len(self.points) < 2:
            raise InvalidArgument("a curve needs at least 2 points")
        if not self.x < self.y:
            raise InvalidArgument("bounds must satisfy x < y")
        if self.offline_bleu <= 0.0:
            raise InvalidArgument("offline_bleu must be positive")
        self.points = sorted(self.points, key=lambda p: p.al_s)


# -- BLEU ------------------------------------------------------------------------


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU on 0-100 scale over tokenized sequences."""
    if len(hypotheses) != len(references):
        raise InvalidArgument("hypothesis/reference counts differ")
    if not hypotheses:
        raise InvalidArgument("empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hg = _ngrams(hyp, n)
            rg = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rg[g]) for g, c in hg.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        m, t = matches[n - 1], totals[n - 1]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += np.log(m / t)
    bp = float(np.exp(min(0.0, 1.0 - ref_len / hyp_len)))
    return float(100.0 * bp * np.exp(log_sum / 4.0))


# -- latency ------------------------------------------------------------------------


def average_lagging(trace: D.DelayTrace, ref_len: int) -> float:
    """AL in seconds; an empty hypothesis is scored at the total duration."""
    if ref_len < 1:
        raise InvalidArgument("ref_len must be >= 1")
    d = trace.delays_s
    if not d:
        return trace.total_s
    tau = len(d)
    for i, di in enumerate(d, start=1):
        if di >= trace.total_s:
            tau = i
            break
    step = trace.total_s / ref_len
    return float(sum(d[i] - i * step for i in range(tau)) / tau)


def laal(trace: D.DelayTrace, ref_len: int, hyp_len: int) -> float:
    """Length-adaptive AL: pacing denominator max(ref_len, hyp_len)."""
    return average_lagging(trace, max(ref_len, hyp_len))


# -- NoSE ------------------------------------------------------------------------


def _merge_equal_al(points: list[CurvePoint]) -> list[tuple[float, float]]:
    """(AL, BLEU) pairs with identical-AL points averaged (piecewise-linear
    interpolation needs a function of AL)."""
    merged: list[tuple[float, float]] = []
    i = 0
    pts = sorted(points, key=lambda p: p.al_s)
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].al_s == pts[i].al_s:
            j += 1
        merged.append((pts[i].al_s, float(np.mean([p.bleu for p in pts[i:j]]))))
        i = j
    return merged


def _interp(xy: list[tuple[float, float]], x: float) -> float:
    for (x0, y0), (x1, y1) in zip(xy, xy[1:]):
        if x0 <= x <= x1:
            if x1 == x0:
                return y0
            w = (x - x0) / (x1 - x0)
            return y0 * (1 - w) + y1 * w
    raise OutOfDomain(f"AL={x} outside the measured curve")


def nose(curve: CurveSpec) -> float:
    """Area under the curve over [x, y] divided by (y - x) * offline BLEU."""
    xy = _merge_equal_al(curve.points)
    lo, hi = xy[0][0], xy[-1][0]
    if curve.x < lo or curve.y > hi:
        raise OutOfDomain(
            f"bounds [{curve.x}, {curve.y}] not covered by the curve "
            f"[{lo}, {hi}]; refusing to extrapolate"
        )
    knots = [curve.x] + [x for x, _ in xy if curve.x < x < curve.y] + [curve.y]
    area = 0.0
    for a, b in zip(knots, knots[1:]):
        area += 0.5 * (_interp(xy, a) + _interp(xy, b)) * (b - a)
    return float(area / ((curve.y - curve.x) * curve.offline_bleu))


def lowest_latency_at_bleu(curve_points: list[CurvePoint], level: float) -> float | None:
    """Smallest AL at which the piecewise-linear curve reaches >= level."""
    xy = _merge_equal_al(curve_points)
    if xy[0][1] >= level:
        return xy[0][0]
    for (x0, y0), (x1, y1) in zip(xy, xy[1:]):
        hi = max(y0, y1)
        if hi < level:
            continue
        if y1 == y0:
            return x0 if y0 >= level else x1
        w = (level - y0) / (y1 - y0)
        if 0.0 <= w <= 1.0:
            return x0 + w * (x1 - x0)
        if y1 >= level:
            return x1
    return None


# -- sweeps ------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[dict]
    offline_bleu: float

    def points(self) -> list[CurvePoint]:
        return [
            CurvePoint(
                alpha=r["alpha"],
                al_s=r["AL_s"],
                laal_s=r["LAAL_s"],
                bleu=r["BLEU"],
                n_sentences=r["n_sentences"],
            )
            for r in self.rows
        ]

    def curve(self, x: float | None = None, y: float | None = None) -> CurveSpec:
        pts = self.points()
        als = sorted(p.al_s for p in pts)
        if x is None:
            x = als[0]
        if y is None:
            y = als[-1]
        return CurveSpec(points=pts, x=x, y=y, offline_bleu=self.offline_bleu)


def score_decode_records(records: list[dict]) -> dict:
    """Corpus BLEU plus mean AL/LAAL over a list of decode-log records."""
    if not records:
        raise InvalidArgument("no decode records")
    hyps = [r["tokens"] for r in records]
    refs = [r["ref_tokens"] for r in records]
    bleu = corpus_bleu(hyps, refs)
    als, laals = [], []
    n_empty = 0
    for r in records:
        trace = D.DelayTrace(delays_s=list(r["d_i"]), total_s=r["T_s"])
        ref_len = max(1, len(r["ref_tokens"]))
        if not trace.delays_s:
            n_empty += 1
        als.append(average_lagging(trace, ref_len))
        laals.append(laal(trace, ref_len, len(r["tokens"])))
    return {
        "BLEU": bleu,
        "AL_s": float(np.mean(als)),
        "LAAL_s": float(np.mean(laals)),
        "n_sentences": len(records),
        "n_empty_hyp": n_empty,
    }


def sweep_curve(
    params: M.ModelParams,
    utts: Sequence[Utterance],
    alphas: Sequence[float],
    decode_cfg: D.DecodeConfig,
    mode: str = "stream",
) -> SweepResult:
    """Stream-decode the split at every threshold (or every k for a wait-k
    sweep) and attach the offline reference point."""
    if not alphas:
        raise InvalidArgument("alpha list is empty")
    seen = []
    for a in alphas:
        if a in seen:
            warnings.warn(f"duplicate sweep value {a} dropped", stacklevel=2)
        else:
            seen.append(a)
    offline_records = D.decode_split(params, utts, "offline", decode_cfg)
    offline_bleu = score_decode_records(offline_records)["BLEU"]
    rows = []
    for a in seen:
        if mode == "stream":
            from dataclasses import replace

            cfg_a = replace(decode_cfg, alpha=float(a), policy="learned")
            records = D.decode_split(params, utts, "stream", cfg_a)
        elif mode == "waitk":
            records = D.decode_split(params, utts, "waitk", decode_cfg, k=int(a))
        else:
            raise InvalidArgument(f"unknown sweep mode {mode!r}")
        score = score_decode_records(records)
        score["alpha"] = float(a)
        score["offline_bleu"] = offline_bleu
        rows.append(score)
    rows.sort(key=lambda r: r["AL_s"])
    return SweepResult(rows=rows, offline_bleu=offline_bleu)


CURVE_FIELDS = ["alpha", "AL_s", "LAAL_s", "BLEU", "n_sentences", "offline_bleu"]


def write_curve_csv(result: SweepResult, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in result.rows:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in CURVE_FIELDS})


def read_curve_csv(path: str) -> SweepResult:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "alpha": float(rec["alpha"]),
                    "AL_s": float(rec["AL_s"]),
                    "LAAL_s": float(rec["LAAL_s"]),
                    "BLEU": float(rec["BLEU"]),
                    "n_sentences": int(rec["n_sentences"]),
                    "offline_bleu": float(rec["offline_bleu"]),
                }
            )
    if not rows:
        raise InvalidArgument(f"no curve rows in {path!r}")
    return SweepResult(rows=rows, offline_bleu=rows[0]["offline_bleu"])
