"""Training objectives: smoothed cross-entropy, the covariance-style policy
loss family (policy term, monotonicity hinge, L2 penalty), and the
divergence-regression baseline.

Every loss accepts the policy scores / log-prob rows either as plain numpy
arrays (metrics, tests, frozen evaluation) or as autodiff tensors (training);
formulas are written once over both. Log-prob differences are always plain
arrays: the translation model is frozen while the policy head trains, so no
gradient flows through them.

Averaging convention: positions are flattened across the batch and averaged
over valid (unmasked) positions. The batch-normalization statistics for the
policy term use the same flattened population.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgument

_NEG_BIG = -1e30


@dataclass(frozen=True)
class LossConfig:
    lambda_l2: float = 0.05
    mono_eps: float = 0.5
    bn_eps: float = 1e-5
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.lambda_l2 < 0.0:
            raise InvalidArgument("lambda_l2 must be >= 0")
        if self.mono_eps < 0.0:
            raise InvalidArgument("mono_eps must be >= 0")


@dataclass
class InfoGainBatch:
    """Per-position log-prob differences and their batch-normalized form."""

    delta: np.ndarray  # logp_partial - logp_full, flattened over the batch
    normalized: np.ndarray  # BN(delta) over valid positions
    mask: np.ndarray  # 1.0 at valid positions


@dataclass
class LossReport:
    l_p: float
    l_m: float
    l_r: float
    l_total: float
    q: np.ndarray
    delta: np.ndarray
    normalized: np.ndarray


def _is_tensor(x) -> bool:
    return isinstance(x, ad.Tensor)


def _values(x) -> np.ndarray:
    return x.data if _is_tensor(x) else np.asarray(x, dtype=np.float64)


def _lift_rows(x):
    """Ensure a leading batch axis: (N,) -> (1, N)."""
    if _is_tensor(x):
        if x.data.ndim == 1:
            return x.reshape((1, x.data.shape[0]))
        return x
    arr = np.asarray(x, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def _prepare_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape != shape:
        raise InvalidArgument(f"mask shape {m.shape} does not match {shape}")
    return m


def _relu(x):
    return x.relu() if _is_tensor(x) else np.maximum(x, 0.0)

def _square(x):
    return x.square() if _is_tensor(x) else x * x


def _total(x) -> "ad.Tensor | float":
    return x.sum() if _is_tensor(x) else float(np.sum(x))


def _gather_last(rows, ids):
    if _is_tensor(rows):
        return rows.gather_last(ids)
    return np.take_along_axis(rows, ids[..., None], axis=-1)[..., 0]


def _shifted_prefix_max(x):
    if _is_tensor(x):
        return x.shifted_prefix_max()
    cm = np.maximum.accumulate(x, axis=-1)
    return np.concatenate([x[..., :1], cm[..., :-1]], axis=-1)


def _scalar(x) -> float:
    return float(x.data) if _is_tensor(x) else float(x)


def cross_entropy_loss(logprob_rows, labels, mask=None, smoothing: float = 0.0):
    """Mean over unmasked positions of the label-smoothed negative
    log-likelihood. The smoothed target spreads ``smoothing`` mass uniformly
    over the whole vocabulary (true class included)."""
    rows = logprob_rows
    if not _is_tensor(rows):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 2:
            rows = rows[None, ...]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[None, :]
    shape = (rows.shape[0], rows.shape[1]) if not _is_tensor(rows) else rows.data.shape[:2]
    if labels.shape != tuple(shape):
        raise InvalidArgument("labels shape does not match logprob rows")
    m = _prepare_mask(mask, tuple(shape))
    cnt = float(m.sum())
    if cnt < 1.0:
        raise InvalidArgument("cross_entropy_loss: all positions are masked")
    vsize = rows.shape[-1] if not _is_tensor(rows) else rows.data.shape[-1]
    lp_label = _gather_last(rows, labels)
    if smoothing > 0.0:
        lp_mean = (rows.sum_last() if _is_tensor(rows) else np.sum(rows, axis=-1)) * (
            1.0 / vsize
        )
        score = lp_label * (1.0 - smoothing) + lp_mean * smoothing
    else:
        score = lp_label
    return _total(score * (-m)) * (1.0 / cnt)


def info_gain_batch(logp_partial, logp_full, mask=None, bn_eps: float = 1e-5) -> InfoGainBatch:
    """Assemble the per-position differences and their normalized form."""
    lp_t = np.asarray(logp_partial, dtype=np.float64)
    lp_T = np.asarray(logp_full, dtype=np.float64)
    if lp_t.ndim == 1:
        lp_t, lp_T = lp_t[None, :], lp_T[None, :]
    if lp_t.shape != lp_T.shape:
        raise InvalidArgument("partial/full log-prob shapes differ")
    m = _prepare_mask(mask, lp_t.shape)
    if float(m.sum()) < 2.0:
        raise InvalidArgument("batch normalization needs at least 2 valid positions")
    delta = lp_t - lp_T
    if not np.all(np.isfinite(delta[m > 0])):
        raise InvalidArgument("non-finite log-prob difference")
    cnt = m.sum()
    mu = (delta * m).sum() / cnt
    var = (((delta - mu) ** 2) * m).sum() / cnt
    normalized = (delta - mu) / np.sqrt(var + bn_eps)
    return InfoGainBatch(delta=delta, normalized=normalized, mask=m)


def reina_policy_loss(q, logp_partial, logp_full, mask=None, bn_eps: float = 1e-5):
    """Mean over valid positions of q * BN(logp_partial - logp_full).

    Minimizing this drives q to covary with the estimated information gain
    (the negated difference), since BN centers the population to mean zero.
    """
    batch = info_gain_batch(logp_partial, logp_full, mask, bn_eps)
    qr = _lift_rows(q)
    cnt = float(batch.mask.sum())
    return _total(qr * (batch.normalized * batch.mask)) * (1.0 / cnt)


def monotonicity_loss(q, eps: float, mask=None):
    """Hinge on drops below the running maximum minus ``eps``.

    Per valid position n: max(max_{m<n} q_m - q_n - eps, 0), where the
    prefix maximum ranges over valid positions only and an empty prefix
    contributes zero. Averaged over valid positions flattened across the
    batch.
    """
    if eps < 0.0:
        raise InvalidArgument("monotonicity eps must be >= 0")
    qr = _lift_rows(q)
    shape = tuple(qr.data.shape if _is_tensor(qr) else qr.shape)
    m = _prepare_mask(mask, shape)
    cnt = float(m.sum())
    if cnt < 1.0:
        raise InvalidArgument("monotonicity_loss: all positions are masked")
    # Masked-out slots are driven to a huge negative value so they never win
    # the prefix max; an all-masked prefix then behaves like an empty one.
    qm = qr * m + (1.0 - m) * _NEG_BIG
    pm = _shifted_prefix_max(qm)
    hinge = _relu(pm - qr - eps)
    return _total(hinge * m) * (1.0 / cnt)


def l2_policy_loss(q, mask=None):
    """Mean of squared scores over valid positions."""
    qr = _lift_rows(q)
    shape = tuple(qr.data.shape if _is_tensor(qr) else qr.shape)
    m = _prepare_mask(mask, shape)
    cnt = float(m.sum())
    if cnt < 1.0:
        raise InvalidArgument("l2_policy_loss: all positions are masked")
    return _total(_square(qr) * m) * (1.0 / cnt)


def reina_total(l_p, l_m, l_r, lam: float):
    """Weighted sum of the three policy-loss components."""
    if lam < 0.0:
        raise InvalidArgument("lambda must be >= 0")
    return l_p + l_m + l_r * lam


def divergence_baseline_loss(q, dist_partial, dist_full, mask=None):
    """Regression baseline: fit q to batch-min-max-normalized KL divergences.

    Per position the target is KL(full || partial) rescaled to [0, 1] within
    the batch (0.5 everywhere when all KLs are equal); the loss is the mean
    squared error between q and the targets over valid positions.
    """
    pf = np.asarray(dist_full, dtype=np.float64)
    pp = np.asarray(dist_partial, dtype=np.float64)
    if pf.ndim == 2:
        pf, pp = pf[None, ...], pp[None, ...]
    if pf.shape != pp.shape:
        raise InvalidArgument("distribution shapes differ")
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(pf > 0.0, pf * (np.log(pf) - np.log(pp)), 0.0)
    kl = contrib.sum(axis=-1)
    m = _prepare_mask(mask, kl.shape)
    cnt = float(m.sum())
    if cnt < 1.0:
        raise InvalidArgument("divergence_baseline_loss: all positions are masked")
    valid = kl[m > 0]
    lo, hi = float(valid.min()), float(valid.max())
    if hi == lo:
        targets = np.full_like(kl, 0.5)
    else:
        targets = (kl - lo) / (hi - lo)
    qr = _lift_rows(q)
    diff = qr - targets
    return _total(_square(diff) * m) * (1.0 / cnt)


def reina_report(q_values, logp_partial, logp_full, mask=None, cfg: LossConfig = LossConfig()) -> LossReport:
    """Plain-array evaluation of all policy-loss components for logging."""
    batch = info_gain_batch(logp_partial, logp_full, mask, cfg.bn_eps)
    q = np.asarray(q_values, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    l_p = _scalar(reina_policy_loss(q, logp_partial, logp_full, mask, cfg.bn_eps))
    l_m = _scalar(monotonicity_loss(q, cfg.mono_eps, mask))
    l_r = _scalar(l2_policy_loss(q, mask))
    return LossReport(
        l_p=l_p,
        l_m=l_m,
        l_r=l_r,
        l_total=reina_total(l_p, l_m, l_r, cfg.lambda_l2),
        q=q,
        delta=batch.delta,
        normalized=batch.normalized,
    )
