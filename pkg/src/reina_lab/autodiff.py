"""Minimal dense float64 tensor engine with reverse-mode differentiation.

Design notes:

* A :class:`Tape` records every created :class:`Tensor` in construction
  order, which is automatically a topological order (an op's inputs exist
  before the op). :func:`backward` replays the tape once, in reverse.
* All data is contiguous float64. Reductions use a fixed summation order
  (numpy's documented pairwise order, or explicit left-to-right loops in the
  numba kernel backend), so execution is deterministic run-to-run.
* Finiteness is always validated for leaf data and loss values; per-op
  output validation is enabled with ``REINA_LAB_CHECK=1`` (or
  :func:`set_check_finite`) since it costs ~30% at micro scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgument
from .util import STREAM_GRADCHECK, rng_stream

_CHECK_FINITE = os.environ.get("REINA_LAB_CHECK", "0") == "1"


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_f64(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{what} contains NaN or Inf")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of the broadcast input."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Ordered op recording; construction order is the topological order."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def leaf(self, data, trainable: bool = False, name: str | None = None) -> "Tensor":
        arr = _as_f64(data)
        _require_finite(arr, f"leaf {name or ''}".strip())
        return Tensor(self, arr, op="leaf", trainable=trainable, name=name)

    def constant(self, data) -> "Tensor":
        return self.leaf(data, trainable=False)


class Tensor:
    """One node on a tape: a float64 array plus its backward closure."""

    __slots__ = ("tape", "data", "grad", "op", "trainable", "name", "_parents", "_bwd")

    def __init__(self, tape, data, op, parents=(), bwd=None, trainable=False, name=None):
        if _CHECK_FINITE and op != "leaf":
            _require_finite(data, f"output of op {op}")
        self.tape = tape
        self.data = data
        self.grad = None
        self.op = op
        self.trainable = trainable
        self.name = name
        self._parents = parents
        self._bwd = bwd
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True promises g is freshly allocated by the caller and not
        # aliased anywhere else, so it can be adopted without a copy.
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    # -- binary ops ---------------------------------------------------------

    def _coerce(self, other):
        """Return (array, tensor_or_None) for a Tensor/array/scalar operand."""
        if isinstance(other, Tensor):
            return other.data, other
        return _as_f64(other), None

    def __add__(self, other):
        od, ot = self._coerce(other)
        out_data = self.data + od
        parents = (self, ot) if ot is not None else (self,)

        def bwd(g, self=self, ot=ot):
            gs = _unbroadcast(g, self.data.shape)
            self._accumulate(gs, own=gs is not g)
            if ot is not None:
                go = _unbroadcast(g, ot.data.shape)
                ot._accumulate(go, own=go is not g)

        return Tensor(self.tape, out_data, "add", parents, bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g, self=self):
            self._accumulate(-g, own=True)

        return Tensor(self.tape, -self.data, "neg", (self,), bwd)

    def __sub__(self, other):
        od, ot = self._coerce(other)
        out_data = self.data - od
        parents = (self, ot) if ot is not None else (self,)

        def bwd(g, self=self, ot=ot):
            gs = _unbroadcast(g, self.data.shape)
            self._accumulate(gs, own=gs is not g)
            if ot is not None:
                ot._accumulate(_unbroadcast(-g, ot.data.shape), own=True)

        return Tensor(self.tape, out_data, "sub", parents, bwd)

    def __rsub__(self, other):
        od, _ = self._coerce(other)
        out_data = od - self.data

        def bwd(g, self=self):
            self._accumulate(_unbroadcast(-g, self.data.shape), own=True)

        return Tensor(self.tape, out_data, "rsub", (self,), bwd)

    def __mul__(self, other):
        od, ot = self._coerce(other)
        out_data = self.data * od
        parents = (self, ot) if ot is not None else (self,)

        def bwd(g, self=self, ot=ot, od=od):
            self._accumulate(_unbroadcast(g * od, self.data.shape), own=True)
            if ot is not None:
                ot._accumulate(_unbroadcast(g * self.data, ot.data.shape), own=True)

        return Tensor(self.tape, out_data, "mul", parents, bwd)

    __rmul__ = __mul__

    def __matmul__(self, other):
        od, ot = self._coerce(other)
        if od.ndim != 2:
            raise InvalidArgument("matmul right operand must be 2-D")
        out_data = self.data @ od
        parents = (self, ot) if ot is not None else (self,)

        def bwd(g, self=self, ot=ot, od=od):
            self._accumulate(g @ od.T, own=True)
            if ot is not None:
                x2 = self.data.reshape(-1, self.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                ot._accumulate(x2.T @ g2, own=True)

        return Tensor(self.tape, out_data, "matmul", parents, bwd)

    # -- unary ops ----------------------------------------------------------

    def relu(self):
        mask = self.data > 0.0

        def bwd(g, self=self, mask=mask):
            self._accumulate(g * mask, own=True)

        return Tensor(self.tape, np.where(mask, self.data, 0.0), "relu", (self,), bwd)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g, self=self, out_data=out_data):
            self._accumulate(g * out_data * (1.0 - out_data), own=True)

        return Tensor(self.tape, out_data, "sigmoid", (self,), bwd)

    def square(self):
        def bwd(g, self=self):
            self._accumulate(g * 2.0 * self.data, own=True)

        return Tensor(self.tape, self.data * self.data, "square", (self,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def bwd(g, self=self, old=old):
            self._accumulate(g.reshape(old))

        return Tensor(
            self.tape, np.ascontiguousarray(self.data.reshape(shape)), "reshape", (self,), bwd
        )

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

        def bwd(g, self=self, inv=inv):
            t = np.ascontiguousarray(g.transpose(inv))
            self._accumulate(t, own=t.base is None and t is not g)

        return Tensor(
            self.tape,
            np.ascontiguousarray(self.data.transpose(axes)),
            "transpose",
            (self,),
            bwd,
        )

    def sum(self):
        out_data = np.asarray(np.sum(self.data))

        def bwd(g, self=self):
            self._accumulate(np.broadcast_to(g, self.data.shape).copy(), own=True)

        return Tensor(self.tape, out_data, "sum", (self,), bwd)

    def sum_last(self):
        out_data = np.sum(self.data, axis=-1)

        def bwd(g, self=self):
            self._accumulate(np.broadcast_to(g[..., None], self.data.shape).copy(), own=True)

        return Tensor(self.tape, out_data, "sum_last", (self,), bwd)

    def log_softmax(self):
        """Row-wise log softmax over the last axis."""
        x2 = self.data.reshape(-1, self.data.shape[-1])
        y2 = kernels.log_softmax_fwd(x2)
        out_data = y2.reshape(self.data.shape)

        def bwd(g, self=self, y2=y2):
            g2 = np.ascontiguousarray(g.reshape(y2.shape))
            self._accumulate(kernels.log_softmax_bwd(g2, y2).reshape(self.data.shape), own=True)

        return Tensor(self.tape, out_data, "log_softmax", (self,), bwd)

    def gather_last(self, ids: np.ndarray):
        """Pick one entry per row along the last axis (ids shape = leading dims)."""
        ids = np.asarray(ids, dtype=np.int64)
        out_data = np.take_along_axis(self.data, ids[..., None], axis=-1)[..., 0]

        def bwd(g, self=self, ids=ids):
            gx = np.zeros_like(self.data)
            np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
            self._accumulate(gx, own=True)

        return Tensor(self.tape, out_data, "gather_last", (self,), bwd)

    def shifted_prefix_max(self):
        """out[..., n] = max(x[..., :n]) for n >= 1; out[..., 0] = x[..., 0].

        The n = 0 slot repeats x itself so that hinge terms built on top of
        it (prefix_max - x - eps) vanish for the first position, realizing
        "the empty prefix contributes zero". Ties route gradient to the
        first (leftmost) maximum.
        """
        x = self.data
        cm = np.maximum.accumulate(x, axis=-1)
        out_data = np.concatenate([x[..., :1], cm[..., :-1]], axis=-1)

        def bwd(g, self=self, x=x):
            gx = np.zeros_like(x)
            lead = x.reshape(-1, x.shape[-1])
            gl = g.reshape(-1, x.shape[-1])
            gxl = gx.reshape(-1, x.shape[-1])
            n = x.shape[-1]
            for r in range(lead.shape[0]):
                gxl[r, 0] += gl[r, 0]
                best = 0
                for j in range(1, n):
                    if lead[r, j - 1] > lead[r, best]:
                        best = j - 1
                    gxl[r, best] += gl[r, j]
            self._accumulate(gx, own=True)

        return Tensor(self.tape, out_data, "shifted_prefix_max", (self,), bwd)

    def layer_norm(self, gain: "Tensor", bias: "Tensor", eps: float = 1e-5):
        d = self.data.shape[-1]
        x2 = np.ascontiguousarray(self.data.reshape(-1, d))
        y2, mu, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, eps)

        def bwd(g, self=self, gain=gain, bias=bias, x2=x2, mu=mu, rstd=rstd):
            g2 = np.ascontiguousarray(g.reshape(-1, x2.shape[-1]))
            dx, dg, db = kernels.layer_norm_bwd(g2, x2, gain.data, mu, rstd)
            self._accumulate(dx.reshape(self.data.shape), own=True)
            gain._accumulate(dg, own=True)
            bias._accumulate(db, own=True)

        return Tensor(
            self.tape, y2.reshape(self.data.shape), "layer_norm", (self, gain, bias), bwd
        )

    def batch_norm_masked(self, mask: np.ndarray, eps: float):
        """Center/scale by masked population statistics (no affine parameters).

        Output at masked-out positions is still (x - mu) * rstd, but those
        positions do not contribute to the statistics.
        """
        mask = np.asarray(mask, dtype=np.float64)
        cnt = float(mask.sum())
        if cnt < 1.0:
            raise InvalidArgument("batch_norm_masked needs at least one valid position")
        x = self.data
        mu = float((x * mask).sum() / cnt)
        xc = x - mu
        var = float((xc * xc * mask).sum() / cnt)
        rstd = 1.0 / np.sqrt(var + eps)
        out_data = xc * rstd

        def bwd(g, self=self, mask=mask, cnt=cnt, xc=xc, rstd=rstd):
            # mu and var see only valid positions, but every output position
            # depends on them, so the statistics corrections take the full
            # downstream gradient
            xhat = xc * rstd
            mean_g = g.sum() / cnt
            mean_g_xhat = (g * xhat).sum() / cnt
            dx = rstd * (g - mask * (mean_g + xhat * mean_g_xhat))
            self._accumulate(dx, own=True)

        return Tensor(self.tape, out_data, "batch_norm_masked", (self,), bwd)


# -- ops that are not natural methods ----------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InvalidArgument("embedding id out of range")
    out_data = table.data[ids]

    def bwd(g, table=table, ids=ids):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(gt, own=True)

    return Tensor(table.tape, out_data, "embedding", (table,), bwd)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    out_data, attn = kernels.causal_attention_fwd(q.data, k.data, v.data, scale)

    def bwd(g, q=q, k=k, v=v, attn=attn):
        dq, dk, dv = kernels.causal_attention_bwd(
            np.ascontiguousarray(g), q.data, k.data, v.data, attn, scale
        )
        q._accumulate(dq, own=True)
        k._accumulate(dk, own=True)
        v._accumulate(dv, own=True)

    return Tensor(q.tape, out_data, "causal_attention", (q, k, v), bwd)


def cross_attention(q: Tensor, k: Tensor, v: Tensor, klen: np.ndarray, scale: float) -> Tensor:
    klen = np.asarray(klen, dtype=np.int64)
    out_data, attn = kernels.cross_attention_fwd(q.data, k.data, v.data, klen, scale)

    def bwd(g, q=q, k=k, v=v, attn=attn, klen=klen):
        dq, dk, dv = kernels.cross_attention_bwd(
            np.ascontiguousarray(g), q.data, k.data, v.data, attn, klen, scale
        )
        q._accumulate(dq, own=True)
        k._accumulate(dk, own=True)
        v._accumulate(dv, own=True)

    return Tensor(q.tape, out_data, "cross_attention", (q, k, v), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws one mask per call from the supplied stream."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * keep


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep; returns gradients for every trainable leaf on the tape."""
    if loss.tape is not tape:
        raise InvalidArgument("loss is not a node of this tape")
    if loss.data.size != 1:
        raise InvalidArgument("backward requires a scalar loss node")
    _require_finite(loss.data, "loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._bwd is not None:
            node._bwd(node.grad)
    grads: dict[Tensor, np.ndarray] = {}
    for node in tape.nodes:
        if node.op == "leaf" and node.trainable:
            grads[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
    return grads


# -- plain-array spec ops -----------------------------------------------------


def log_softmax(v) -> np.ndarray:
    """log softmax over the last axis of a plain array (1-D or rows)."""
    arr = _as_f64(v)
    if arr.size == 0:
        raise InvalidArgument("log_softmax: empty input")
    _require_finite(arr, "log_softmax input")
    rows = arr.reshape(-1, arr.shape[-1])
    return kernels.log_softmax_fwd(rows).reshape(arr.shape)


def batch_norm(values, eps: float) -> np.ndarray:
    """Center and scale by population statistics; no affine parameters."""
    arr = _as_f64(values)
    if arr.size == 0:
        raise InvalidArgument("batch_norm: empty input")
    mu = arr.sum() / arr.size
    xc = arr - mu
    var = (xc * xc).sum() / arr.size
    return xc / np.sqrt(var + eps)


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW state: per-parameter moments plus hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam step, in place over ``params``.

    ``lr`` overrides ``state.lr`` for this step (scheduler hook).
    """
    step_lr = state.lr if lr is None else lr
    if step_lr <= 0.0:
        raise InvalidArgument("adamw_step: lr must be positive")
    for name, p in params.items():
        if name not in grads:
            raise InvalidArgument(f"adamw_step: missing gradient for {name!r}")
        if grads[name].shape != p.shape:
            raise InvalidArgument(f"adamw_step: shape mismatch for {name!r}")
    state.step_count += 1
    for name in sorted(params):
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adamw_update(
            p.reshape(-1),
            np.ascontiguousarray(grads[name].reshape(-1)),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            state.step_count,
            step_lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.weight_decay,
        )
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    """Scale all gradients in place so the global L2 norm is <= max_norm.

    Returns (norm before clipping, whether clipping engaged).
    """
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for name in sorted(grads):
            grads[name] *= factor
        return norm, True
    return norm, False


# -- finite-difference oracle ---------------------------------------------------


def grad_check(
    loss_fn,
    params: dict[str, np.ndarray],
    num_coords: int = 50,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss_value, grads_by_name)`` must be deterministic
    in ``params``. Coordinates are sampled uniformly over all parameters.
    """
    _, grads = loss_fn(params)
    rng = rng_stream(seed, STREAM_GRADCHECK)
    names = sorted(params)
    worst = 0.0
    for _ in range(num_coords):
        name = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(params[name].size))
        orig = params[name].flat[idx]
        params[name].flat[idx] = orig + h
        up, _ = loss_fn(params)
        params[name].flat[idx] = orig - h
        dn, _ = loss_fn(params)
        params[name].flat[idx] = orig
        numeric = (up - dn) / (2.0 * h)
        analytic = float(grads[name].flat[idx])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
