"""Pure-numpy reference implementations of the hot kernels.

Semantics contract shared with the numba twins in ``_numba_impl``:
masked attention entries are exact zeros in the returned weight matrix, all
math is float64, and reductions touch only unmasked positions so that prefix
slices of causal results are reproducible.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def linear2d(x, w, b):
    # x: (N, D), w: (D, K), b: (K,). BLAS may pick different accumulation
    # paths for different N, so cross-length results here agree only to
    # round-off; the numba twin is exactly length-independent.
    return x @ w + b


def log_softmax_fwd(x: np.ndarray) -> np.ndarray:
    # x: (N, V) -> row-wise log softmax
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def log_softmax_bwd(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy - np.exp(y) * np.sum(dy, axis=-1, keepdims=True)


def causal_attention_fwd(q, k, v, scale):
    # q, k, v: (B, H, L, D); row i attends keys j <= i
    L = q.shape[2]
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    invalid = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores = np.where(invalid, NEG_INF, scores)
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.where(invalid, 0.0, np.exp(scores - m))
    attn = e / np.sum(e, axis=-1, keepdims=True)
    out = np.matmul(attn, v)
    return out, attn


def causal_attention_bwd(dout, q, k, v, attn, scale):
    dv = np.matmul(np.swapaxes(attn, -1, -2), dout)
    dattn = np.matmul(dout, np.swapaxes(v, -1, -2))
    # softmax backward; masked entries have attn == 0 so they stay zero
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q) * scale
    return dq, dk, dv


def cross_attention_fwd(q, k, v, klen, scale):
    # q: (B, H, Lq, D), k/v: (B, H, Lk, D), klen: (B,) valid key prefix length
    Lk = k.shape[2]
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    invalid = np.arange(Lk)[None, None, None, :] >= klen[:, None, None, None]
    scores = np.where(invalid, NEG_INF, scores)
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.where(invalid, 0.0, np.exp(scores - m))
    attn = e / np.sum(e, axis=-1, keepdims=True)
    out = np.matmul(attn, v)
    return out, attn


def cross_attention_bwd(dout, q, k, v, attn, klen, scale):
    dv = np.matmul(np.swapaxes(attn, -1, -2), dout)
    dattn = np.matmul(dout, np.swapaxes(v, -1, -2))
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q) * scale
    return dq, dk, dv


def layer_norm_fwd(x, g, b, eps):
    # x: (N, D); population variance, learned affine
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd * g + b
    return y, mu, rstd


def layer_norm_bwd(dy, x, g, mu, rstd):
    xhat = (x - mu) * rstd
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxhat = dy * g
    mean_dxhat = np.mean(dxhat, axis=-1, keepdims=True)
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    # In-place fused AdamW with decoupled weight decay. step is 1-based.
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * weight_decay * p + lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
