"""Numba @njit twins of the hot kernels.

Loops are written left-to-right over unmasked positions only, no fastmath and
no threading, so results are deterministic and causal prefixes reproduce
exactly. Signatures and return conventions match ``_numpy_impl``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def linear2d(x, w, b):
    # (i, k, j) loop order: contiguous inner writes vectorize, and each
    # output row is computed identically whatever the row count.
    n, d = x.shape
    kdim = w.shape[1]
    out = np.empty((n, kdim))
    for i in range(n):
        for j in range(kdim):
            out[i, j] = b[j]
        for k in range(d):
            xv = x[i, k]
            for j in range(kdim):
                out[i, j] += xv * w[k, j]
    return out


@njit(cache=True)
def log_softmax_fwd(x):
    n, vsz = x.shape
    out = np.empty((n, vsz))
    for i in range(n):
        m = x[i, 0]
        for j in range(1, vsz):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(vsz):
            z += np.exp(x[i, j] - m)
        lse = m + np.log(z)
        for j in range(vsz):
            out[i, j] = x[i, j] - lse
    return out


@njit(cache=True)
def log_softmax_bwd(dy, y):
    n, vsz = y.shape
    dx = np.empty((n, vsz))
    for i in range(n):
        s = 0.0
        for j in range(vsz):
            s += dy[i, j]
        for j in range(vsz):
            dx[i, j] = dy[i, j] - np.exp(y[i, j]) * s
    return dx


@njit(cache=True)
def causal_attention_fwd(q, k, v, scale):
    B, H, L, D = q.shape
    out = np.zeros((B, H, L, D))
    attn = np.zeros((B, H, L, L))
    for b in range(B):
        for h in range(H):
            for i in range(L):
                m = -np.inf
                for j in range(i + 1):
                    s = 0.0
                    for d in range(D):
                        s += q[b, h, i, d] * k[b, h, j, d]
                    s *= scale
                    attn[b, h, i, j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(i + 1):
                    e = np.exp(attn[b, h, i, j] - m)
                    attn[b, h, i, j] = e
                    z += e
                inv = 1.0 / z
                for j in range(i + 1):
                    a = attn[b, h, i, j] * inv
                    attn[b, h, i, j] = a
                    for d in range(D):
                        out[b, h, i, d] += a * v[b, h, j, d]
    return out, attn


@njit(cache=True)
def causal_attention_bwd(dout, q, k, v, attn, scale):
    B, H, L, D = q.shape
    dq = np.zeros((B, H, L, D))
    dk = np.zeros((B, H, L, D))
    dv = np.zeros((B, H, L, D))
    for b in range(B):
        for h in range(H):
            for i in range(L):
                dot = 0.0
                for j in range(i + 1):
                    da = 0.0
                    for d in range(D):
                        da += dout[b, h, i, d] * v[b, h, j, d]
                    dot += da * attn[b, h, i, j]
                for j in range(i + 1):
                    a = attn[b, h, i, j]
                    da = 0.0
                    for d in range(D):
                        da += dout[b, h, i, d] * v[b, h, j, d]
                        dv[b, h, j, d] += a * dout[b, h, i, d]
                    ds = a * (da - dot) * scale
                    for d in range(D):
                        dq[b, h, i, d] += ds * k[b, h, j, d]
                        dk[b, h, j, d] += ds * q[b, h, i, d]
    return dq, dk, dv


@njit(cache=True)
def cross_attention_fwd(q, k, v, klen, scale):
    B, H, Lq, D = q.shape
    out = np.zeros((B, H, Lq, D))
    attn = np.zeros((B, H, Lq, k.shape[2]))
    for b in range(B):
        n = klen[b]
        for h in range(H):
            for i in range(Lq):
                m = -np.inf
                for j in range(n):
                    s = 0.0
                    for d in range(D):
                        s += q[b, h, i, d] * k[b, h, j, d]
                    s *= scale
                    attn[b, h, i, j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(n):
                    e = np.exp(attn[b, h, i, j] - m)
                    attn[b, h, i, j] = e
                    z += e
                inv = 1.0 / z
                for j in range(n):
                    a = attn[b, h, i, j] * inv
                    attn[b, h, i, j] = a
                    for d in range(D):
                        out[b, h, i, d] += a * v[b, h, j, d]
    return out, attn


@njit(cache=True)
def cross_attention_bwd(dout, q, k, v, attn, klen, scale):
    B, H, Lq, D = q.shape
    dq = np.zeros((B, H, Lq, D))
    dk = np.zeros((B, H, k.shape[2], D))
    dv = np.zeros((B, H, k.shape[2], D))
    for b in range(B):
        n = klen[b]
        for h in range(H):
            for i in range(Lq):
                dot = 0.0
                for j in range(n):
                    da = 0.0
                    for d in range(D):
                        da += dout[b, h, i, d] * v[b, h, j, d]
                    dot += da * attn[b, h, i, j]
                for j in range(n):
                    a = attn[b, h, i, j]
                    da = 0.0
                    for d in range(D):
                        da += dout[b, h, i, d] * v[b, h, j, d]
                        dv[b, h, j, d] += a * dout[b, h, i, d]
                    ds = a * (da - dot) * scale
                    for d in range(D):
                        dq[b, h, i, d] += ds * k[b, h, j, d]
                        dk[b, h, j, d] += ds * q[b, h, i, d]
    return dq, dk, dv


@njit(cache=True)
def layer_norm_fwd(x, g, b, eps):
    n, d = x.shape
    y = np.empty((n, d))
    mu = np.empty((n, 1))
    rstd = np.empty((n, 1))
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        m = s / d
        var = 0.0
        for j in range(d):
            c = x[i, j] - m
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        mu[i, 0] = m
        rstd[i, 0] = r
        for j in range(d):
            y[i, j] = (x[i, j] - m) * r * g[j] + b[j]
    return y, mu, rstd


@njit(cache=True)
def layer_norm_bwd(dy, x, g, mu, rstd):
    n, d = x.shape
    dx = np.empty((n, d))
    dg = np.zeros(d)
    db = np.zeros(d)
    for i in range(n):
        m = mu[i, 0]
        r = rstd[i, 0]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - m) * r
            dxh = dy[i, j] * g[j]
            s1 += dxh
            s2 += dxh * xhat
            dg[j] += dy[i, j] * xhat
            db[j] += dy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            xhat = (x[i, j] - m) * r
            dx[i, j] = r * (dy[i, j] * g[j] - s1 - xhat * s2)
    return dx, dg, db


@njit(cache=True)
def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    n = p.shape[0]
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * weight_decay * p[i] + lr * (m[i] / bc1) / (
            np.sqrt(v[i] / bc2) + eps
        )
