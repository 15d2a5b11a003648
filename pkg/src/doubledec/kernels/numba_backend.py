"""Numba @njit implementations of the hot kernels.

Same signatures and semantics as numpy_backend; explicit loops let numba
fuse the mask test, max-subtraction, and normalization into one pass per
query row. Outer loops are prange-parallel with disjoint writes only (no
cross-thread reductions) and fastmath stays off, so results are bitwise
reproducible run-to-run regardless of thread count.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

NAME = "numba"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True, parallel=True)
def masked_lse_softmax(scores, mask):
    n_mat, t_q, t_k = scores.shape
    probs = np.zeros_like(scores)
    lse = np.empty((n_mat, t_q), dtype=scores.dtype)
    for nt in prange(n_mat * t_q):
        n = nt // t_q
        t = nt % t_q
        m = -np.inf
        for s in range(t_k):
            if mask[t, s] and scores[n, t, s] > m:
                m = scores[n, t, s]
        if m == -np.inf:
            lse[n, t] = -np.inf
            continue
        z = 0.0
        for s in range(t_k):
            if mask[t, s]:
                e = math.exp(scores[n, t, s] - m)
                probs[n, t, s] = e
                z += e
        inv = 1.0 / z
        for s in range(t_k):
            probs[n, t, s] *= inv
        lse[n, t] = m + math.log(z)
    return probs, lse


@njit(cache=True, parallel=True)
def probs_from_lse(scores, lse, mask):
    n_mat, t_q, t_k = scores.shape
    probs = np.zeros_like(scores)
    for nt in prange(n_mat * t_q):
        n = nt // t_q
        t = nt % t_q
        shift = lse[n, t]
        if shift == -np.inf:
            continue
        for s in range(t_k):
            if mask[t, s]:
                probs[n, t, s] = math.exp(scores[n, t, s] - shift)
    return probs


@njit(cache=True, parallel=True)
def attn_score_grad(probs, dpv, rho, glse):
    n_mat, t_q, t_k = probs.shape
    out = np.empty_like(probs)
    for n in prange(n_mat):
        for t in range(t_q):
            base = glse[n, t] - rho[n, t]
            for s in range(t_k):
                out[n, t, s] = probs[n, t, s] * (dpv[n, t, s] + base)
    return out


@njit(cache=True, parallel=True)
def rope_rotate(x, positions, inv_freq, sign):
    n_mat, t_len, d_head = x.shape
    half = d_head // 2
    out = np.empty_like(x)
    for t in prange(t_len):
        pos = float(positions[t])
        for i in range(half):
            ang = pos * inv_freq[i]
            c = math.cos(ang)
            s = math.sin(ang) * sign
            for n in range(n_mat):
                x0 = x[n, t, 2 * i]
                x1 = x[n, t, 2 * i + 1]
                out[n, t, 2 * i] = x0 * c - x1 * s
                out[n, t, 2 * i + 1] = x0 * s + x1 * c
    return out


@njit(cache=True, parallel=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    for i in prange(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        update = (mi / bc1) / (math.sqrt(vi / bc2) + eps)
        p[i] = p[i] - lr * (update + wd * p[i])


@njit(cache=True, parallel=True)
def gelu(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in prange(flat.shape[0]):
        xi = flat[i]
        out[i] = 0.5 * xi * (1.0 + math.erf(xi * _INV_SQRT2))
    return out.reshape(x.shape)


@njit(cache=True, parallel=True)
def gelu_grad(x, dy):
    xf = x.ravel()
    df = dy.ravel()
    out = np.empty_like(xf)
    for i in prange(xf.shape[0]):
        xi = xf[i]
        cdf = 0.5 * (1.0 + math.erf(xi * _INV_SQRT2))
        pdf = math.exp(-0.5 * xi * xi) * _INV_SQRT_2PI
        out[i] = df[i] * (cdf + xi * pdf)
    return out.reshape(x.shape)


@njit(cache=True, parallel=True)
def xent_rows(logits, targets):
    n_rows, n_cls = logits.shape
    losses = np.empty(n_rows, dtype=logits.dtype)
    dlogits = np.empty_like(logits)
    for i in prange(n_rows):
        m = logits[i, 0]
        for j in range(1, n_cls):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(n_cls):
            e = math.exp(logits[i, j] - m)
            dlogits[i, j] = e
            z += e
        inv = 1.0 / z
        for j in range(n_cls):
            dlogits[i, j] *= inv
        losses[i] = math.log(z) + m - logits[i, targets[i]]
        dlogits[i, targets[i]] -= 1.0
    return losses, dlogits
