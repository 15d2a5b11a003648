"""Pure-NumPy implementations of the hot kernels.

Reference semantics for the numba backend: every function here must agree
with its numba twin up to floating-point summation order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

NAME = "numpy"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def masked_lse_softmax(scores: np.ndarray, mask: np.ndarray):
    """Row softmax over visible keys with max-subtraction.

    scores: (N, Tq, Tk); mask: (Tq, Tk) bool. Returns (probs, lse) where
    probs is zero at masked entries and lse[n, t] = log sum_j exp(scores)
    over visible j, or -inf when row t has no visible key (probs row zero).
    """
    neg_inf = scores.dtype.type(-np.inf)
    masked = np.where(mask, scores, neg_inf)
    m = masked.max(axis=-1)
    finite = np.isfinite(m)
    shift = np.where(finite, m, scores.dtype.type(0.0))
    e = np.exp(masked - shift[..., None])
    z = e.sum(axis=-1)
    safe_z = np.where(z > 0.0, z, scores.dtype.type(1.0))
    probs = e / safe_z[..., None]
    lse = np.where(finite, shift + np.log(safe_z), neg_inf).astype(scores.dtype)
    return probs.astype(scores.dtype, copy=False), lse


def probs_from_lse(scores: np.ndarray, lse: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Recompute softmax probabilities from a stored log-normalizer."""
    neg_inf = scores.dtype.type(-np.inf)
    finite = np.isfinite(lse)
    shift = np.where(finite, lse, scores.dtype.type(0.0))
    masked = np.where(mask & finite[..., None], scores - shift[..., None], neg_inf)
    return np.exp(masked).astype(scores.dtype, copy=False)


def attn_score_grad(
    probs: np.ndarray, dpv: np.ndarray, rho: np.ndarray, glse: np.ndarray
) -> np.ndarray:
    """Gradient w.r.t. attention scores: P * (dPV - rho + glse)."""
    return probs * (dpv - rho[..., None] + glse[..., None])


def rope_rotate(x: np.ndarray, positions: np.ndarray, inv_freq: np.ndarray, sign: float):
    """Rotate interleaved 2-dim pairs of x by sign * position * inv_freq."""
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    c = np.cos(ang)
    s = np.sin(ang) * sign
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def adamw_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    wd: float,
    bc1: float,
    bc2: float,
) -> None:
    """In-place decoupled-weight-decay Adam step on flat arrays.

    bc1/bc2 are the bias-correction denominators 1 - beta^t, precomputed by
    the caller so both backends share the exact step arithmetic.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    update = (m / bc1) / (np.sqrt(v / bc2) + eps)
    p -= lr * (update + wd * p)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * np.square(x)) * _INV_SQRT_2PI
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def xent_rows(logits: np.ndarray, targets: np.ndarray):
    """Per-row cross entropy and unscaled gradient (softmax minus one-hot)."""
    n = logits.shape[0]
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    rows = np.arange(n)
    losses = (np.log(z[:, 0]) + m[:, 0] - logits[rows, targets]).astype(logits.dtype)
    dlogits = probs.astype(logits.dtype, copy=False)
    dlogits[rows, targets] -= 1.0
    return losses, dlogits
