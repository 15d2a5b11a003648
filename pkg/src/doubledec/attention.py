"""Masked scaled dot-product attention with log-sum-exp bookkeeping.

Each attention source returns, per query, both the convex combination of
visible values and the log of its softmax denominator. Two sources computed
under disjoint masks can then be recombined exactly into the single softmax
over the union of their keys (lse_merge); dual_key_oracle computes that
union softmax directly, by per-row concatenation, and is the correctness
reference for the merge.

All functions accept leading batch/head dimensions; masks are (Tq, Tk) and
shared across them. Rows with no visible key get a zero output row and a
log-normalizer of -inf, which the merge treats as "contributes nothing".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .masks import AttentionMaskPair
from .opcount import matmul as _mm


class ShapeMismatch(ValueError):
    """Operand shapes do not agree."""


class BothEmpty(ValueError):
    """Some query row has no visible key under either source."""


@dataclass(frozen=True)
class PartialAttention:
    """Per-query attention output plus its log-sum-exp normalizer.

    output: (..., Tq, d_head); lse: (..., Tq), -inf exactly on rows whose
    visible key set is empty (those output rows are all-zero).
    """

    output: np.ndarray
    lse: np.ndarray


def _check_sdpa_shapes(q, k, v, mask):
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeMismatch("Q, K, V need at least (tokens, d_head) dims")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"d_head mismatch: Q {q.shape} vs K {k.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"K/V token dims differ: {k.shape} vs {v.shape}")
    if mask.shape != (q.shape[-2], k.shape[-2]):
        raise ShapeMismatch(
            f"mask shape {mask.shape} != (Tq, Tk) = {(q.shape[-2], k.shape[-2])}"
        )


def sdpa(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray,
    scale: float | None = None,
) -> PartialAttention:
    """Masked attention returning outputs and per-row log-normalizers.

    Logits are scale * <q_t, k_s> over visible s; softmax is computed with
    max-subtraction, so logit magnitudes up to ~80 stay finite.
    """
    _check_sdpa_shapes(q, k, v, mask)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = scale * _mm(q, np.swapaxes(k, -1, -2), tag="attn.scores")
    lead = scores.shape[:-2]
    tq, tk = scores.shape[-2:]
    probs, lse = kernels.masked_lse_softmax(
        np.ascontiguousarray(scores).reshape(-1, tq, tk), np.ascontiguousarray(mask)
    )
    out = _mm(probs.reshape(*lead, tq, tk), v, tag="attn.values")
    return PartialAttention(output=out, lse=lse.reshape(*lead, tq))


def sdpa_backward(
    g_out: np.ndarray,
    g_lse: np.ndarray,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray,
    scale: float,
    result: PartialAttention,
):
    """Gradients of sdpa w.r.t. (q, k, v).

    Probabilities are recomputed from the stored log-normalizer instead of
    being kept from the forward pass, so the forward only has to retain
    (output, lse). g_lse carries the gradient flowing into the normalizer
    (nonzero when the result feeds an lse_merge).
    """
    lead = g_out.shape[:-2]
    tq, tk = q.shape[-2], k.shape[-2]
    scores = scale * np.matmul(q, np.swapaxes(k, -1, -2))
    probs = kernels.probs_from_lse(
        np.ascontiguousarray(scores).reshape(-1, tq, tk),
        np.ascontiguousarray(result.lse).reshape(-1, tq),
        np.ascontiguousarray(mask),
    )
    dpv = np.matmul(g_out, np.swapaxes(v, -1, -2))
    rho = np.sum(g_out * result.output, axis=-1)
    dscores = kernels.attn_score_grad(
        probs,
        np.ascontiguousarray(dpv).reshape(-1, tq, tk),
        np.ascontiguousarray(rho).reshape(-1, tq),
        np.ascontiguousarray(g_lse).reshape(-1, tq),
    ).reshape(*lead, tq, tk)
    dq = scale * np.matmul(dscores, k)
    dk = scale * np.matmul(np.swapaxes(dscores, -1, -2), q)
    dv = np.matmul(np.swapaxes(probs.reshape(*lead, tq, tk), -1, -2), g_out)
    return dq, dk, dv


def merge_weights(lse_a: np.ndarray, lse_b: np.ndarray) -> np.ndarray:
    """Weight of source `a` per row: sigmoid(lse_a - lse_b), inf-safe."""
    both_empty = np.isneginf(lse_a) & np.isneginf(lse_b)
    if np.any(both_empty):
        raise BothEmpty(f"{int(both_empty.sum())} rows have no visible keys in either source")
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(lse_b - lse_a))


def lse_merge(a: PartialAttention, b: PartialAttention) -> np.ndarray:
    """Exact recombination of two disjoint-mask attentions.

    Per row, weights the two outputs by the share each source holds of the
    combined softmax denominator. Rows where one source is empty pass the
    other through unchanged; rows empty in both raise BothEmpty.
    """
    if a.output.shape != b.output.shape:
        raise ShapeMismatch(f"output shapes differ: {a.output.shape} vs {b.output.shape}")
    w_a = merge_weights(a.lse, b.lse)
    w_a = w_a.astype(a.output.dtype, copy=False)
    return w_a[..., None] * a.output + (1.0 - w_a)[..., None] * b.output


def lse_merge_backward(g: np.ndarray, a: PartialAttention, b: PartialAttention):
    """Gradients of lse_merge w.r.t. both outputs and both normalizers."""
    w_a = merge_weights(a.lse, b.lse).astype(a.output.dtype, copy=False)
    w_b = 1.0 - w_a
    da_out = w_a[..., None] * g
    db_out = w_b[..., None] * g
    # d merged / d lse_a = w_a * w_b * (a.output - b.output), rowwise dot with g
    dlse_a = w_a * w_b * np.sum(g * (a.output - b.output), axis=-1)
    return da_out, dlse_a, db_out, -dlse_a


def dual_key_oracle(
    q: np.ndarray,
    k_self: np.ndarray,
    v_self: np.ndarray,
    k_cross: np.ndarray,
    v_cross: np.ndarray,
    masks: AttentionMaskPair,
    scale: float | None = None,
    return_weights: bool = False,
):
    """Single softmax over the union of self- and cross-visible keys.

    Brute-force reference: per query row, concatenates the visible logits
    from both key matrices and runs one softmax over them. Quadratic loops,
    2-D operands only; defines what the fast path must equal.
    """
    if q.ndim != 2:
        raise ShapeMismatch("oracle takes 2-D (tokens, d_head) operands")
    if k_self.shape[-1] != q.shape[-1] or k_cross.shape[-1] != q.shape[-1]:
        raise ShapeMismatch("d_head mismatch between Q and a key matrix")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    tq = q.shape[0]
    out = np.zeros((tq, v_self.shape[-1]), dtype=q.dtype)
    w_self = np.zeros((tq, k_self.shape[0]), dtype=q.dtype)
    w_cross = np.zeros((tq, k_cross.shape[0]), dtype=q.dtype)
    for t in range(tq):
        idx_s = np.flatnonzero(masks.self_mask[t])
        idx_c = np.flatnonzero(masks.cross_mask[t])
        logits = np.concatenate(
            [scale * (k_self[idx_s] @ q[t]), scale * (k_cross[idx_c] @ q[t])]
        )
        if logits.size == 0:
            continue
        p = np.exp(logits - logits.max())
        p /= p.sum()
        p_s, p_c = p[: idx_s.size], p[idx_s.size :]
        out[t] = p_s @ v_self[idx_s] + p_c @ v_cross[idx_c]
        w_self[t, idx_s] = p_s
        w_cross[t, idx_c] = p_c
    if return_weights:
        return out, w_self, w_cross
    return out
