"""Transformer stacks: context decoder, generation decoder, and a causal baseline.

Everything is plain NumPy over a flat name->array parameter dict, with
hand-written reverse-mode gradients (backward()). Layers are pre-norm:
LayerNorm -> attention -> residual, LayerNorm -> GELU FFN -> residual, with
rotary position encoding on queries and keys, one shared embedding table
tied to the output projection, and logits scaled by sqrt(base_width / d).

The generation decoder's attention computes one query projection per layer
and two key/value source pairs: within-block keys from its own hidden state
and cross-block keys projected (per layer) from the context decoder's final
latents. The two masked attentions are recombined exactly via their
log-sum-exp normalizers, so a query's softmax mass spans the union of its
visible keys even though the sources are computed separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import lse_merge, lse_merge_backward, sdpa, sdpa_backward
from .masks import AttentionMaskPair, block_masks, causal_mask
from .opcount import matmul as _mm
from .partition import BlockPartition

D_HEAD = 64
LN_EPS = 1e-5
ROPE_BASE = 10000.0

DECODER_ONLY = "decoder_only"
DOUBLE_DECODER = "double_decoder"
ARCHES = (DECODER_ONLY, DOUBLE_DECODER)


class SeqTooLong(ValueError):
    """Input longer than max_seq_len."""


class IdOutOfRange(ValueError):
    """Token id outside [0, vocab_size)."""


@dataclass(frozen=True)
class ModelConfig:
    """Width/depth/vocab settings shared by both architectures.

    `layers` is the decoder-only depth; `ctx_layers`/`gen_layers` the
    double-decoder split. Head dimension is fixed at 64, so n_heads = d/64.
    """

    d: int = 64
    layers: int = 12
    ctx_layers: int = 8
    gen_layers: int = 4
    vocab_size: int = 259
    base_width: int = 64
    ffn_mult: int = 4
    max_seq_len: int = 2048

    def __post_init__(self):
        if self.d % D_HEAD != 0 or self.d < D_HEAD:
            raise ValueError(f"d must be a positive multiple of {D_HEAD}, got {self.d}")
        if min(self.layers, self.ctx_layers, self.gen_layers) < 1:
            raise ValueError("all layer counts must be >= 1")
        if self.base_width > self.d:
            raise ValueError(f"base width {self.base_width} exceeds d={self.d}")
        if self.vocab_size < 2 or self.max_seq_len < 1 or self.ffn_mult < 1:
            raise ValueError("bad vocab_size / max_seq_len / ffn_mult")

    @property
    def n_heads(self) -> int:
        return self.d // D_HEAD

    @property
    def d_head(self) -> int:
        return D_HEAD

    @property
    def logit_mult(self) -> float:
        return float(np.sqrt(self.base_width / self.d))


@dataclass(frozen=True)
class ContextLatents:
    """Final-layer causal latents of the context decoder."""

    h: np.ndarray


# ---------------------------------------------------------------------------
# parameter initialization

_SELF_PROJ = ("wq", "wk", "wv", "wo")
_DUAL_PROJ = ("wq", "wks", "wvs", "wkc", "wvc", "wo")


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _init_block(p, rng, prefix: str, cfg: ModelConfig, dtype, dual: bool) -> None:
    d, f = cfg.d, cfg.ffn_mult * cfg.d
    p[f"{prefix}.ln1.g"] = np.ones(d, dtype=dtype)
    p[f"{prefix}.ln1.b"] = np.zeros(d, dtype=dtype)
    for name in _DUAL_PROJ if dual else _SELF_PROJ:
        p[f"{prefix}.attn.{name}"] = _xavier(rng, d, d, dtype)
        p[f"{prefix}.attn.{name.replace('w', 'b', 1)}"] = np.zeros(d, dtype=dtype)
    p[f"{prefix}.ln2.g"] = np.ones(d, dtype=dtype)
    p[f"{prefix}.ln2.b"] = np.zeros(d, dtype=dtype)
    p[f"{prefix}.ffn.w1"] = _xavier(rng, d, f, dtype)
    p[f"{prefix}.ffn.b1"] = np.zeros(f, dtype=dtype)
    p[f"{prefix}.ffn.w2"] = _xavier(rng, f, d, dtype)
    p[f"{prefix}.ffn.b2"] = np.zeros(d, dtype=dtype)


def init_params(
    cfg: ModelConfig, arch: str, rng: np.random.Generator, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, unit norm gains, zero biases."""
    if arch not in ARCHES:
        raise ValueError(f"unknown arch {arch!r}")
    p: dict[str, np.ndarray] = {}
    p["embed.weight"] = _xavier(rng, cfg.vocab_size, cfg.d, dtype)
    if arch == DECODER_ONLY:
        for i in range(cfg.layers):
            _init_block(p, rng, f"dec.{i}", cfg, dtype, dual=False)
        p["dec.final_ln.g"] = np.ones(cfg.d, dtype=dtype)
        p["dec.final_ln.b"] = np.zeros(cfg.d, dtype=dtype)
    else:
        for i in range(cfg.ctx_layers):
            _init_block(p, rng, f"ctx.{i}", cfg, dtype, dual=False)
        p["ctx.final_ln.g"] = np.ones(cfg.d, dtype=dtype)
        p["ctx.final_ln.b"] = np.zeros(cfg.d, dtype=dtype)
        for i in range(cfg.gen_layers):
            _init_block(p, rng, f"gen.{i}", cfg, dtype, dual=True)
        p["gen.final_ln.g"] = np.ones(cfg.d, dtype=dtype)
        p["gen.final_ln.b"] = np.zeros(cfg.d, dtype=dtype)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(v.size for v in params.values())


# ---------------------------------------------------------------------------
# primitive forward/backward pieces

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=axes)
    db = np.sum(dy, axis=axes)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _lin_fwd(x, w, b, tag=""):
    return _mm(x, w, tag=tag) + b


def _lin_bwd(dy, x, w):
    dx = _mm(dy, w.T)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = _mm(x2.T, dy2)
    db = dy2.sum(axis=0)
    return dx, dw, db


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _inv_freq(d_head: int, base: float) -> np.ndarray:
    return base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)


def rope(x: np.ndarray, positions: np.ndarray, base: float = ROPE_BASE) -> np.ndarray:
    """Rotary position encoding: rotate each adjacent 2-dim pair of the last
    axis by position * base^(-2i/d_head). Norm-preserving; position 0 is the
    identity; query/key dot products depend on positions only through their
    difference."""
    lead = x.shape[:-2]
    t, dh = x.shape[-2:]
    if dh % 2 != 0:
        raise ValueError("d_head must be even for rotary encoding")
    out = kernels.rope_rotate(
        np.ascontiguousarray(x).reshape(-1, t, dh),
        np.ascontiguousarray(positions, dtype=np.int64),
        _inv_freq(dh, base),
        1.0,
    )
    return out.reshape(*lead, t, dh)


def _rope_bwd(dy: np.ndarray, positions: np.ndarray, base: float = ROPE_BASE) -> np.ndarray:
    # rotation is orthonormal per pair: pull gradients back by rotating -theta
    lead = dy.shape[:-2]
    t, dh = dy.shape[-2:]
    out = kernels.rope_rotate(
        np.ascontiguousarray(dy).reshape(-1, t, dh),
        np.ascontiguousarray(positions, dtype=np.int64),
        _inv_freq(dh, base),
        -1.0,
    )
    return out.reshape(*lead, t, dh)


def embed(cfg: ModelConfig, params, tokens: np.ndarray) -> np.ndarray:
    """Row lookup in the shared embedding table."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IdOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")
    return params["embed.weight"][tokens]


_SCALE = 1.0 / np.sqrt(D_HEAD)


# ---------------------------------------------------------------------------
# transformer blocks

def _causal_block_fwd(cfg, params, prefix, x, mask, positions, tape):
    p = params
    y, lnc = _ln_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = _lin_fwd(y, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"], tag="proj")
    k = _lin_fwd(y, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"], tag="proj")
    v = _lin_fwd(y, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"], tag="proj")
    qh = rope(_split_heads(q, cfg.n_heads), positions)
    kh = rope(_split_heads(k, cfg.n_heads), positions)
    vh = _split_heads(v, cfg.n_heads)
    pa = sdpa(qh, kh, vh, mask, _SCALE)
    att = _merge_heads(pa.output)
    o = _lin_fwd(att, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"], tag="proj")
    x1 = x + o
    y2, ln2c = _ln_fwd(x1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    u = _lin_fwd(y2, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"], tag="ffn")
    a = kernels.gelu(u)
    f = _lin_fwd(a, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"], tag="ffn")
    out = x1 + f
    if tape is not None:
        tape.append(
            dict(lnc=lnc, y=y, qh=qh, kh=kh, vh=vh, pa=pa, att=att,
                 ln2c=ln2c, y2=y2, u=u, a=a)
        )
    return out


def _causal_block_bwd(cfg, params, prefix, dout, mask, positions, cache, grads):
    p, c = params, cache
    da, dw2, db2 = _lin_bwd(dout, c["a"], p[f"{prefix}.ffn.w2"])
    du = kernels.gelu_grad(c["u"], da)
    dy2, dw1, db1 = _lin_bwd(du, c["y2"], p[f"{prefix}.ffn.w1"])
    dx1_ln, dg2, dbg2 = _ln_bwd(dy2, p[f"{prefix}.ln2.g"], c["ln2c"])
    dx1 = dout + dx1_ln

    datt, dwo, dbo = _lin_bwd(dx1, c["att"], p[f"{prefix}.attn.wo"])
    ghead = _split_heads(datt, cfg.n_heads)
    glse = np.zeros_like(c["pa"].lse)
    dqh, dkh, dvh = sdpa_backward(ghead, glse, c["qh"], c["kh"], c["vh"], mask, _SCALE, c["pa"])
    dq = _merge_heads(_rope_bwd(dqh, positions))
    dk = _merge_heads(_rope_bwd(dkh, positions))
    dv = _merge_heads(dvh)
    dyq, dwq, dbq = _lin_bwd(dq, c["y"], p[f"{prefix}.attn.wq"])
    dyk, dwk, dbk = _lin_bwd(dk, c["y"], p[f"{prefix}.attn.wk"])
    dyv, dwv, dbv = _lin_bwd(dv, c["y"], p[f"{prefix}.attn.wv"])
    dy = dyq + dyk + dyv
    dx_ln, dg1, dbg1 = _ln_bwd(dy, p[f"{prefix}.ln1.g"], c["lnc"])
    dx = dx1 + dx_ln

    for name, g in [
        ("ln1.g", dg1), ("ln1.b", dbg1), ("attn.wq", dwq), ("attn.bq", dbq),
        ("attn.wk", dwk), ("attn.bk", dbk), ("attn.wv", dwv), ("attn.bv", dbv),
        ("attn.wo", dwo), ("attn.bo", dbo), ("ln2.g", dg2), ("ln2.b", dbg2),
        ("ffn.w1", dw1), ("ffn.b1", db1), ("ffn.w2", dw2), ("ffn.b2", db2),
    ]:
        grads[f"{prefix}.{name}"] += g
    return dx


def _dual_block_fwd(cfg, params, prefix, x, h, masks: AttentionMaskPair, positions, tape):
    p = params
    y, lnc = _ln_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = _lin_fwd(y, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"], tag="proj")
    ks = _lin_fwd(y, p[f"{prefix}.attn.wks"], p[f"{prefix}.attn.bks"], tag="proj")
    vs = _lin_fwd(y, p[f"{prefix}.attn.wvs"], p[f"{prefix}.attn.bvs"], tag="proj")
    kc = _lin_fwd(h, p[f"{prefix}.attn.wkc"], p[f"{prefix}.attn.bkc"], tag="proj")
    vc = _lin_fwd(h, p[f"{prefix}.attn.wvc"], p[f"{prefix}.attn.bvc"], tag="proj")
    qh = rope(_split_heads(q, cfg.n_heads), positions)
    ksh = rope(_split_heads(ks, cfg.n_heads), positions)
    vsh = _split_heads(vs, cfg.n_heads)
    kch = rope(_split_heads(kc, cfg.n_heads), positions)
    vch = _split_heads(vc, cfg.n_heads)
    pa_s = sdpa(qh, ksh, vsh, masks.self_mask, _SCALE)
    pa_c = sdpa(qh, kch, vch, masks.cross_mask, _SCALE)
    merged = lse_merge(pa_s, pa_c)
    att = _merge_heads(merged)
    o = _lin_fwd(att, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"], tag="proj")
    x1 = x + o
    y2, ln2c = _ln_fwd(x1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    u = _lin_fwd(y2, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"], tag="ffn")
    a = kernels.gelu(u)
    f = _lin_fwd(a, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"], tag="ffn")
    out = x1 + f
    if tape is not None:
        tape.append(
            dict(lnc=lnc, y=y, qh=qh, ksh=ksh, vsh=vsh, kch=kch, vch=vch,
                 pa_s=pa_s, pa_c=pa_c, att=att, ln2c=ln2c, y2=y2, u=u, a=a)
        )
    return out


def _dual_block_bwd(cfg, params, prefix, dout, h, masks, positions, cache, grads):
    """Returns (dx, dh_contribution)."""
    p, c = params, cache
    da, dw2, db2 = _lin_bwd(dout, c["a"], p[f"{prefix}.ffn.w2"])
    du = kernels.gelu_grad(c["u"], da)
    dy2, dw1, db1 = _lin_bwd(du, c["y2"], p[f"{prefix}.ffn.w1"])
    dx1_ln, dg2, dbg2 = _ln_bwd(dy2, p[f"{prefix}.ln2.g"], c["ln2c"])
    dx1 = dout + dx1_ln

    datt, dwo, dbo = _lin_bwd(dx1, c["att"], p[f"{prefix}.attn.wo"])
    ghead = _split_heads(datt, cfg.n_heads)
    ga, glse_a, gb, glse_b = lse_merge_backward(ghead, c["pa_s"], c["pa_c"])
    dqh_s, dksh, dvsh = sdpa_backward(
        ga, glse_a, c["qh"], c["ksh"], c["vsh"], masks.self_mask, _SCALE, c["pa_s"]
    )
    dqh_c, dkch, dvch = sdpa_backward(
        gb, glse_b, c["qh"], c["kch"], c["vch"], masks.cross_mask, _SCALE, c["pa_c"]
    )
    dq = _merge_heads(_rope_bwd(dqh_s + dqh_c, positions))
    dks = _merge_heads(_rope_bwd(dksh, positions))
    dvs = _merge_heads(dvsh)
    dkc = _merge_heads(_rope_bwd(dkch, positions))
    dvc = _merge_heads(dvch)
    dyq, dwq, dbq = _lin_bwd(dq, c["y"], p[f"{prefix}.attn.wq"])
    dyk, dwks, dbks = _lin_bwd(dks, c["y"], p[f"{prefix}.attn.wks"])
    dyv, dwvs, dbvs = _lin_bwd(dvs, c["y"], p[f"{prefix}.attn.wvs"])
    dh_k, dwkc, dbkc = _lin_bwd(dkc, h, p[f"{prefix}.attn.wkc"])
    dh_v, dwvc, dbvc = _lin_bwd(dvc, h, p[f"{prefix}.attn.wvc"])
    dy = dyq + dyk + dyv
    dx_ln, dg1, dbg1 = _ln_bwd(dy, p[f"{prefix}.ln1.g"], c["lnc"])
    dx = dx1 + dx_ln

    for name, g in [
        ("ln1.g", dg1), ("ln1.b", dbg1), ("attn.wq", dwq), ("attn.bq", dbq),
        ("attn.wks", dwks), ("attn.bks", dbks), ("attn.wvs", dwvs), ("attn.bvs", dbvs),
        ("attn.wkc", dwkc), ("attn.bkc", dbkc), ("attn.wvc", dwvc), ("attn.bvc", dbvc),
        ("attn.wo", dwo), ("attn.bo", dbo), ("ln2.g", dg2), ("ln2.b", dbg2),
        ("ffn.w1", dw1), ("ffn.b1", db1), ("ffn.w2", dw2), ("ffn.b2", db2),
    ]:
        grads[f"{prefix}.{name}"] += g
    return dx, dh_k + dh_v


# ---------------------------------------------------------------------------
# full forward passes (tape=None runs inference-style, dict tape records for backward)

def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")


def _check_len(cfg: ModelConfig, t: int) -> None:
    if t > cfg.max_seq_len:
        raise SeqTooLong(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")


def _context_forward(cfg, params, tokens2d, tape=None):
    t = tokens2d.shape[1]
    x = embed(cfg, params, tokens2d)
    positions = np.arange(t)
    mask = causal_mask(t)
    layer_tape = [] if tape is not None else None
    for i in range(cfg.ctx_layers):
        x = _causal_block_fwd(cfg, params, f"ctx.{i}", x, mask, positions, layer_tape)
    h, ln_cache = _ln_fwd(x, params["ctx.final_ln.g"], params["ctx.final_ln.b"])
    if tape is not None:
        tape["ctx"] = layer_tape
        tape["ctx_final_ln"] = ln_cache
        tape["ctx_mask"] = mask
    return h


def _generation_forward(cfg, params, tokens2d, h, partition: BlockPartition, tape=None):
    from .attention import ShapeMismatch

    t = tokens2d.shape[1]
    if partition.seq_len != t or h.shape[-2] != t:
        raise ShapeMismatch(
            f"partition/latents length mismatch: tokens {t}, partition {partition.seq_len}, "
            f"latents {h.shape[-2]}"
        )
    masks = block_masks(partition)
    x = embed(cfg, params, tokens2d)
    positions = np.arange(t)
    layer_tape = [] if tape is not None else None
    for i in range(cfg.gen_layers):
        x = _dual_block_fwd(cfg, params, f"gen.{i}", x, h, masks, positions, layer_tape)
    xf, ln_cache = _ln_fwd(x, params["gen.final_ln.g"], params["gen.final_ln.b"])
    logits = cfg.logit_mult * _mm(xf, params["embed.weight"].T, tag="head")
    if tape is not None:
        tape["gen"] = layer_tape
        tape["gen_final_ln"] = ln_cache
        tape["gen_masks"] = masks
        tape["xf"] = xf
        tape["h"] = h
    return logits


def context_decoder_forward(cfg: ModelConfig, params, tokens) -> ContextLatents:
    """Causal context decoder; returns final latents, no output head."""
    tokens2d, squeeze = _as_batch(tokens)
    _check_len(cfg, tokens2d.shape[1])
    h = _context_forward(cfg, params, tokens2d)
    return ContextLatents(h=h[0] if squeeze else h)


def generation_decoder_forward(
    cfg: ModelConfig, params, tokens, latents, partition: BlockPartition
) -> np.ndarray:
    """Generation decoder over one partition, conditioned on context latents."""
    tokens2d, squeeze = _as_batch(tokens)
    _check_len(cfg, tokens2d.shape[1])
    h = latents.h if isinstance(latents, ContextLatents) else np.asarray(latents)
    if h.ndim == 2:
        h = h[None, :, :]
    logits = _generation_forward(cfg, params, tokens2d, h, partition)
    return logits[0] if squeeze else logits


def double_decoder_forward(
    cfg: ModelConfig, params, tokens, partition: BlockPartition, tape: dict | None = None
) -> np.ndarray:
    """Context decoder then generation decoder; logits at t predict token t+1."""
    tokens2d, squeeze = _as_batch(tokens)
    _check_len(cfg, tokens2d.shape[1])
    if tape is not None:
        tape.update(arch=DOUBLE_DECODER, tokens=tokens2d, partition=partition)
    h = _context_forward(cfg, params, tokens2d, tape)
    logits = _generation_forward(cfg, params, tokens2d, h, partition, tape)
    return logits[0] if squeeze else logits


def decoder_only_forward(
    cfg: ModelConfig, params, tokens, tape: dict | None = None
) -> np.ndarray:
    """Standard causal stack with tied head and logit multiplier."""
    tokens2d, squeeze = _as_batch(tokens)
    t = tokens2d.shape[1]
    _check_len(cfg, t)
    x = embed(cfg, params, tokens2d)
    positions = np.arange(t)
    mask = causal_mask(t)
    layer_tape = [] if tape is not None else None
    for i in range(cfg.layers):
        x = _causal_block_fwd(cfg, params, f"dec.{i}", x, mask, positions, layer_tape)
    xf, ln_cache = _ln_fwd(x, params["dec.final_ln.g"], params["dec.final_ln.b"])
    logits = cfg.logit_mult * _mm(xf, params["embed.weight"].T, tag="head")
    if tape is not None:
        tape.update(
            arch=DECODER_ONLY, tokens=tokens2d, dec=layer_tape, dec_final_ln=ln_cache,
            dec_mask=mask, xf=xf,
        )
    return logits[0] if squeeze else logits


# ---------------------------------------------------------------------------
# reverse mode

def backward(cfg: ModelConfig, params, tape: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of a recorded forward pass w.r.t. every parameter.

    `tape` must come from double_decoder_forward or decoder_only_forward
    with tape={}; dlogits is the loss gradient at the logits.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tokens = tape["tokens"]
    b, t = tokens.shape
    positions = np.arange(t)
    emb = params["embed.weight"]
    mult = cfg.logit_mult

    if dlogits.ndim == 2:
        dlogits = dlogits[None, :, :]
    dxf = mult * _mm(dlogits, emb)
    grads["embed.weight"] += mult * _mm(
        dlogits.reshape(-1, cfg.vocab_size).T, tape["xf"].reshape(-1, cfg.d)
    )

    if tape["arch"] == DECODER_ONLY:
        dx, dg, db = _ln_bwd(dxf, params["dec.final_ln.g"], tape["dec_final_ln"])
        grads["dec.final_ln.g"] += dg
        grads["dec.final_ln.b"] += db
        for i in reversed(range(cfg.layers)):
            dx = _causal_block_bwd(
                cfg, params, f"dec.{i}", dx, tape["dec_mask"], positions, tape["dec"][i], grads
            )
        np.add.at(grads["embed.weight"], tokens, dx)
        return grads

    # generation decoder
    dx, dg, db = _ln_bwd(dxf, params["gen.final_ln.g"], tape["gen_final_ln"])
    grads["gen.final_ln.g"] += dg
    grads["gen.final_ln.b"] += db
    dh = np.zeros_like(tape["h"])
    for i in reversed(range(cfg.gen_layers)):
        dx, dh_i = _dual_block_bwd(
            cfg, params, f"gen.{i}", dx, tape["h"], tape["gen_masks"], positions,
            tape["gen"][i], grads,
        )
        dh += dh_i
    np.add.at(grads["embed.weight"], tokens, dx)

    # context decoder, entered through its final norm
    dxc, dg, db = _ln_bwd(dh, params["ctx.final_ln.g"], tape["ctx_final_ln"])
    grads["ctx.final_ln.g"] += dg
    grads["ctx.final_ln.b"] += db
    for i in reversed(range(cfg.ctx_layers)):
        dxc = _causal_block_bwd(
            cfg, params, f"ctx.{i}", dxc, tape["ctx_mask"], positions, tape["ctx"][i], grads
        )
    np.add.at(grads["embed.weight"], tokens, dxc)
    return grads
