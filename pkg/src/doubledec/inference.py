"""KV-cached autoregressive generation for both architectures.

Double-decoder sessions run in two phases. The context phase pushes the
prompt through the context decoder once and projects each generation
layer's cross keys/values from the final latents; nothing else from the
context stack is kept. Decode steps then push one token at a time through
the generation layers only, attending fully to the fixed cross cache and
causally to the growing self cache, merging the two attentions by their
log-sum-exp normalizers exactly as in training.

The response is a single block whose cross context is the prompt. Because
a block's first token is predicted by the previous block's last row,
generate() promotes the prompt's final token to the first slot of the
response block: the context phase covers prompt[:-1] and the first decode
step feeds prompt[-1]. Time-to-first-token therefore costs one context-
decoder pass plus a single generation-layer token, never a generation-stack
sweep over the prompt.

A PrefixCache stores per-layer context K/V and latents for a token prefix;
a later prompt extending that prefix only pays for its suffix (the causal
context decoder makes cached prefix latents exact, not approximate).

All op counts are exact matmul FLOPs measured while the code runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .attention import lse_merge, sdpa
from .model import DECODER_ONLY, DOUBLE_DECODER, ContextLatents, ModelConfig, rope
from .opcount import count_flops, matmul as _mm


class PrefixMismatch(ValueError):
    """Supplied cache tokens are not a prefix of the prompt."""


class CacheExhausted(RuntimeError):
    """Decode position reached max_seq_len."""


@dataclass
class PrefixCache:
    """Immutable context-decoder state for a fixed token prefix."""

    tokens: np.ndarray  # (P,)
    layer_k: list[np.ndarray]  # per context layer, (H, P, d_head), rotary applied
    layer_v: list[np.ndarray]
    latents: np.ndarray  # (P, d) final context latents

    @property
    def prefix_len(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class GenKVCache:
    """Per-generation-layer caches: fixed cross K/V plus growing self K/V."""

    cross_k: list[np.ndarray]  # per layer (H, T_in, d_head)
    cross_v: list[np.ndarray]
    self_k: list[np.ndarray]  # per layer (H, generated, d_head)
    self_v: list[np.ndarray]
    t_in: int
    generated_count: int = 0

    def element_count(self) -> int:
        return sum(a.size for a in self.cross_k + self.cross_v + self.self_k + self.self_v)

    def kv_bytes(self, b: int) -> int:
        return self.element_count() * b


@dataclass
class DecKVCache:
    """Decoder-only baseline cache: per-layer causal K/V over all tokens."""

    layer_k: list[np.ndarray]  # per layer (H, t, d_head)
    layer_v: list[np.ndarray]
    t_in: int
    generated_count: int = 0

    def element_count(self) -> int:
        return sum(a.size for a in self.layer_k + self.layer_v)

    def kv_bytes(self, b: int) -> int:
        return self.element_count() * b


def kv_bytes(obj, b: int, *, arch: str | None = None, t_in: int | None = None, t_out: int | None = None) -> int:
    """KV-cache bytes: live accounting for a cache, closed form for a config.

    Formulas: decoder-only 2*d*b*L*(T_in+T_out); dual-stack
    2*d*b*L_dec*(T_in+T_out). See costmodel.inference_ratios for the
    L_dec/L ratio these imply.
    """
    if isinstance(obj, (GenKVCache, DecKVCache)):
        return obj.kv_bytes(b)
    cfg: ModelConfig = obj
    layers = cfg.layers if arch == DECODER_ONLY else cfg.gen_layers
    return 2 * cfg.d * b * layers * (t_in + t_out)


# ---------------------------------------------------------------------------
# context phase

def _full_visibility(t_q: int, t_k: int, offset: int) -> np.ndarray:
    # row i may see columns j <= offset + i (causal attention over cache + new)
    return np.arange(t_k)[None, :] <= (offset + np.arange(t_q))[:, None]


def _ctx_layer_params(params, i):
    p = f"ctx.{i}"
    return (
        params[f"{p}.ln1.g"], params[f"{p}.ln1.b"],
        params[f"{p}.attn.wq"], params[f"{p}.attn.bq"],
        params[f"{p}.attn.wk"], params[f"{p}.attn.bk"],
        params[f"{p}.attn.wv"], params[f"{p}.attn.bv"],
        params[f"{p}.attn.wo"], params[f"{p}.attn.bo"],
        params[f"{p}.ln2.g"], params[f"{p}.ln2.b"],
        params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"],
        params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"],
    )


def _context_extend(cfg: ModelConfig, params, suffix_tokens: np.ndarray, cache: PrefixCache | None):
    """Run the context decoder over suffix tokens, attending into cached K/V.

    Returns (suffix latents (S, d), new per-layer K, new per-layer V).
    """
    from . import kernels

    p_len = 0 if cache is None else cache.prefix_len
    s = suffix_tokens.shape[0]
    x = model.embed(cfg, params, suffix_tokens[None, :])
    positions = np.arange(p_len, p_len + s)
    mask = _full_visibility(s, p_len + s, p_len)
    new_k, new_v = [], []
    for i in range(cfg.ctx_layers):
        (g1, b1, wq, bq, wk, bk, wv, bv, wo, bo, g2, b2, w1, bf1, w2, bf2) = _ctx_layer_params(params, i)
        y, _ = model._ln_fwd(x, g1, b1)
        q = _mm(y, wq, tag="proj") + bq
        k = _mm(y, wk, tag="proj") + bk
        v = _mm(y, wv, tag="proj") + bv
        qh = rope(model._split_heads(q, cfg.n_heads), positions)
        kh = rope(model._split_heads(k, cfg.n_heads), positions)
        vh = model._split_heads(v, cfg.n_heads)
        new_k.append(kh[0])
        new_v.append(vh[0])
        if cache is not None and p_len > 0:
            k_all = np.concatenate([cache.layer_k[i], kh[0]], axis=1)[None]
            v_all = np.concatenate([cache.layer_v[i], vh[0]], axis=1)[None]
        else:
            k_all, v_all = kh, vh
        pa = sdpa(qh, k_all, v_all, mask, model._SCALE)
        att = model._merge_heads(pa.output)
        x = x + (_mm(att, wo, tag="proj") + bo)
        y2, _ = model._ln_fwd(x, g2, b2)
        u = _mm(y2, w1, tag="ffn") + bf1
        a = kernels.gelu(u)
        x = x + (_mm(a, w2, tag="ffn") + bf2)
    h, _ = model._ln_fwd(x, params["ctx.final_ln.g"], params["ctx.final_ln.b"])
    return h[0], new_k, new_v


def context_phase(
    cfg: ModelConfig,
    params,
    prompt: np.ndarray,
    prefix_cache: PrefixCache | None = None,
):
    """Context decoder over the prompt, continuing from a prefix cache if given.

    Returns (ContextLatents over the full prompt, GenKVCache with cross K/V
    filled, updated PrefixCache covering the full prompt).
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or prompt.shape[0] < 1:
        raise ValueError("prompt must be a non-empty 1-D id sequence")
    t_in = prompt.shape[0]
    if t_in > cfg.max_seq_len:
        raise CacheExhausted(f"prompt length {t_in} exceeds max_seq_len {cfg.max_seq_len}")

    if prefix_cache is not None:
        p_len = prefix_cache.prefix_len
        if p_len > t_in or not np.array_equal(prefix_cache.tokens, prompt[:p_len]):
            raise PrefixMismatch("cached tokens are not a prefix of the prompt")
    else:
        p_len = 0

    if prefix_cache is not None and p_len == t_in:
        h_full = prefix_cache.latents
        new_cache = prefix_cache
    else:
        suffix = prompt[p_len:]
        h_suffix, new_k, new_v = _context_extend(cfg, params, suffix, prefix_cache)
        if prefix_cache is not None and p_len > 0:
            h_full = np.concatenate([prefix_cache.latents, h_suffix], axis=0)
            layer_k = [np.concatenate([ck, nk], axis=1) for ck, nk in zip(prefix_cache.layer_k, new_k)]
            layer_v = [np.concatenate([cv, nv], axis=1) for cv, nv in zip(prefix_cache.layer_v, new_v)]
        else:
            h_full, layer_k, layer_v = h_suffix, new_k, new_v
        new_cache = PrefixCache(tokens=prompt.copy(), layer_k=layer_k, layer_v=layer_v, latents=h_full)

    # project per-generation-layer cross K/V from the final latents
    positions = np.arange(t_in)
    cross_k, cross_v = [], []
    h_b = h_full[None, :, :]
    for i in range(cfg.gen_layers):
        pfx = f"gen.{i}.attn"
        kc = _mm(h_b, params[f"{pfx}.wkc"], tag="proj") + params[f"{pfx}.bkc"]
        vc = _mm(h_b, params[f"{pfx}.wvc"], tag="proj") + params[f"{pfx}.bvc"]
        cross_k.append(rope(model._split_heads(kc, cfg.n_heads), positions)[0])
        cross_v.append(model._split_heads(vc, cfg.n_heads)[0])
    dtype = params["embed.weight"].dtype
    empty = [np.zeros((cfg.n_heads, 0, cfg.d_head), dtype=dtype) for _ in range(cfg.gen_layers)]
    gen_cache = GenKVCache(
        cross_k=cross_k, cross_v=cross_v,
        self_k=list(empty), self_v=[a.copy() for a in empty],
        t_in=t_in,
    )
    return ContextLatents(h=h_full), gen_cache, new_cache


# ---------------------------------------------------------------------------
# decode

def decode_step(cfg: ModelConfig, params, cache: GenKVCache, token_id: int, position: int):
    """One token through the generation layers; returns (logits, cache).

    The token's self K/V are appended (in place) before attention, so it
    always sees itself; cross attention spans every cached prompt latent.
    """
    from . import kernels

    if position >= cfg.max_seq_len:
        raise CacheExhausted(f"position {position} >= max_seq_len {cfg.max_seq_len}")
    x = model.embed(cfg, params, np.asarray([[token_id]], dtype=np.int64))
    positions = np.asarray([position])
    for i in range(cfg.gen_layers):
        p = f"gen.{i}"
        y, _ = model._ln_fwd(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = _mm(y, params[f"{p}.attn.wq"], tag="proj") + params[f"{p}.attn.bq"]
        ks = _mm(y, params[f"{p}.attn.wks"], tag="proj") + params[f"{p}.attn.bks"]
        vs = _mm(y, params[f"{p}.attn.wvs"], tag="proj") + params[f"{p}.attn.bvs"]
        qh = rope(model._split_heads(q, cfg.n_heads), positions)
        ksh = rope(model._split_heads(ks, cfg.n_heads), positions)
        vsh = model._split_heads(vs, cfg.n_heads)
        cache.self_k[i] = np.concatenate([cache.self_k[i], ksh[0]], axis=1)
        cache.self_v[i] = np.concatenate([cache.self_v[i], vsh[0]], axis=1)
        t_self = cache.self_k[i].shape[1]
        ones_self = np.ones((1, t_self), dtype=bool)
        ones_cross = np.ones((1, cache.t_in), dtype=bool)
        pa_s = sdpa(qh, cache.self_k[i][None], cache.self_v[i][None], ones_self, model._SCALE)
        pa_c = sdpa(qh, cache.cross_k[i][None], cache.cross_v[i][None], ones_cross, model._SCALE)
        att = model._merge_heads(lse_merge(pa_s, pa_c))
        x = x + (_mm(att, params[f"{p}.attn.wo"], tag="proj") + params[f"{p}.attn.bo"])
        y2, _ = model._ln_fwd(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        u = _mm(y2, params[f"{p}.ffn.w1"], tag="ffn") + params[f"{p}.ffn.b1"]
        a = kernels.gelu(u)
        x = x + (_mm(a, params[f"{p}.ffn.w2"], tag="ffn") + params[f"{p}.ffn.b2"])
    xf, _ = model._ln_fwd(x, params["gen.final_ln.g"], params["gen.final_ln.b"])
    logits = cfg.logit_mult * _mm(xf, params["embed.weight"].T, tag="head")
    cache.generated_count += 1
    return logits[0, 0], cache


# ---------------------------------------------------------------------------
# decoder-only baseline

def decoder_prefill(cfg: ModelConfig, params, prompt: np.ndarray):
    """Full causal pass over the prompt, caching per-layer K/V."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.shape[0] > cfg.max_seq_len:
        raise CacheExhausted(f"prompt length {prompt.shape[0]} exceeds max_seq_len")
    tape: dict = {}
    logits = model.decoder_only_forward(cfg, params, prompt[None, :], tape=tape)
    cache = DecKVCache(
        layer_k=[layer["kh"][0] for layer in tape["dec"]],
        layer_v=[layer["vh"][0] for layer in tape["dec"]],
        t_in=int(prompt.shape[0]),
    )
    return logits[0, -1], cache


def decoder_decode_step(cfg: ModelConfig, params, cache: DecKVCache, token_id: int, position: int):
    from . import kernels

    if position >= cfg.max_seq_len:
        raise CacheExhausted(f"position {position} >= max_seq_len {cfg.max_seq_len}")
    x = model.embed(cfg, params, np.asarray([[token_id]], dtype=np.int64))
    positions = np.asarray([position])
    for i in range(cfg.layers):
        p = f"dec.{i}"
        y, _ = model._ln_fwd(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = _mm(y, params[f"{p}.attn.wq"], tag="proj") + params[f"{p}.attn.bq"]
        k = _mm(y, params[f"{p}.attn.wk"], tag="proj") + params[f"{p}.attn.bk"]
        v = _mm(y, params[f"{p}.attn.wv"], tag="proj") + params[f"{p}.attn.bv"]
        qh = rope(model._split_heads(q, cfg.n_heads), positions)
        kh = rope(model._split_heads(k, cfg.n_heads), positions)
        vh = model._split_heads(v, cfg.n_heads)
        cache.layer_k[i] = np.concatenate([cache.layer_k[i], kh[0]], axis=1)
        cache.layer_v[i] = np.concatenate([cache.layer_v[i], vh[0]], axis=1)
        t_all = cache.layer_k[i].shape[1]
        pa = sdpa(qh, cache.layer_k[i][None], cache.layer_v[i][None],
                  np.ones((1, t_all), dtype=bool), model._SCALE)
        att = model._merge_heads(pa.output)
        x = x + (_mm(att, params[f"{p}.attn.wo"], tag="proj") + params[f"{p}.attn.bo"])
        y2, _ = model._ln_fwd(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        u = _mm(y2, params[f"{p}.ffn.w1"], tag="ffn") + params[f"{p}.ffn.b1"]
        a = kernels.gelu(u)
        x = x + (_mm(a, params[f"{p}.ffn.w2"], tag="ffn") + params[f"{p}.ffn.b2"])
    xf, _ = model._ln_fwd(x, params["dec.final_ln.g"], params["dec.final_ln.b"])
    logits = cfg.logit_mult * _mm(xf, params["embed.weight"].T, tag="head")
    cache.generated_count += 1
    return logits[0, 0], cache


# ---------------------------------------------------------------------------
# sampling and the full generation loop

def _sample_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    scaled = logits.astype(np.float64) / temperature
    scaled -= scaled.max()
    p = np.exp(scaled)
    p /= p.sum()
    return int(rng.choice(logits.shape[0], p=p))


@dataclass
class GenerationReport:
    tokens: list[int]
    ttft_ops: int
    decode_ops: list[int] = field(default_factory=list)
    kv_bytes: int = 0
    prefix_cache: PrefixCache | None = None

    @property
    def per_token_ops(self) -> float:
        steady = self.decode_ops[1:] if len(self.decode_ops) > 1 else self.decode_ops
        return float(np.mean(steady)) if steady else 0.0

    def to_record(self) -> dict:
        return {
            "ttft_ops": self.ttft_ops,
            "per_token_ops": self.per_token_ops,
            "kv_bytes": self.kv_bytes,
            "tokens": self.tokens,
        }


def generate(
    cfg: ModelConfig,
    params,
    arch: str,
    prompt: np.ndarray,
    max_new: int,
    *,
    temperature: float = 0.0,
    seed: int = 0,
    prefix_cache: PrefixCache | None = None,
) -> GenerationReport:
    """Greedy or temperature sampling with exact op accounting.

    ttft_ops covers everything needed for the first sampled token (context
    phase plus the seed decode step for the double decoder; the prefill for
    the baseline); decode_ops holds each subsequent step's matmul FLOPs.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or prompt.shape[0] < 2:
        raise ValueError("prompt must contain at least 2 token ids")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    rng = np.random.default_rng(seed)
    b = int(params["embed.weight"].dtype.itemsize)
    new_tokens: list[int] = []
    decode_ops: list[int] = []

    if arch == DOUBLE_DECODER:
        ctx_tokens = prompt[:-1]
        with count_flops() as c_ctx:
            _, cache, new_prefix = context_phase(cfg, params, ctx_tokens, prefix_cache)
        seed_pos = prompt.shape[0] - 1
        with count_flops() as c_first:
            logits, cache = decode_step(cfg, params, cache, int(prompt[-1]), seed_pos)
        ttft = c_ctx.total + c_first.total
        tok = _sample_token(logits, temperature, rng)
        new_tokens.append(tok)
        for j in range(1, max_new):
            with count_flops() as c_step:
                logits, cache = decode_step(cfg, params, cache, tok, seed_pos + j)
            decode_ops.append(c_step.total)
            tok = _sample_token(logits, temperature, rng)
            new_tokens.append(tok)
        return GenerationReport(
            tokens=new_tokens, ttft_ops=ttft,
            decode_ops=[c_first.total] + decode_ops,
            kv_bytes=cache.kv_bytes(b), prefix_cache=new_prefix,
        )

    with count_flops() as c_prefill:
        logits, cache = decoder_prefill(cfg, params, prompt)
    tok = _sample_token(logits, temperature, rng)
    new_tokens.append(tok)
    first_ops = None
    for j in range(1, max_new):
        with count_flops() as c_step:
            logits, cache = decoder_decode_step(cfg, params, cache, tok, prompt.shape[0] + j - 1)
        if first_ops is None:
            first_ops = c_step.total
        decode_ops.append(c_step.total)
        tok = _sample_token(logits, temperature, rng)
        new_tokens.append(tok)
    return GenerationReport(
        tokens=new_tokens, ttft_ops=c_prefill.total,
        decode_ops=decode_ops, kv_bytes=cache.kv_bytes(b),
    )
