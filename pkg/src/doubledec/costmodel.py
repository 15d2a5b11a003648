"""Analytical FLOP, parameter, KV-memory, and latency-ratio calculators.

All counts are exact integers. Train-time FLOPs follow the standard
accounting: matmul FLOPs of one forward pass times 3 (forward plus the two
backward passes), keeping only projection, attention, and FFN matmuls;
norms, activations, softmax, and the vocabulary head are sub-leading and
ignored. Attention is counted at unmasked density (a causal mask halves the
useful work but not the dense matmul).

Closed forms, per layer and already including the x3:
    decoder-only      72*T*d^2 + 12*T^2*d
    double decoder    76*T*d^2 + 12*T^2*d   (2:1 context:generation split,
                      generation layers carry six projections but are
                      counted at single-SDPA density -- the ideal
                      implementation; the naive two-SDPA fast path is
                      available as a separate audit column)
    encoder-decoder   (52*T_in + 28*T_out)*d^2
                      + (4*T_out^2 + 4*T_in*T_out + 8*T_in^2)*d

layer_walk_audit() recomputes these by enumerating every matmul the model
executes and summing 2*m*n*k, so formula and walk can be asserted equal
integer-exactly rather than to a tolerance.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

from .model import DECODER_ONLY, DOUBLE_DECODER, ModelConfig

ENCODER_DECODER = "encoder_decoder"


def flops_decoder_only(t: int, d: int, layers: int) -> int:
    """Train-time FLOPs of a causal decoder stack (per sequence)."""
    return layers * (72 * t * d * d + 12 * t * t * d)


def flops_double_decoder(t: int, d: int, layers: int) -> int:
    """Train-time FLOPs of a 2:1-split double decoder with `layers` total layers."""
    return layers * (76 * t * d * d + 12 * t * t * d)


def flops_encoder_decoder(t_in: int, t_out: int, d: int, layers: int) -> int:
    """Train-time FLOPs of a 2:1-split encoder-decoder under span corruption."""
    return layers * (
        (52 * t_in + 28 * t_out) * d * d
        + (4 * t_out * t_out + 4 * t_in * t_out + 8 * t_in * t_in) * d
    )


def six_nt_heuristic(n_params: int, tokens: int) -> int:
    """The width-blind 6*N*T heuristic, for comparison columns only."""
    return 6 * n_params * tokens


def inference_ratios(l_enc: int, l_dec: int, l_baseline: int):
    """(kv_ratio, ttft_ratio, per_token_ratio) vs an l_baseline-layer decoder.

    KV memory and per-token latency scale with the generation depth,
    time-to-first-token with the context depth.
    """
    if min(l_enc, l_dec, l_baseline) < 1:
        raise ValueError("layer counts must all be >= 1")
    return (
        Fraction(l_dec, l_baseline),
        Fraction(l_enc, l_baseline),
        Fraction(l_dec, l_baseline),
    )


# ---------------------------------------------------------------------------
# parameter census (closed form; model.init_params is the enumeration oracle)

def _causal_layer_params(d: int, ffn_mult: int) -> int:
    attn = 4 * d * d + 4 * d
    ffn = 2 * ffn_mult * d * d + ffn_mult * d + d
    norms = 4 * d
    return attn + ffn + norms


def _dual_layer_params(d: int, ffn_mult: int) -> int:
    return _causal_layer_params(d, ffn_mult) + 2 * d * d + 2 * d  # extra cross K/V


def analytic_param_count(cfg: ModelConfig, arch: str, include_embedding: bool = True) -> int:
    emb = cfg.vocab_size * cfg.d if include_embedding else 0
    if arch == DECODER_ONLY:
        return emb + cfg.layers * _causal_layer_params(cfg.d, cfg.ffn_mult) + 2 * cfg.d
    if arch == DOUBLE_DECODER:
        return (
            emb
            + cfg.ctx_layers * _causal_layer_params(cfg.d, cfg.ffn_mult)
            + cfg.gen_layers * _dual_layer_params(cfg.d, cfg.ffn_mult)
            + 4 * cfg.d
        )
    raise ValueError(f"no parameter census for arch {arch!r}")


# ---------------------------------------------------------------------------
# layer walk

def _causal_layer_matmuls(t: int, d: int, ffn_mult: int) -> list[tuple[str, int, int, int]]:
    dh = 64
    heads = d // dh
    walk = [("proj", t, d, d)] * 4
    walk += [("attn.scores", t, t, dh)] * heads
    walk += [("attn.values", t, dh, t)] * heads
    walk += [("ffn", t, ffn_mult * d, d), ("ffn", t, d, ffn_mult * d)]
    return walk


def _dual_layer_matmuls(t: int, d: int, ffn_mult: int, naive: bool) -> list[tuple[str, int, int, int]]:
    dh = 64
    heads = d // dh
    walk = [("proj", t, d, d)] * 6
    sdpa_count = 2 if naive else 1
    walk += [("attn.scores", t, t, dh)] * (heads * sdpa_count)
    walk += [("attn.values", t, dh, t)] * (heads * sdpa_count)
    walk += [("ffn", t, ffn_mult * d, d), ("ffn", t, d, ffn_mult * d)]
    return walk


def matmul_walk(cfg: ModelConfig, arch: str, t: int, naive: bool = False):
    """Every (tag, m, n, k) matmul of one forward pass, head excluded."""
    walk: list[tuple[str, int, int, int]] = []
    if arch == DECODER_ONLY:
        for _ in range(cfg.layers):
            walk += _causal_layer_matmuls(t, cfg.d, cfg.ffn_mult)
    elif arch == DOUBLE_DECODER:
        for _ in range(cfg.ctx_layers):
            walk += _causal_layer_matmuls(t, cfg.d, cfg.ffn_mult)
        for _ in range(cfg.gen_layers):
            walk += _dual_layer_matmuls(t, cfg.d, cfg.ffn_mult, naive)
    else:
        raise ValueError(f"no layer walk for arch {arch!r}")
    return walk


def layer_walk_audit(cfg: ModelConfig, arch: str, t: int, naive: bool = False) -> int:
    """Sum 2*m*n*k over the walk, times 3 for train time."""
    return 3 * sum(2 * m * n * k for (_, m, n, k) in matmul_walk(cfg, arch, t, naive))


# ---------------------------------------------------------------------------
# reports

ENC_DEC_RATIO_NOTE = (
    "encoder-decoder formula FLOPs at T_in=2048/T_out=256 are 0.713-0.771 of "
    "decoder-only across widths (23-29% fewer); the commonly quoted 21% saving "
    "at these lengths is outside that range for every width, so the formula "
    "value is reported as computed."
)


@dataclass
class CostReport:
    arch: str
    d: int
    layers: int  # total depth (baseline-equivalent)
    l_enc: int | None
    l_dec: int | None
    t_in: int
    t_out: int
    b: int
    train_flops_per_seq: int
    train_flops_naive: int | None
    param_count: int
    nonembed_params: int
    six_nt: int
    kv_cache_bytes: int
    kv_ratio: Fraction
    ttft_ratio: Fraction
    per_token_ratio: Fraction
    notes: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = {
            "arch": self.arch,
            "d": self.d,
            "layers": self.layers,
            "l_enc": self.l_enc,
            "l_dec": self.l_dec,
            "t_in": self.t_in,
            "t_out": self.t_out,
            "b": self.b,
            "train_flops_per_seq": self.train_flops_per_seq,
            "train_flops_naive": self.train_flops_naive,
            "param_count": self.param_count,
            "nonembed_params": self.nonembed_params,
            "six_nt": self.six_nt,
            "kv_cache_bytes": self.kv_cache_bytes,
            "kv_ratio": str(self.kv_ratio),
            "ttft_ratio": str(self.ttft_ratio),
            "per_token_ratio": str(self.per_token_ratio),
            "notes": self.notes,
        }
        return rec


def build_cost_report(
    arch: str,
    d: int,
    *,
    layers: int = 12,
    l_enc: int | None = None,
    l_dec: int | None = None,
    t: int = 2048,
    t_in: int = 2048,
    t_out: int = 256,
    b: int = 2,
    vocab_size: int = 259,
    ffn_mult: int = 4,
) -> CostReport:
    """Assemble the full analytical report for one configuration."""
    if arch == DECODER_ONLY:
        cfg = ModelConfig(d=d, layers=layers, vocab_size=vocab_size, ffn_mult=ffn_mult,
                          max_seq_len=max(t, t_in + t_out))
        flops = flops_decoder_only(t, d, layers)
        naive = None
        n_total = analytic_param_count(cfg, arch)
        n_body = analytic_param_count(cfg, arch, include_embedding=False)
        kv = 2 * d * b * layers * (t_in + t_out)
        ratios = (Fraction(1), Fraction(1), Fraction(1))
        notes = []
    elif arch == DOUBLE_DECODER:
        if l_enc is None or l_dec is None:
            l_enc, l_dec = (2 * layers) // 3, layers - (2 * layers) // 3
        total = l_enc + l_dec
        cfg = ModelConfig(d=d, ctx_layers=l_enc, gen_layers=l_dec, vocab_size=vocab_size,
                          ffn_mult=ffn_mult, max_seq_len=max(t, t_in + t_out))
        # the walk covers any split; it equals flops_double_decoder when 2:1
        flops = layer_walk_audit(cfg, arch, t)
        naive = layer_walk_audit(cfg, arch, t, naive=True)
        n_total = analytic_param_count(cfg, arch)
        n_body = analytic_param_count(cfg, arch, include_embedding=False)
        kv = 2 * d * b * l_dec * (t_in + t_out)
        ratios = inference_ratios(l_enc, l_dec, total)
        notes = []
        layers = total
    elif arch == ENCODER_DECODER:
        if l_enc is None or l_dec is None:
            l_enc, l_dec = (2 * layers) // 3, layers - (2 * layers) // 3
        total = l_enc + l_dec
        flops = flops_encoder_decoder(t_in, t_out, d, total)
        naive = None
        # same substrate as the double decoder minus nothing we model here;
        # parameter census reuses the dual-stack shape for the comparison column
        cfg = ModelConfig(d=d, ctx_layers=l_enc, gen_layers=l_dec, vocab_size=vocab_size,
                          ffn_mult=ffn_mult, max_seq_len=max(t, t_in + t_out))
        n_total = analytic_param_count(cfg, DOUBLE_DECODER)
        n_body = analytic_param_count(cfg, DOUBLE_DECODER, include_embedding=False)
        kv = 2 * d * b * l_dec * (t_in + t_out)
        ratios = inference_ratios(l_enc, l_dec, total)
        notes = [ENC_DEC_RATIO_NOTE]
        layers = total
    else:
        raise ValueError(f"unknown arch {arch!r}")
    return CostReport(
        arch=arch, d=d, layers=layers, l_enc=l_enc, l_dec=l_dec,
        t_in=t_in if arch == ENCODER_DECODER else t,
        t_out=t_out, b=b,
        train_flops_per_seq=flops, train_flops_naive=naive,
        param_count=n_total, nonembed_params=n_body,
        six_nt=six_nt_heuristic(n_body, t_in if arch == ENCODER_DECODER else t),
        kv_cache_bytes=kv,
        kv_ratio=ratios[0], ttft_ratio=ratios[1], per_token_ratio=ratios[2],
        notes=notes,
    )


def format_report(report: CostReport) -> str:
    rows = [
        ("architecture", report.arch),
        ("d / layers", f"{report.d} / {report.layers}"
                       + (f" ({report.l_enc}+{report.l_dec})" if report.l_enc else "")),
        ("tokens (T or T_in/T_out)", f"{report.t_in}" if report.arch != ENCODER_DECODER
         else f"{report.t_in}/{report.t_out}"),
        ("params (total)", f"{report.param_count:,}"),
        ("params (non-embedding)", f"{report.nonembed_params:,}"),
        ("train FLOPs / seq", f"{report.train_flops_per_seq:,}"),
    ]
    if report.train_flops_naive is not None:
        rows.append(("train FLOPs (two-SDPA path)", f"{report.train_flops_naive:,}"))
    rows += [
        ("6NT heuristic", f"{report.six_nt:,}"),
        (f"KV cache bytes (b={report.b})", f"{report.kv_cache_bytes:,}"),
        ("KV ratio vs decoder-only", str(report.kv_ratio)),
        ("TTFT ratio", str(report.ttft_ratio)),
        ("per-token ratio", str(report.per_token_ratio)),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def report_json(report: CostReport) -> str:
    return json.dumps(report.to_record(), sort_keys=True)


def sweep_csv(arches, ds, ts, layer_counts, b: int = 2, t_out: int = 256) -> str:
    """Cartesian sweep emitted as CSV text."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(
        ["arch", "d", "layers", "t", "t_out", "train_flops_per_seq", "six_nt",
         "kv_cache_bytes", "kv_ratio", "ttft_ratio", "per_token_ratio"]
    )
    for arch in arches:
        for d in ds:
            for layers in layer_counts:
                for t in ts:
                    rep = build_cost_report(arch, d, layers=layers, t=t, t_in=t, t_out=t_out, b=b)
                    writer.writerow(
                        [rep.arch, rep.d, rep.layers, t, t_out, rep.train_flops_per_seq,
                         rep.six_nt, rep.kv_cache_bytes, rep.kv_ratio, rep.ttft_ratio,
                         rep.per_token_ratio]
                    )
    return out.getvalue()
