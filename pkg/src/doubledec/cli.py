"""Command-line entry point: train, sft, eval, generate, cost, sweep-lr.

Configuration comes from an optional JSON file plus flag overrides (flags
win). SEED and METRICS_DIR environment variables override io.seed and the
metrics file location. Exit codes are stable per error class:

    0  success
    2  configuration error (unknown key, unsupported architecture, bad value)
    3  data / file error (missing corpus, unreadable checkpoint, empty split)
    4  checkpoint/config mismatch (architecture or width differs)
    5  numeric failure (non-finite loss)
    1  anything else
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import costmodel, data as data_mod, inference, model, training
from .checkpoint import (CheckpointError, load_checkpoint, merge_train_state,
                         save_checkpoint, split_train_state)
from .config import ConfigError, RunConfig
from .masks import block_masks, render_masks
from .model import DECODER_ONLY, DOUBLE_DECODER
from .partition import sample as sample_partition
from .training import NonFiniteLoss, TrainState, OptState, step_rng

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MISMATCH = 4
EXIT_NUMERIC = 5


class MismatchError(ValueError):
    """Checkpoint and requested config disagree on architecture or shape."""


# ---------------------------------------------------------------------------
# config assembly

def _load_run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for override in getattr(args, "set", None) or []:
        if "=" not in override:
            raise ConfigError(f"--set expects section.key=value, got '{override}'")
        dotted, value = override.split("=", 1)
        rc.set_override(dotted, value)
    shortcut_map = {
        "arch": ("model", "arch"), "d": ("model", "d"),
        "corpus": ("data", "corpus"), "seq_len": ("data", "seq_len"),
        "total_tokens": ("train", "total_tokens"), "batch_size": ("train", "batch_size"),
        "seed": ("io", "seed"), "checkpoint_dir": ("io", "checkpoint_dir"),
        "metrics": ("io", "metrics_path"),
    }
    for attr, (section, key) in shortcut_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            rc.set_override(f"{section}.{key}", json.dumps(value))
    if os.environ.get("SEED"):
        rc.io.seed = int(os.environ["SEED"])
    if os.environ.get("METRICS_DIR"):
        rc.io.metrics_path = os.path.join(
            os.environ["METRICS_DIR"], os.path.basename(rc.io.metrics_path)
        )
    return rc


def _load_splits(rc: RunConfig):
    corpus = rc.data.corpus
    if not corpus:
        raise FileNotFoundError("no corpus configured (data.corpus / --corpus)")
    if not os.path.exists(corpus):
        raise FileNotFoundError(f"corpus file not found: {corpus}")
    if rc.data.tokenizer != "byte":
        raise ConfigError(f"unsupported tokenizer '{rc.data.tokenizer}' (only 'byte')")
    if rc.model.vocab_size != data_mod.VOCAB_SIZE:
        raise ConfigError(
            f"byte tokenizer needs vocab_size {data_mod.VOCAB_SIZE}, got {rc.model.vocab_size}"
        )
    splits = data_mod.load_corpus(corpus, rc.data.seq_len)
    if splits.train.shape[0] == 0:
        raise FileNotFoundError(f"corpus {corpus} yields no packed training sequences")
    return splits


class _MetricsWriter:
    """NDJSON metrics plus a .timing sidecar for wall-clock numbers.

    Wall-clock goes to the sidecar so metrics files are byte-identical
    across reruns with the same config and seed.
    """

    def __init__(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.f = open(path, "w", encoding="utf-8")
        self.timing = open(path + ".timing", "w", encoding="utf-8")

    def __call__(self, record: dict, timing: dict) -> None:
        self.f.write(json.dumps(record) + "\n")
        self.timing.write(json.dumps(timing) + "\n")

    def close(self) -> None:
        self.f.close()
        self.timing.close()


def _save_state(path, rc: RunConfig, arch: str, state: TrainState) -> None:
    config = rc.to_dict()
    config["resume"] = {"arch": arch, "step": state.step, "tokens_seen": state.tokens_seen}
    save_checkpoint(path, config, merge_train_state(state.params, state.opt.m, state.opt.v))


def _load_state(path) -> tuple[dict, str, TrainState]:
    config, tensors = load_checkpoint(path)
    params, m, v = split_train_state(tensors)
    resume = config.get("resume", {})
    arch = resume.get("arch", config.get("model", {}).get("arch", DOUBLE_DECODER))
    state = TrainState(
        params=params,
        opt=OptState(m=m, v=v) if m else OptState.zeros_like(params),
        step=int(resume.get("step", 0)),
        tokens_seen=int(resume.get("tokens_seen", 0)),
    )
    return config, arch, state


def _check_model_match(rc: RunConfig, ckpt_config: dict) -> None:
    ck_model = ckpt_config.get("model", {})
    ours = rc.to_dict()["model"]
    for key in ("arch", "d", "layers", "ctx_layers", "gen_layers", "vocab_size"):
        if key in ck_model and ck_model[key] != ours[key]:
            raise MismatchError(
                f"checkpoint model.{key}={ck_model[key]} differs from configured {ours[key]}"
            )


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    rc = _load_run_config(args)
    arch = rc.validate_arch()
    mcfg = rc.model_config()
    tc = rc.train_config()
    splits = _load_splits(rc)

    state = None
    if args.resume:
        ckpt_config, ck_arch, state = _load_state(args.resume)
        _check_model_match(rc, ckpt_config)
        if ck_arch != arch:
            raise MismatchError(f"checkpoint arch {ck_arch} != configured {arch}")

    if args.dump_masks:
        t = min(rc.data.seq_len, 48)
        if arch == DOUBLE_DECODER:
            rng = step_rng(tc.seed, 1, 0)
            part = sample_partition(rng, t, min_blocks=2, max_blocks=min(6, t // 4),
                                    min_block_len=max(1, min(tc.min_block_len, t // 6)))
            print(f"partition {part.serialize()} (first {t} positions shown)")
            print(render_masks(block_masks(part)))
        else:
            from .masks import causal_mask
            from .masks import AttentionMaskPair
            cm = causal_mask(t)
            print(render_masks(AttentionMaskPair(self_mask=cm, cross_mask=np.zeros_like(cm))))

    os.makedirs(rc.io.checkpoint_dir, exist_ok=True)
    writer = _MetricsWriter(rc.io.metrics_path)
    final_path = os.path.join(rc.io.checkpoint_dir, "model_final.ckpt")

    holder: dict = {}

    def on_step(record, timing):
        writer(record, timing)
        interval = tc.checkpoint_interval
        if interval and holder["state"].step % interval == 0:
            path = os.path.join(rc.io.checkpoint_dir, f"model_step{holder['state'].step}.ckpt")
            _save_state(path, rc, arch, holder["state"])

    try:
        if state is None:
            params = model.init_params(mcfg, arch, np.random.default_rng(tc.seed))
            state = TrainState(params=params, opt=OptState.zeros_like(params))
        holder["state"] = state
        state, records = training.run_training(
            mcfg, tc, arch, splits.train, training.pretrain_collate, state, on_step=on_step
        )
    finally:
        writer.close()
    _save_state(final_path, rc, arch, state)
    print(json.dumps({
        "checkpoint": final_path, "steps": state.step, "tokens": state.tokens_seen,
        "final_loss": records[-1]["loss"] if records else None,
        "metrics": rc.io.metrics_path,
    }))
    return EXIT_OK


def cmd_sft(args) -> int:
    rc = _load_run_config(args)
    ckpt_config, arch, state = _load_state(args.checkpoint)
    if getattr(args, "config", None) or args.arch or args.d:
        _check_model_match(rc, ckpt_config)
    else:
        # adopt the checkpoint's recorded configuration for model shape
        rc_ck = RunConfig.from_dict({k: v for k, v in ckpt_config.items() if k != "resume"})
        rc.model = rc_ck.model
    rc.model.arch = arch
    mcfg = rc.model_config()
    tc = rc.train_config()
    splits = _load_splits(rc)

    sft_tokens = args.tokens if args.tokens else int(round(tc.sft_token_frac * state.tokens_seen))
    writer = _MetricsWriter(rc.io.metrics_path)
    try:
        sft_state, records = training.sft_prefix_lm(
            mcfg, tc, arch, state, splits.train, sft_tokens=sft_tokens, on_step=writer
        )
    finally:
        writer.close()
    eval_holdout = training.evaluate_prefix_lm(
        mcfg, arch, sft_state.params, splits.holdout,
        fracs=tc.eval_fracs, max_sequences=tc.eval_sequences,
    )
    eval_train = training.evaluate_prefix_lm(
        mcfg, arch, sft_state.params, splits.train,
        fracs=tc.eval_fracs, max_sequences=tc.eval_sequences,
    )
    os.makedirs(rc.io.checkpoint_dir, exist_ok=True)
    out_path = os.path.join(rc.io.checkpoint_dir, "model_sft.ckpt")
    sft_state.tokens_seen += state.tokens_seen
    _save_state(out_path, rc, arch, sft_state)
    print(json.dumps({
        "checkpoint": out_path, "sft_tokens": sft_tokens,
        "eval_holdout": eval_holdout, "eval_train": eval_train,
        "final_loss": records[-1]["loss"] if records else None,
    }))
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _load_run_config(args)
    ckpt_config, arch, state = _load_state(args.checkpoint)
    rc_ck = RunConfig.from_dict({k: v for k, v in ckpt_config.items() if k != "resume"})
    rc.model = rc_ck.model
    if not rc.data.corpus:
        rc.data = rc_ck.data
    mcfg = rc.model_config()
    tc = rc.train_config()
    splits = _load_splits(rc)
    result = {
        "eval_train": training.evaluate_prefix_lm(
            mcfg, arch, state.params, splits.train,
            fracs=tc.eval_fracs, max_sequences=tc.eval_sequences,
        ),
        "eval_holdout": training.evaluate_prefix_lm(
            mcfg, arch, state.params, splits.holdout,
            fracs=tc.eval_fracs, max_sequences=tc.eval_sequences,
        ),
        "train_sequences": int(splits.train.shape[0]),
        "holdout_sequences": int(splits.holdout.shape[0]),
    }
    print(json.dumps(result))
    return EXIT_OK


def _load_prefix_cache(path) -> inference.PrefixCache | None:
    if not path or not os.path.exists(path):
        return None
    with np.load(path) as z:
        n_layers = int(z["n_layers"])
        return inference.PrefixCache(
            tokens=z["tokens"],
            layer_k=[z[f"k{i}"] for i in range(n_layers)],
            layer_v=[z[f"v{i}"] for i in range(n_layers)],
            latents=z["latents"],
        )


def _save_prefix_cache(path, cache: inference.PrefixCache) -> None:
    arrays = {"tokens": cache.tokens, "latents": cache.latents,
              "n_layers": np.asarray(len(cache.layer_k))}
    for i, (k, v) in enumerate(zip(cache.layer_k, cache.layer_v)):
        arrays[f"k{i}"] = k
        arrays[f"v{i}"] = v
    np.savez(path, **arrays)


def cmd_generate(args) -> int:
    rc = _load_run_config(args)
    ckpt_config, arch, state = _load_state(args.checkpoint)
    rc_ck = RunConfig.from_dict({k: v for k, v in ckpt_config.items() if k != "resume"})
    rc.model = rc_ck.model
    mcfg = rc.model_config()
    prompt_ids = np.asarray([data_mod.BOS_ID] + data_mod.encode_text(args.prompt), dtype=np.int64)
    if prompt_ids.shape[0] + args.max_new > mcfg.max_seq_len:
        raise ConfigError(
            f"prompt ({prompt_ids.shape[0]} ids) + max_new ({args.max_new}) exceeds "
            f"max_seq_len {mcfg.max_seq_len}"
        )
    prefix_cache = None
    if args.prefix_cache and arch == DOUBLE_DECODER:
        prefix_cache = _load_prefix_cache(args.prefix_cache)
    report = inference.generate(
        mcfg, state.params, arch, prompt_ids, args.max_new,
        temperature=args.temperature, seed=rc.io.seed, prefix_cache=prefix_cache,
    )
    if args.prefix_cache and report.prefix_cache is not None:
        _save_prefix_cache(args.prefix_cache, report.prefix_cache)
    print(data_mod.decode_ids(report.tokens))
    print(json.dumps(report.to_record()))
    return EXIT_OK


def cmd_cost(args) -> int:
    if args.sweep:
        arches = args.arch.split(",") if args.arch else [DECODER_ONLY, DOUBLE_DECODER]
        ds = [int(x) for x in args.sweep_d.split(",")]
        ts = [int(x) for x in args.sweep_t.split(",")]
        layer_counts = [int(x) for x in args.sweep_layers.split(",")]
        sys.stdout.write(costmodel.sweep_csv(arches, ds, ts, layer_counts, b=args.bytes_per_activation))
        return EXIT_OK
    arch = args.arch or DOUBLE_DECODER
    report = costmodel.build_cost_report(
        arch, args.d, layers=args.layers, l_enc=args.ctx_layers, l_dec=args.gen_layers,
        t=args.seq_len, t_in=args.t_in or args.seq_len, t_out=args.t_out,
        b=args.bytes_per_activation,
    )
    if args.audit and arch in (DECODER_ONLY, DOUBLE_DECODER):
        cfg = model.ModelConfig(
            d=args.d, layers=args.layers,
            ctx_layers=report.l_enc or 8, gen_layers=report.l_dec or 4,
            max_seq_len=max(args.seq_len, 2048),
        )
        audit = costmodel.layer_walk_audit(cfg, arch, args.seq_len)
        match = "exact" if audit == report.train_flops_per_seq else f"MISMATCH ({audit:,})"
        report.notes.append(f"layer-walk audit: {match}")
    if args.json:
        print(costmodel.report_json(report))
    else:
        print(costmodel.format_report(report))
    return EXIT_OK


def cmd_sweep_lr(args) -> int:
    rc = _load_run_config(args)
    arch = rc.validate_arch()
    tc = rc.train_config()
    splits = _load_splits(rc)
    lrs = [float(x) for x in args.lrs.split(",")]
    widths = [int(x) for x in args.widths.split(",")]
    if not lrs or not widths:
        raise ConfigError("sweep grid is empty")
    rows = []
    for width in widths:
        for lr in lrs:
            mcfg_w = replace(rc.model_config(), d=width)
            tc_run = replace(tc, base_lr=lr)
            try:
                with np.errstate(all="ignore"):
                    state, records = training.pretrain(mcfg_w, tc_run, arch, splits.train)
                tail = max(1, len(records) // 10)
                final_loss = float(np.mean([r["loss"] for r in records[-tail:]]))
            except NonFiniteLoss:
                final_loss = float("inf")  # diverged cell stays in the grid
            rows.append({"arch": arch, "width": width, "lr": lr, "final_loss": final_loss})
    lines = ["arch,width,lr,final_loss"]
    for row in rows:
        lines.append(f"{row['arch']},{row['width']},{row['lr']},{row['final_loss']}")
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    argmin = {}
    for width in widths:
        per = [r for r in rows if r["width"] == width]
        best = min(per, key=lambda r: r["final_loss"])
        argmin[str(width)] = best["lr"]
    print(json.dumps({"argmin_lr": argmin}))
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--arch", help="decoder_only or double_decoder")
    p.add_argument("--d", type=int, help="hidden width")
    p.add_argument("--corpus", help="plain-text corpus path")
    p.add_argument("--seq-len", dest="seq_len", type=int, help="packed sequence length")
    p.add_argument("--total-tokens", dest="total_tokens", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--metrics", help="metrics NDJSON path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doubledec",
                                     description="block-partitioned double-decoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain from a text corpus")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--dump-masks", action="store_true",
                   help="print the first batch's attention masks as an ASCII grid")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sft", help="prefix-LM fine-tune a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", type=int, help="SFT token budget (default: 10%% of pretraining)")
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("eval", help="prefix-LM eval on train and held-out splits")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="KV-cached generation from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", dest="max_new", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0, help="0 = greedy")
    p.add_argument("--prefix-cache", dest="prefix_cache",
                   help="file to persist/reuse the context prefix cache")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("cost", help="analytical FLOP/memory/latency report")
    p.add_argument("--arch", help="decoder_only, double_decoder, or encoder_decoder")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--ctx-layers", dest="ctx_layers", type=int)
    p.add_argument("--gen-layers", dest="gen_layers", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=2048)
    p.add_argument("--t-in", dest="t_in", type=int)
    p.add_argument("--t-out", dest="t_out", type=int, default=256)
    p.add_argument("--bytes-per-activation", dest="bytes_per_activation", type=int, default=2)
    p.add_argument("--json", action="store_true")
    p.add_argument("--audit", action="store_true", help="cross-check against the layer walk")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--sweep-d", dest="sweep_d", default="64,256,512")
    p.add_argument("--sweep-t", dest="sweep_t", default="512,2048")
    p.add_argument("--sweep-layers", dest="sweep_layers", default="12")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep-lr", help="learning-rate x width grid with width-scaled rates")
    _add_config_flags(p)
    p.add_argument("--lrs", required=True, help="comma-separated learning rates")
    p.add_argument("--widths", required=True, help="comma-separated hidden widths")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_sweep_lr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MismatchError as e:
        print(f"checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FileNotFoundError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
