import json
import os

import numpy as np
import pytest

from conftest import make_corpus_text
from doubledec.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH, main)
from doubledec.config import ConfigError, RunConfig


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_text(make_corpus_text(300, seed=5), encoding="utf-8")
    return str(path)


def run_cli(*argv):
    return main(list(argv))


def train_args(corpus, workdir, arch="double_decoder", seed=3, tokens=4096, extra=()):
    return [
        "train", "--corpus", corpus, "--seq-len", "64", "--total-tokens", str(tokens),
        "--batch-size", "4", "--arch", arch, "--seed", str(seed),
        "--metrics", os.path.join(workdir, "metrics.ndjson"),
        "--checkpoint-dir", os.path.join(workdir, "ck"),
        *extra,
    ]


# ---------------------------------------------------------------------------
# config machinery

def test_run_config_round_trip():
    rc = RunConfig()
    rc.model.d = 128
    rc.train["base_lr"] = 0.02
    rc.io.seed = 9
    text = rc.to_json()
    rc2 = RunConfig.from_json(text)
    assert rc2.to_json() == text
    assert rc2.model.d == 128 and rc2.train["base_lr"] == 0.02 and rc2.io.seed == 9


def test_unknown_keys_are_hard_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"dd": 64}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"extras": {}})
    rc = RunConfig()
    with pytest.raises(ConfigError):
        rc.set_override("train.lr", "0.1")


def test_cli_rejects_out_of_scope_arch(corpus, tmp_path, capsys):
    code = run_cli(*train_args(corpus, str(tmp_path), arch="sed"))
    assert code == EXIT_CONFIG
    assert "out of scope" in capsys.readouterr().err


def test_cli_missing_corpus_exits_data(tmp_path, capsys):
    code = run_cli(*train_args("/nonexistent/corpus.txt", str(tmp_path)))
    assert code == EXIT_DATA
    assert "not found" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train / eval / sft / generate round trip

@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    workdir = str(tmp_path_factory.mktemp("run"))
    code = run_cli(*train_args(corpus, workdir, tokens=6144))
    assert code == 0
    return workdir


def test_train_writes_metrics_and_checkpoint(trained):
    metrics = os.path.join(trained, "metrics.ndjson")
    records = [json.loads(l) for l in open(metrics)]
    assert len(records) == 24  # 6144 tokens / (4*64)
    assert all(set(r) >= {"step", "tokens", "loss", "lr", "grad_norm"} for r in records)
    assert all("partition" in r for r in records)
    assert os.path.exists(os.path.join(trained, "ck", "model_final.ckpt"))
    # wall-clock lives in the sidecar, not the metrics file
    timing = [json.loads(l) for l in open(metrics + ".timing")]
    assert len(timing) == len(records)
    assert all("tokens_per_sec" in t for t in timing)
    assert all("tokens_per_sec" not in r for r in records)


def test_rerun_is_byte_identical(corpus, trained, tmp_path):
    workdir = str(tmp_path)
    assert run_cli(*train_args(corpus, workdir, tokens=6144)) == 0
    a = open(os.path.join(trained, "metrics.ndjson"), "rb").read()
    b = open(os.path.join(workdir, "metrics.ndjson"), "rb").read()
    assert a == b


def test_seed_env_override_changes_run(corpus, trained, tmp_path, monkeypatch):
    workdir = str(tmp_path)
    monkeypatch.setenv("SEED", "99")
    assert run_cli(*train_args(corpus, workdir, tokens=6144)) == 0
    a = open(os.path.join(trained, "metrics.ndjson")).read()
    b = open(os.path.join(workdir, "metrics.ndjson")).read()
    assert a != b


def test_metrics_dir_env_redirects(corpus, tmp_path, monkeypatch):
    target = tmp_path / "mdir"
    target.mkdir()
    monkeypatch.setenv("METRICS_DIR", str(target))
    assert run_cli(*train_args(corpus, str(tmp_path), tokens=1024)) == 0
    assert (target / "metrics.ndjson").exists()


def test_eval_reports_both_splits(trained, corpus, capsys):
    code = run_cli("eval", "--checkpoint", os.path.join(trained, "ck", "model_final.ckpt"),
                   "--corpus", corpus, "--seq-len", "64")
    assert code == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(out) >= {"eval_train", "eval_holdout", "train_sequences", "holdout_sequences"}
    assert np.isfinite(out["eval_train"]) and np.isfinite(out["eval_holdout"])


def test_eval_untrained_model_near_uniform(corpus, tmp_path, capsys):
    # write a checkpoint holding freshly initialized parameters (zero steps)
    from doubledec.checkpoint import save_checkpoint
    from doubledec.model import init_params

    rc = RunConfig()
    rc.data.corpus = corpus
    rc.data.seq_len = 64
    config = rc.to_dict()
    config["resume"] = {"arch": "double_decoder", "step": 0, "tokens_seen": 0}
    params = init_params(rc.model_config(), "double_decoder", np.random.default_rng(0))
    ckpt = str(tmp_path / "untrained.ckpt")
    save_checkpoint(ckpt, config, params)
    code = run_cli("eval", "--checkpoint", ckpt, "--corpus", corpus, "--seq-len", "64")
    assert code == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["eval_holdout"] == pytest.approx(np.log(259), rel=0.05)


def test_sft_and_mismatch_guard(trained, corpus, tmp_path, capsys):
    ckpt = os.path.join(trained, "ck", "model_final.ckpt")
    # width mismatch -> typed error
    code = run_cli("sft", "--checkpoint", ckpt, "--corpus", corpus, "--seq-len", "64",
                   "--d", "128", "--metrics", str(tmp_path / "m.ndjson"),
                   "--checkpoint-dir", str(tmp_path / "ck"))
    assert code == EXIT_MISMATCH
    capsys.readouterr()
    code = run_cli("sft", "--checkpoint", ckpt, "--corpus", corpus, "--seq-len", "64",
                   "--metrics", str(tmp_path / "m.ndjson"),
                   "--checkpoint-dir", str(tmp_path / "ck"))
    assert code == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["sft_tokens"] == 614  # 10% of 6144
    assert np.isfinite(out["eval_holdout"]) and out["eval_holdout"] < np.log(259)
    assert os.path.exists(out["checkpoint"])


def test_generate_prints_text_and_record(trained, capsys):
    ckpt = os.path.join(trained, "ck", "model_final.ckpt")
    code = run_cli("generate", "--checkpoint", ckpt, "--prompt", "alpha beta",
                   "--max-new", "8")
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    record = json.loads(lines[-1])
    assert set(record) == {"ttft_ops", "per_token_ops", "kv_bytes", "tokens"}
    assert len(record["tokens"]) == 8


def test_generate_greedy_is_deterministic(trained, capsys):
    ckpt = os.path.join(trained, "ck", "model_final.ckpt")
    outs = []
    for _ in range(2):
        assert run_cli("generate", "--checkpoint", ckpt, "--prompt", "gamma delta",
                       "--max-new", "6") == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_prefix_cache_reduces_context_ops(trained, tmp_path, capsys):
    ckpt = os.path.join(trained, "ck", "model_final.ckpt")
    cache_file = str(tmp_path / "prefix.npz")
    assert run_cli("generate", "--checkpoint", ckpt, "--prompt", "alpha beta gamma delta",
                   "--max-new", "4", "--prefix-cache", cache_file) == 0
    rec1 = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert run_cli("generate", "--checkpoint", ckpt,
                   "--prompt", "alpha beta gamma delta epsilon",
                   "--max-new", "4", "--prefix-cache", cache_file) == 0
    rec2 = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec2["ttft_ops"] < rec1["ttft_ops"]


def test_resume_matches_uninterrupted_metrics(corpus, tmp_path, capsys):
    # same total budget in both runs (the LR schedule spans the full budget);
    # the mid-run interval checkpoint stands in for an interruption point
    w_full = str(tmp_path / "full")
    assert run_cli(*train_args(corpus, w_full, tokens=4096, seed=5,
                               extra=("--set", "train.checkpoint_interval=8"))) == 0
    capsys.readouterr()
    w_res = str(tmp_path / "resumed")
    assert run_cli(*train_args(corpus, w_res, tokens=4096, seed=5,
                               extra=("--resume", os.path.join(w_full, "ck", "model_step8.ckpt")))) == 0
    full = open(os.path.join(w_full, "metrics.ndjson")).readlines()
    resumed = open(os.path.join(w_res, "metrics.ndjson")).readlines()
    assert len(full) == 16 and len(resumed) == 8
    assert resumed == full[8:]


def test_dump_masks_flag(corpus, tmp_path, capsys):
    assert run_cli(*train_args(corpus, str(tmp_path), tokens=512, extra=("--dump-masks",))) == 0
    out = capsys.readouterr().out
    assert "partition" in out and "s" in out and "x" in out


def test_cost_sweep_csv(capsys):
    assert run_cli("cost", "--sweep", "--sweep-d", "64,256", "--sweep-t", "512",
                   "--sweep-layers", "12") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("arch,")
    assert len(lines) == 1 + 2 * 2  # two arches x two widths


def test_nonfinite_loss_exits_numeric(corpus, tmp_path, capsys):
    # an absurd learning rate blows the parameters up within a few steps
    with np.errstate(all="ignore"):
        code = run_cli(*train_args(corpus, str(tmp_path), tokens=16384,
                                   extra=("--set", "train.base_lr=1e6",
                                          "--set", "train.grad_clip=1e9")))
    from doubledec.cli import EXIT_NUMERIC
    assert code == EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_sweep_lr_single_cell_degenerates_to_one_run(corpus, tmp_path, capsys):
    out_csv = tmp_path / "sweep.csv"
    code = run_cli("sweep-lr", "--corpus", corpus, "--seq-len", "64",
                   "--total-tokens", "1024", "--batch-size", "4",
                   "--arch", "double_decoder", "--lrs", "0.01", "--widths", "64",
                   "--out", str(out_csv))
    assert code == 0
    rows = out_csv.read_text().strip().splitlines()
    assert len(rows) == 2  # header + the single grid cell
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["argmin_lr"] == {"64": 0.01}


def test_cost_json_record(capsys):
    assert run_cli("cost", "--arch", "decoder_only", "--d", "256", "--seq-len", "2048",
                   "--json", "--audit") == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["train_flops_per_seq"] == 12 * 22_548_578_304
    assert any("audit: exact" in n for n in rec["notes"])
