"""Benchmark the numba kernels against the pure-NumPy fallbacks.

Times each hot kernel at training-like shapes and one full train step per
backend. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--seq-len 512] [--repeats 5]
"""

import argparse
import time

import numpy as np

from doubledec import kernels, model, training
from doubledec.kernels import numpy_backend

try:
    from doubledec.kernels import numba_backend
except ImportError:
    numba_backend = None


def timeit(fn, repeats):
    fn()  # warmup (and JIT compile on the numba side)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(seq_len, repeats, dtype=np.float32):
    rng = np.random.default_rng(0)
    heads, dh, d = 8, 64, 512
    scores = rng.standard_normal((heads, seq_len, seq_len)).astype(dtype)
    mask = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    probs, lse = numpy_backend.masked_lse_softmax(scores, mask)
    dpv = rng.standard_normal(scores.shape).astype(dtype)
    rho = rng.standard_normal((heads, seq_len)).astype(dtype)
    x_rope = rng.standard_normal((heads, seq_len, dh)).astype(dtype)
    inv = 10000.0 ** (-np.arange(0, dh, 2, dtype=np.float64) / dh)
    pos = np.arange(seq_len)
    u = rng.standard_normal((seq_len, 4 * d)).astype(dtype)
    n_params = 2_000_000
    p = rng.standard_normal(n_params).astype(dtype)
    g = rng.standard_normal(n_params).astype(dtype)
    m = np.zeros(n_params, dtype=dtype)
    v = np.zeros(n_params, dtype=dtype)
    logits = rng.standard_normal((seq_len * 4, 259)).astype(dtype)
    targets = rng.integers(0, 259, seq_len * 4)

    cases = [
        ("masked_lse_softmax", lambda b: b.masked_lse_softmax(scores, mask)),
        ("probs_from_lse", lambda b: b.probs_from_lse(scores, lse, mask)),
        ("attn_score_grad", lambda b: b.attn_score_grad(probs, dpv, rho, rho)),
        ("rope_rotate", lambda b: b.rope_rotate(x_rope, pos, inv, 1.0)),
        ("gelu", lambda b: b.gelu(u)),
        ("gelu_grad", lambda b: b.gelu_grad(u, u)),
        ("adamw_update", lambda b: b.adamw_update(p, g, m, v, 1e-3, 0.9, 0.95,
                                                  1e-8, 0.1, 0.1, 0.05)),
        ("xent_rows", lambda b: b.xent_rows(logits, targets)),
    ]
    print(f"\nkernel timings (seq_len={seq_len}, heads={heads}, {np.dtype(dtype).name})")
    print(f"{'kernel':<20} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, call in cases:
        t_np = timeit(lambda: call(numpy_backend), repeats)
        if numba_backend is None:
            print(f"{name:<20} {t_np * 1e3:>10.2f}ms {'n/a':>12}")
            continue
        t_nb = timeit(lambda: call(numba_backend), repeats)
        print(f"{name:<20} {t_np * 1e3:>10.2f}ms {t_nb * 1e3:>10.2f}ms {t_np / t_nb:>8.2f}x")


def bench_train_step(seq_len, repeats):
    cfg = model.ModelConfig(d=128, ctx_layers=4, gen_layers=2,
                            max_seq_len=max(seq_len, 256))
    tc = training.TrainConfig(batch_size=4, total_tokens=seq_len * 4, seed=0)
    data = np.random.default_rng(1).integers(0, 259, size=(8, seq_len))
    print(f"\nfull double-decoder train step (d=128, 4+2 layers, B=4, T={seq_len})")
    print(f"{'backend':<10} {'step time':>12}")
    for backend in ("numpy", "numba") if numba_backend else ("numpy",):
        kernels.select_backend(backend)
        params = model.init_params(cfg, model.DOUBLE_DECODER, np.random.default_rng(0))
        state = training.TrainState(params=params,
                                    opt=training.OptState.zeros_like(params))
        groups = training.mup_param_groups(cfg, params, tc, model.DOUBLE_DECODER)
        batch = training.pretrain_collate(data, 0, tc, model.DOUBLE_DECODER, seq_len)

        def step():
            training.train_step(cfg, tc, model.DOUBLE_DECODER, state.params, state.opt,
                                groups, batch, 1, 100)

        print(f"{backend:<10} {timeit(step, repeats) * 1e3:>10.1f}ms")
    kernels.select_backend("auto")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--seq-len", type=int, default=512)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"available backends: {kernels.available_backends()}")
    bench_kernels(args.seq_len, args.repeats)
    bench_train_step(args.seq_len, args.repeats)
