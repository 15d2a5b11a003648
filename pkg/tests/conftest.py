import numpy as np
import pytest

from doubledec import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Trigger numba compilation once so timed tests measure steady state."""
    if kernels.active_backend() != "numba":
        return
    for dtype in (np.float32, np.float64):
        s = np.zeros((1, 2, 2), dtype=dtype)
        m = np.ones((2, 2), dtype=bool)
        probs, lse = kernels.masked_lse_softmax(s, m)
        kernels.probs_from_lse(s, lse, m)
        kernels.attn_score_grad(probs, s, lse, lse)
        x = np.zeros((1, 2, 64), dtype=dtype)
        inv = 10000.0 ** (-np.arange(0, 64, 2, dtype=np.float64) / 64)
        kernels.rope_rotate(x, np.arange(2), inv, 1.0)
        kernels.gelu(x)
        kernels.gelu_grad(x, x)
        logits = np.zeros((2, 5), dtype=dtype)
        kernels.xent_rows(logits, np.zeros(2, dtype=np.int64))
        flat = np.zeros(4, dtype=dtype)
        kernels.adamw_update(flat.copy(), flat.copy(), flat.copy(), flat.copy(),
                             1e-3, 0.9, 0.95, 1e-8, 0.0, 0.1, 0.05)


def make_corpus_text(n_docs: int, seed: int = 0) -> str:
    """Deterministic word-salad corpus with learnable bigram structure."""
    rng = np.random.default_rng(seed)
    words = np.array([
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
        "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron", "pi",
    ])
    probs = rng.dirichlet(np.ones(len(words)) * 0.6)
    docs = []
    for _ in range(n_docs):
        n = int(rng.integers(30, 90))
        picks = rng.choice(words, size=n, p=probs)
        docs.append(" ".join(picks) + ".")
    return "\n\n".join(docs)
