"""Hot-kernel dispatch: numba-jitted loops with a pure-NumPy fallback.

The active backend is chosen once at import from the DOUBLEDEC_BACKEND
environment variable: "numba", "numpy", or "auto" (default; numba when it
imports cleanly). select_backend() switches at runtime, which the kernel
benchmark and backend-equivalence tests use. Both backends implement the
same function set with identical semantics; bit-level results may differ
between backends (summation order), SO a given run is reproducible only
under a fixed backend.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import numpy_backend

_impl: ModuleType = numpy_backend


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        from . import numba_backend  # noqa: F401

        names.append("numba")
    except ImportError:
        pass
    return names


def select_backend(name: str) -> str:
    """Activate a kernel backend by name ("numpy", "numba", or "auto")."""
    global _impl
    if name == "auto":
        name = "numba" if "numba" in available_backends() else "numpy"
    if name == "numpy":
        _impl = numpy_backend
    elif name == "numba":
        from . import numba_backend

        _impl = numba_backend
    else:
        raise ValueError(f"unknown kernel backend {name!r} (numpy, numba, auto)")
    return _impl.NAME


def active_backend() -> str:
    return _impl.NAME


def masked_lse_softmax(scores, mask):
    return _impl.masked_lse_softmax(scores, mask)


def probs_from_lse(scores, lse, mask):
    return _impl.probs_from_lse(scores, lse, mask)


def attn_score_grad(probs, dpv, rho, glse):
    return _impl.attn_score_grad(probs, dpv, rho, glse)


def rope_rotate(x, positions, inv_freq, sign):
    return _impl.rope_rotate(x, positions, inv_freq, sign)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    return _impl.adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2)


def gelu(x):
    return _impl.gelu(x)


def gelu_grad(x, dy):
    return _impl.gelu_grad(x, dy)


def xent_rows(logits, targets):
    return _impl.xent_rows(logits, targets)


select_backend(os.environ.get("DOUBLEDEC_BACKEND", "auto"))
