"""Matrix-multiply FLOP metering.

All model/inference matmuls route through matmul() here. When a counter is
active, each call adds 2*m*n*k times the broadcast batch size, giving exact
integer operation counts for TTFT/per-token reports and for checking the
analytical cost model against what the code actually executes.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from math import prod

import numpy as np

_stack: list["FlopCounter"] = []


@dataclass
class FlopCounter:
    total: int = 0
    by_tag: dict[str, int] = field(default_factory=dict)


@contextmanager
def count_flops():
    """Context manager yielding a FlopCounter active for its duration."""
    counter = FlopCounter()
    _stack.append(counter)
    try:
        yield counter
    finally:
        _stack.pop()


def matmul_flops(a_shape, b_shape) -> int:
    """2*m*n*k for a (..., m, k) @ (..., k, n), batch dims broadcast."""
    m, k = a_shape[-2], a_shape[-1]
    n = b_shape[-1]
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2])
    return 2 * m * n * k * prod(batch)


def matmul(a: np.ndarray, b: np.ndarray, tag: str = "") -> np.ndarray:
    if _stack:
        flops = matmul_flops(a.shape, b.shape)
        for counter in _stack:
            counter.total += flops
            if tag:
                counter.by_tag[tag] = counter.by_tag.get(tag, 0) + flops
    return np.matmul(a, b)
