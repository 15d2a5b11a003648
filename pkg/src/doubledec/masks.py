"""Boolean attention masks: causal, within-block/cross-block, and prefix-LM.

All masks are (query row, key column) boolean matrices. The within-block mask
is causal and block-diagonal; the cross-block mask admits every key whose
block strictly precedes the query's block. Their union over (t, s) with
s <= t is exactly the causal mask, and they are disjoint, so every causal
(query, key) pair is covered by exactly one of the two attention sources.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .partition import BlockPartition, validate


class BadBreakpoint(ValueError):
    """Prefix-LM breakpoint outside (0, seq_len)."""


@dataclass(frozen=True)
class AttentionMaskPair:
    """Within-block self mask and strictly-earlier-block cross mask."""

    self_mask: np.ndarray
    cross_mask: np.ndarray

    def __post_init__(self):
        self.self_mask.setflags(write=False)
        self.cross_mask.setflags(write=False)

    @property
    def seq_len(self) -> int:
        return self.self_mask.shape[0]


def causal_mask(seq_len: int) -> np.ndarray:
    """Lower-triangular (including diagonal) boolean matrix."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def block_masks(p: BlockPartition) -> AttentionMaskPair:
    """Dense within-block and cross-block masks for a partition."""
    ids = p.block_ids()
    same_block = ids[:, None] == ids[None, :]
    causal = causal_mask(p.seq_len)
    self_mask = same_block & causal
    cross_mask = ids[None, :] < ids[:, None]
    return AttentionMaskPair(self_mask=self_mask, cross_mask=cross_mask)


def block_mask_predicates(
    p: BlockPartition,
) -> tuple[Callable[[int, int], bool], Callable[[int, int], bool]]:
    """Index-predicate form of block_masks: (self_allowed, cross_allowed).

    Lets callers test single (query, key) pairs without materializing the
    T x T matrices; must agree entry-for-entry with block_masks.
    """

    def self_allowed(t: int, s: int) -> bool:
        return s <= t and p.block_of(t) == p.block_of(s)

    def cross_allowed(t: int, s: int) -> bool:
        return p.block_of(s) < p.block_of(t)

    return self_allowed, cross_allowed


def prefix_lm_mask(breakpoint: int, seq_len: int) -> AttentionMaskPair:
    """Two-block mask pair: prefix as cross context, suffix as active block."""
    if not 0 < breakpoint < seq_len:
        raise BadBreakpoint(f"breakpoint {breakpoint} not in (0, {seq_len})")
    return block_masks(validate((0, breakpoint, seq_len), seq_len))


def render_masks(pair: AttentionMaskPair, labels: list[str] | None = None) -> str:
    """ASCII grid of a mask pair, queries as rows and keys as columns.

    's' marks within-block self attention, 'x' cross attention, '.' blocked.
    """
    t = pair.seq_len
    if labels is None:
        labels = [str(i) for i in range(t)]
    width = max(len(lab) for lab in labels)
    header = " " * (width + 1) + " ".join(lab.rjust(width) for lab in labels)
    lines = [header]
    for q in range(t):
        cells = []
        for k in range(t):
            if pair.self_mask[q, k]:
                cells.append("s")
            elif pair.cross_mask[q, k]:
                cells.append("x")
            else:
                cells.append(".")
        lines.append(labels[q].rjust(width) + " " + " ".join(c.rjust(width) for c in cells))
    return "\n".join(lines)
