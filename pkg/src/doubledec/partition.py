"""Block partitions: validated cut sequences and a seedable random sampler.

A partition splits the token range [0, T) into contiguous blocks via strictly
increasing cut indices 0 = b_0 < b_1 < ... < b_K = T. The generation decoder's
attention masks are derived entirely from these cuts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PartitionError(ValueError):
    """Base class for invalid partition construction."""


class Empty(PartitionError):
    """Fewer than two cut indices."""


class BadEndpoints(PartitionError):
    """First cut is not 0 or last cut is not the sequence length."""


class NonMonotonic(PartitionError):
    """Cut indices are not strictly increasing."""


class OutOfRange(PartitionError):
    """Token index outside [0, seq_len)."""


class Infeasible(PartitionError):
    """Sampling constraints cannot be satisfied."""


@dataclass(frozen=True)
class BlockPartition:
    """Immutable, validated block partition of a length-T sequence."""

    cuts: tuple[int, ...]
    seq_len: int
    # searchsorted table, built once; excluded from equality/repr
    _starts: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_starts", np.asarray(self.cuts[:-1], dtype=np.int64))

    @property
    def num_blocks(self) -> int:
        return len(self.cuts) - 1

    def block_of(self, t: int) -> int:
        """Index k of the block containing token position t."""
        if not 0 <= t < self.seq_len:
            raise OutOfRange(f"position {t} outside [0, {self.seq_len})")
        return int(np.searchsorted(self._starts, t, side="right")) - 1

    def block_ids(self) -> np.ndarray:
        """Length-T array mapping every position to its block index."""
        return np.searchsorted(self._starts, np.arange(self.seq_len), side="right") - 1

    def blocks(self) -> list[tuple[int, int]]:
        """Half-open (start, stop) ranges of every block."""
        return [(self.cuts[i], self.cuts[i + 1]) for i in range(self.num_blocks)]

    def serialize(self) -> str:
        """Comma-separated cut list, the form used in metrics logs."""
        return ",".join(str(c) for c in self.cuts)


def validate(cuts, seq_len: int) -> BlockPartition:
    """Check all partition invariants and return the validated partition.

    Raises Empty, BadEndpoints, or NonMonotonic on the first violated
    invariant (checked in that order).
    """
    cuts = tuple(int(c) for c in cuts)
    if len(cuts) < 2:
        raise Empty(f"need at least 2 cuts, got {len(cuts)}")
    if cuts[0] != 0 or cuts[-1] != seq_len:
        raise BadEndpoints(f"cuts must start at 0 and end at {seq_len}, got {cuts[0]}..{cuts[-1]}")
    for a, b in zip(cuts, cuts[1:]):
        if b <= a:
            raise NonMonotonic(f"cuts not strictly increasing at {a} -> {b}")
    return BlockPartition(cuts=cuts, seq_len=seq_len)


def parse(text: str, seq_len: int) -> BlockPartition:
    """Inverse of BlockPartition.serialize."""
    return validate([int(p) for p in text.split(",")], seq_len)


def block_of(p: BlockPartition, t: int) -> int:
    return p.block_of(t)


def sample(
    rng: np.random.Generator,
    seq_len: int,
    min_blocks: int = 2,
    max_blocks: int = 32,
    min_block_len: int = 8,
) -> BlockPartition:
    """Draw a random valid partition.

    The block count is uniform on [min_blocks, max_blocks]; given the count,
    the interior cuts are uniform over all placements that leave every block
    at least min_block_len long. Deterministic for a fixed generator state.
    """
    if min_blocks < 1 or min_blocks > max_blocks:
        raise Infeasible(f"bad block count bounds [{min_blocks}, {max_blocks}]")
    if min_block_len < 1 or max_blocks * min_block_len > seq_len:
        raise Infeasible(
            f"{max_blocks} blocks of >= {min_block_len} tokens do not fit in {seq_len}"
        )
    k = int(rng.integers(min_blocks, max_blocks + 1))
    # Uniform choice among cut sets with all blocks >= m, via the standard
    # bijection: nondecreasing slack y_i in [0, T - k*m] <-> k-1 distinct
    # draws z_i from range(T - k*m + k - 1).
    m = min_block_len
    slack = seq_len - k * m
    if k == 1:
        return validate((0, seq_len), seq_len)
    z = np.sort(rng.choice(slack + k - 1, size=k - 1, replace=False))
    y = z - np.arange(k - 1)
    interior = y + m * np.arange(1, k)
    return validate((0, *interior.tolist(), seq_len), seq_len)
