import numpy as np
import pytest

from doubledec import partition
from doubledec.partition import (BadEndpoints, Empty, Infeasible, NonMonotonic,
                                 OutOfRange, sample, validate)


def test_validate_figure_partition():
    p = validate((0, 2, 5, 7), 7)
    assert p.num_blocks == 3
    assert p.blocks() == [(0, 2), (2, 5), (5, 7)]


def test_validate_single_block():
    p = validate((0, 7), 7)
    assert p.num_blocks == 1


def test_validate_rejects_non_monotonic():
    with pytest.raises(NonMonotonic):
        validate((0, 5, 2, 7), 7)
    with pytest.raises(NonMonotonic):
        validate((0, 3, 3, 7), 7)


def test_validate_rejects_bad_endpoints():
    with pytest.raises(BadEndpoints):
        validate((1, 7), 7)
    with pytest.raises(BadEndpoints):
        validate((0, 6), 7)


def test_validate_rejects_too_few_cuts():
    with pytest.raises(Empty):
        validate((0,), 7)
    with pytest.raises(Empty):
        validate((), 7)


def test_block_of_figure_examples():
    p = validate((0, 2, 5, 7), 7)
    assert p.block_of(0) == 0
    assert p.block_of(4) == 1
    assert p.block_of(6) == 2


def test_block_of_out_of_range():
    p = validate((0, 2, 5, 7), 7)
    with pytest.raises(OutOfRange):
        p.block_of(7)
    with pytest.raises(OutOfRange):
        p.block_of(-1)


def test_block_of_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = int(rng.integers(2, 65))
        p = sample(rng, t, 1, max(1, t // 4), 1)
        ids = p.block_ids()
        for pos in range(t):
            # brute-force scan over blocks
            expected = next(k for k, (lo, hi) in enumerate(p.blocks()) if lo <= pos < hi)
            assert p.block_of(pos) == expected == ids[pos]


def test_sample_forced_single_block():
    rng = np.random.default_rng(1)
    p = sample(rng, 7, min_blocks=1, max_blocks=1, min_block_len=1)
    assert p.cuts == (0, 7)


def test_sample_invariants_bulk():
    # scaled-down version of the 10^4-draw brute-force sweep (full run in acceptance)
    rng = np.random.default_rng(2)
    counts = set()
    for _ in range(2000):
        p = sample(rng, 2048, min_blocks=2, max_blocks=32, min_block_len=8)
        validate(p.cuts, 2048)
        lengths = [hi - lo for lo, hi in p.blocks()]
        assert all(l >= 8 for l in lengths)
        assert sum(lengths) == 2048
        counts.add(p.num_blocks)
    assert min(counts) >= 2 and max(counts) <= 32
    assert len(counts) > 20  # block-count range is actually exercised


def test_sample_deterministic_for_fixed_seed():
    a = sample(np.random.default_rng(123), 512, 2, 16, 4)
    b = sample(np.random.default_rng(123), 512, 2, 16, 4)
    assert a.cuts == b.cuts


def test_sample_infeasible():
    rng = np.random.default_rng(3)
    with pytest.raises(Infeasible):
        sample(rng, 64, min_blocks=2, max_blocks=32, min_block_len=8)
    with pytest.raises(Infeasible):
        sample(rng, 64, min_blocks=5, max_blocks=2, min_block_len=1)
    with pytest.raises(Infeasible):
        sample(rng, 64, min_blocks=0, max_blocks=2, min_block_len=1)


def test_serialize_round_trip():
    p = validate((0, 2, 5, 7), 7)
    assert p.serialize() == "0,2,5,7"
    assert partition.parse("0,2,5,7", 7).cuts == p.cuts
