from itertools import combinations

import numpy as np
import pytest

from doubledec.masks import (BadBreakpoint, block_mask_predicates, block_masks,
                             causal_mask, prefix_lm_mask, render_masks)
from doubledec.partition import sample, validate

# the block diagram for partition (0,2,5,7): within-block cells are the
# diagonal plus (1,0),(3,2),(4,2),(4,3),(6,5); cross cells are every earlier
# whole block (rows 2-4 x cols 0-1, rows 5-6 x cols 0-4)
FIG_SELF = np.zeros((7, 7), dtype=bool)
for t in range(7):
    FIG_SELF[t, t] = True
for t, s in [(1, 0), (3, 2), (4, 2), (4, 3), (6, 5)]:
    FIG_SELF[t, s] = True
FIG_CROSS = np.zeros((7, 7), dtype=bool)
FIG_CROSS[2:5, 0:2] = True
FIG_CROSS[5:7, 0:5] = True


def all_partitions(t):
    for k in range(t):
        for interior in combinations(range(1, t), k):
            yield validate((0, *interior, t), t)


def test_causal_mask_t1():
    assert causal_mask(1).tolist() == [[True]]


def test_causal_mask_t3_lower_triangular():
    m = causal_mask(3)
    assert m.tolist() == [[True, False, False], [True, True, False], [True, True, True]]


def test_causal_mask_t7_count():
    assert causal_mask(7).sum() == 28  # T*(T+1)/2


def test_block_masks_match_figure():
    pair = block_masks(validate((0, 2, 5, 7), 7))
    assert np.array_equal(pair.self_mask, FIG_SELF)
    assert np.array_equal(pair.cross_mask, FIG_CROSS)


def test_single_block_degenerates_to_causal():
    pair = block_masks(validate((0, 9), 9))
    assert np.array_equal(pair.self_mask, causal_mask(9))
    assert not pair.cross_mask.any()


@pytest.mark.parametrize("t", range(1, 11))
def test_disjoint_and_exact_causal_coverage(t):
    causal = causal_mask(t)
    for p in all_partitions(t):
        pair = block_masks(p)
        assert not (pair.self_mask & pair.cross_mask).any()
        assert np.array_equal(pair.self_mask | pair.cross_mask, causal)
        assert pair.self_mask.diagonal().all()
        # every row has a visible self key even when its cross row is empty
        assert pair.self_mask.any(axis=1).all()


def test_predicate_form_matches_dense():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = int(rng.integers(2, 33))
        p = sample(rng, t, 1, max(1, t // 3), 1)
        pair = block_masks(p)
        self_ok, cross_ok = block_mask_predicates(p)
        for q in range(t):
            for s in range(t):
                assert self_ok(q, s) == pair.self_mask[q, s]
                assert cross_ok(q, s) == pair.cross_mask[q, s]


def test_prefix_lm_equals_two_block_partition():
    for t, bp in [(7, 2), (2, 1), (16, 9)]:
        pair = prefix_lm_mask(bp, t)
        ref = block_masks(validate((0, bp, t), t))
        assert np.array_equal(pair.self_mask, ref.self_mask)
        assert np.array_equal(pair.cross_mask, ref.cross_mask)


def test_prefix_lm_minimal_case():
    pair = prefix_lm_mask(1, 2)
    assert pair.cross_mask.sum() == 1 and pair.cross_mask[1, 0]


def test_prefix_lm_cross_entry_count():
    pair = prefix_lm_mask(1024, 2048)
    assert pair.cross_mask.sum() == 1024 * (2048 - 1024)  # = 1,048,576
    assert pair.cross_mask.sum() == 1_048_576


def test_prefix_lm_rejects_bad_breakpoints():
    for bp, t in [(0, 4), (4, 4), (5, 4), (-1, 4)]:
        with pytest.raises(BadBreakpoint):
            prefix_lm_mask(bp, t)


def test_render_masks_ascii():
    text = render_masks(block_masks(validate((0, 2, 4), 4)))
    lines = text.splitlines()
    assert len(lines) == 5  # header + 4 query rows
    assert lines[1].endswith("s . . .")
    assert lines[3].endswith("x x s .")
    assert "x" in lines[4] and lines[4].count("s") == 2


def test_masks_are_immutable():
    pair = block_masks(validate((0, 2, 4), 4))
    with pytest.raises(ValueError):
        pair.self_mask[0, 0] = False
