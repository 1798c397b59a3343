
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glidespec.errors import ContractError
from glidespec.masks import (
    AttentionMask,
    BlockAssignment,
    PositionMap,
    block_mask,
    block_mask_allowed_count,
    cape_mask,
    causal_mask,
    validate_mask_semantics,
)


def enumerate_cape(gamma, positions):
    """Entry-by-entry transcription of the verification-mask predicate."""
    beta = len(positions)
    out = np.zeros((beta, beta), dtype=bool)
    for i in range(1, beta + 1):
        for j in range(1, beta + 1):
            out[i - 1, j - 1] = (j <= gamma and positions[i - 1] > j) or i == j
    return out


class TestCausal:
    def test_single(self):
        assert causal_mask(1).allow.tolist() == [[True]]

    def test_row_two(self):
        assert causal_mask(3).allow[1].tolist() == [True, True, False]

    def test_count(self):
        assert causal_mask(8).allow.sum() == 36

    def test_rejects_empty(self):
        with pytest.raises(ContractError):
            causal_mask(0)


class TestBlock:
    def test_block_index(self):
        b = BlockAssignment(5)
        assert [b.block(j) for j in (1, 5, 6, 10, 11)] == [1, 1, 2, 2, 3]

    def test_query_in_block_two(self):
        m = block_mask([7], 10, 5)
        assert m.allow[0].tolist() == [True] * 5 + [False] * 5

    def test_first_block_is_bypass(self):
        m = block_mask([3], 10, 5)
        assert not m.allow.any()
        assert m.bypass_rows == [0]

    def test_query_in_block_three_sees_all(self):
        assert block_mask([11], 10, 5).allow.all()

    @pytest.mark.parametrize("n", [1, 4, 5, 6, 17, 40])
    def test_allowed_count_closed_form(self, n):
        m = block_mask(range(1, n + 1), n, 5)
        assert m.allow.sum() == block_mask_allowed_count(range(1, n + 1), n, 5)

    def test_sees_exactly_preceding_blocks(self):
        L, n = 5, 23
        m = block_mask(range(1, n + 1), n, L)
        for j in range(1, n + 1):
            b = -(-j // L)
            assert np.flatnonzero(m.allow[j - 1]).tolist() == list(range(min((b - 1) * L, n)))


class TestCape:
    def test_worked_example_rows(self):
        # proposal (x1, x2); X_1 = {a}, X_2 = {b, c}
        pm = PositionMap(2, (1, 2, 1, 2, 2))
        m = cape_mask(2, pm)
        assert np.flatnonzero(m.allow[2]).tolist() == [2]  # a: only itself
        assert np.flatnonzero(m.allow[3]).tolist() == [0, 3]  # b: x1 and itself
        assert np.flatnonzero(m.allow[4]).tolist() == [0, 4]  # c

    def test_gamma_one_no_sets(self):
        assert cape_mask(1, PositionMap(1, (1,))).allow.tolist() == [[True]]

    def test_no_expansion_is_causal(self):
        for g in range(1, 9):
            assert cape_mask(g, PositionMap.from_set_sizes([0] * g)) == causal_mask(g)

    def test_no_row_sees_other_expansion_tokens(self):
        pm = PositionMap.from_set_sizes([3, 1, 5, 0])
        m = cape_mask(4, pm)
        tail = m.allow[:, 4:].copy()
        np.fill_diagonal(tail[4:], False)
        assert not tail.any()

    def test_against_enumeration(self):
        pm = PositionMap.from_set_sizes([1, 3, 0, 7])
        assert np.array_equal(cape_mask(4, pm).allow, enumerate_cape(4, pm.positions))

    def test_gamma_mismatch(self):
        with pytest.raises(ContractError):
            cape_mask(3, PositionMap.from_set_sizes([1, 1]))

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.sampled_from([0, 1, 3, 5, 7]), min_size=1, max_size=8))
    def test_allowed_set_property(self, sizes):
        pm = PositionMap.from_set_sizes(sizes)
        m = cape_mask(len(sizes), pm)
        for i in range(1, pm.beta + 1):
            want = {j for j in range(1, len(sizes) + 1) if j < pm.pos(i)} | {i}
            assert set((np.flatnonzero(m.allow[i - 1]) + 1).tolist()) == want


class TestPositionMap:
    def test_from_sizes(self):
        assert PositionMap.from_set_sizes([1, 2]).positions == (1, 2, 1, 2, 2)

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            PositionMap(2, (1, 2, 3))

    def test_rejects_bad_prefix(self):
        with pytest.raises(ContractError):
            PositionMap(2, (2, 1))


class TestValidate:
    def test_constructors_pass(self):
        assert validate_mask_semantics(causal_mask(6), "causal", n=6)
        assert validate_mask_semantics(block_mask(range(1, 13), 12, 5), "block",
                                       query_positions=range(1, 13), kv_len=12)
        pm = PositionMap.from_set_sizes([2, 0, 1])
        assert validate_mask_semantics(cape_mask(3, pm), "cape", posmap=pm)

    def test_corruption_reported(self):
        pm = PositionMap.from_set_sizes([1, 2])
        grid = cape_mask(2, pm).allow.copy()
        grid[3, 1] = True
        report = validate_mask_semantics(AttentionMask(grid), "cape", posmap=pm)
        assert not report
        assert report.first_mismatch == (4, 2)
        assert "(i=4, j=2)" in str(report)

    def test_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            sizes = rng.integers(0, 8, size=int(rng.integers(1, 7))).tolist()
            pm = PositionMap.from_set_sizes(sizes)
            assert validate_mask_semantics(cape_mask(len(sizes), pm), "cape", posmap=pm)

    def test_pure_construction(self):
        pm = PositionMap.from_set_sizes([3, 1])
        assert cape_mask(2, pm) == cape_mask(2, pm)
        assert block_mask(range(1, 9), 8, 5) == block_mask(range(1, 9), 8, 5)


def test_text_round_trip():
    m = cape_mask(2, PositionMap(2, (1, 2, 1, 2, 2)))
    text = m.to_text()
    assert text.splitlines()[2] == "..#.."
    assert AttentionMask.from_text(text) == m


def test_golden_grid():
    golden = """
#....
##...
..#..
#..#.
#...#
"""
    assert cape_mask(2, PositionMap(2, (1, 2, 1, 2, 2))) == AttentionMask.from_text(golden)
