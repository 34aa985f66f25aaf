#!/usr/bin/env python

"""Tests for `optauction.utils`."""

from fractions import Fraction

import numpy as np
import pytest

from optauction.errors import InstanceTooLargeError, SolverError
from optauction.utils import (
    LinearProgram,
    check_guard,
    mask_of,
    members_of,
    parse_fraction,
    popcount,
    subset_masks,
    subset_sums,
)


class TestParseFraction:
    """Test cases for parse_fraction."""

    def test_strings(self):
        """Test ratios and decimal strings."""
        assert parse_fraction("1/4") == Fraction(1, 4)
        assert parse_fraction(" 0.25 ") == Fraction(1, 4)

    def test_floats_use_their_decimal_form(self):
        """Test that 0.1 becomes exactly 1/10."""
        assert parse_fraction(0.1) == Fraction(1, 10)

    def test_rejects_non_numbers(self):
        """Test that booleans, NaN and junk strings are refused."""
        for bad in (True, float("nan"), "half", "1/0"):
            with pytest.raises(ValueError):
                parse_fraction(bad)


class TestMasks:
    """Test cases for the bitmask helpers."""

    def test_mask_round_trip(self):
        """Test mask_of and members_of."""
        assert mask_of([0, 2, 3]) == 0b1101
        assert members_of(0b1101) == (0, 2, 3)
        assert members_of(0) == ()

    def test_popcount(self):
        """Test vectorized bit counting."""
        np.testing.assert_array_equal(popcount(np.array([0, 1, 7, 10]), 4), [0, 1, 3, 2])

    def test_subset_enumeration(self):
        """Test that subset masks and sums line up."""
        masks = subset_masks(0b001, [1, 2])
        assert sorted(masks.tolist()) == [0b001, 0b011, 0b101, 0b111]
        sums = subset_sums(np.array([1.0, 10.0, 100.0]), 0b001, [1, 2])
        for mask, total in zip(masks, sums):
            assert total == sum([1.0, 10.0, 100.0][o] for o in members_of(int(mask)))

    def test_check_guard(self):
        """Test that sizes above the guard raise."""
        check_guard(10, 10, "thing")
        with pytest.raises(InstanceTooLargeError):
            check_guard(11, 10, "thing")


class TestLinearProgram:
    """Test cases for the LinearProgram builder."""

    def test_maximizes(self):
        """Test a small maximization with a binding constraint."""
        lp = LinearProgram("test")
        x = lp.add_variables(2)
        lp.add_objective({x[0]: 1.0, x[1]: 2.0})
        row = lp.add_le({x[0]: 1.0, x[1]: 1.0}, 1.0)
        result = lp.solve()
        assert result.value == pytest.approx(2.0)
        np.testing.assert_allclose(result.x, [0.0, 1.0], atol=1e-9)
        assert result.ub_duals[row] == pytest.approx(2.0)

    def test_equality_rows(self):
        """Test an equality constraint."""
        lp = LinearProgram("eq")
        x = lp.add_variables(2)
        lp.add_objective({x[0]: 1.0, x[1]: 1.0})
        lp.add_eq({x[0]: 1.0, x[1]: 2.0}, 2.0)
        assert lp.solve().value == pytest.approx(2.0)

    def test_infeasible_program(self):
        """Test that infeasibility is a SolverError."""
        lp = LinearProgram("infeasible")
        x = lp.add_variables(1, upper=1.0)
        lp.add_le({x[0]: -1.0}, -2.0)
        with pytest.raises(SolverError):
            lp.solve()
