#!/usr/bin/env python

"""Tests for the verification oracles."""

from fractions import Fraction

import numpy as np
import pytest

from optauction.errors import StructuralError, UnsupportedMechanismError
from optauction.feasibility import KUnitOracle, is_feasible
from optauction.instances import (
    intro2_distribution,
    intro2_normalized,
    random_distribution,
    random_rule_below_mass,
)
from optauction.model import NormalizedInterimRule, TypeProfile
from optauction.polymatroid import OrderedSubsetMechanism, RandomizedOrderedSubsetMechanism, vertex_from_order
from optauction.ssa import extract_table, interim_of_table, max_coverage_lp
from optauction.verify import (
    best_posted_price,
    exact_interim,
    flow_oracle,
    interim_report,
    monte_carlo_interim,
)

ORDER = ["1:H", "2:H", "1:L", "2:L"]


def greedy_mechanism():
    g = KUnitOracle(intro2_distribution(), 1)
    vertex = vertex_from_order(g, ORDER, exact=True)
    return OrderedSubsetMechanism(vertex.order, 1), vertex.as_rule()


class TestFlowOracle:
    """Test cases for the max-flow feasibility oracle."""

    def test_infeasible_pair_has_a_cut(self):
        """Test that (A, A) leaves {1:H, 2:H} unsaturated."""
        solution = flow_oracle(intro2_normalized("A", "A"), intro2_distribution())
        assert not solution.saturated
        assert solution.cut_labels == ["1:H", "2:H"]
        assert solution.deficiency == Fraction(1, 4)
        with pytest.raises(StructuralError):
            solution.ex_post_rule()

    def test_feasible_pair_is_saturated(self):
        """Test that the ex post rule of (A, B) reproduces it exactly."""
        target = intro2_normalized("A", "B")
        dist = intro2_distribution()
        solution = flow_oracle(target, dist)
        assert solution.saturated
        assert solution.deficiency == 0
        rule = solution.ex_post_rule()
        assert exact_interim(rule, dist, exact=True).exact == target.exact

    def test_ex_post_rule_respects_supply(self):
        """Test that systematic sampling serves at most one agent."""
        solution = flow_oracle(intro2_normalized("B", "B"), intro2_distribution())
        rule = solution.ex_post_rule()
        rng = np.random.default_rng(0)
        profile = TypeProfile.from_labels(rule.universe, ["H", "L"])
        for _ in range(200):
            assert len(rule.run(profile, rng).winners) <= 1

    def test_two_units(self):
        """Test that (A, A) saturates with two units."""
        assert flow_oracle(intro2_normalized("A", "A"), intro2_distribution(), k=2).saturated

    def test_zero_rule(self):
        """Test that x̄ = 0 is trivially saturated."""
        dist = intro2_distribution()
        assert flow_oracle(NormalizedInterimRule.zeros(dist.universe), dist).saturated

    @pytest.mark.parametrize("seed", range(10))
    def test_agrees_with_border_check(self, seed):
        """Test that saturation and the Border check give the same verdict."""
        rng = np.random.default_rng(100 + seed)
        counts = rng.integers(1, 4, size=int(rng.integers(2, 4)))
        dist = random_distribution(rng, counts)
        k = int(rng.integers(1, 3))
        target = random_rule_below_mass(rng, dist)
        feasible, _ = is_feasible(target, KUnitOracle(dist, k), tolerance=1e-6)
        assert flow_oracle(target, dist, k=k, tolerance=1e-6).saturated == feasible


class TestFeasibilityOracles:
    """Test cases comparing the Border check, SSA coverage and max-flow."""

    @pytest.mark.parametrize("seed", range(100))
    def test_three_oracles_agree(self, seed):
        """Test one verdict per rule, and that feasible rules get an exact table."""
        rng = np.random.default_rng(1000 + seed)
        counts = rng.integers(1, 4, size=int(rng.integers(2, 4)))
        dist = random_distribution(rng, counts)
        target = random_rule_below_mass(rng, dist, scale=float(rng.uniform(0.3, 1.0)))
        border, _ = is_feasible(target, KUnitOracle(dist, 1), tolerance=1e-6)
        point, achieved = max_coverage_lp(target, dist)
        coverage = float(target.values.sum()) - achieved <= 1e-6
        flow = flow_oracle(target, dist, tolerance=1e-6).saturated
        assert border == coverage == flow
        if border:
            _, xbar = interim_of_table(extract_table(point), dist)
            np.testing.assert_allclose(xbar.values, target.values, atol=1e-7)


class TestExactInterim:
    """Test cases for exact interim computation."""

    def test_greedy_vertex(self):
        """Test the greedy mechanism against its vertex."""
        mechanism, vertex = greedy_mechanism()
        measured = exact_interim(mechanism, intro2_distribution())
        np.testing.assert_allclose(measured.values, vertex.values, atol=1e-12)

    def test_rounding_mechanism_is_unsupported(self):
        """Test that randomized rounding has no exact interim rule."""
        g = KUnitOracle(intro2_distribution(), 1)
        mechanism = RandomizedOrderedSubsetMechanism(g, intro2_normalized("B", "B"), 1)
        with pytest.raises(UnsupportedMechanismError):
            exact_interim(mechanism, intro2_distribution())


class TestMonteCarlo:
    """Test cases for Monte Carlo interim estimates."""

    def test_greedy_passes(self):
        """Test that the greedy mechanism matches its vertex."""
        mechanism, vertex = greedy_mechanism()
        report = monte_carlo_interim(
            mechanism, intro2_distribution(), vertex, 10**4, np.random.default_rng(1)
        )
        assert report.passed
        assert report.samples == 10**4
        assert list(report.frame["type"]) == ["1:H", "1:L", "2:H", "2:L"]

    def test_perturbed_target_fails(self):
        """Test that a target off by 0.1 is rejected."""
        mechanism, vertex = greedy_mechanism()
        wrong = vertex.values.copy()
        wrong[0] -= 0.1
        report = monte_carlo_interim(
            mechanism, intro2_distribution(), wrong, 10**4, np.random.default_rng(2)
        )
        assert not report.passed
        assert report.worst == "1:H"

    def test_too_few_samples(self):
        """Test that fewer than 10^4 runs are refused."""
        mechanism, vertex = greedy_mechanism()
        with pytest.raises(ValueError):
            monte_carlo_interim(mechanism, intro2_distribution(), vertex, 9999, np.random.default_rng(3))

    def test_workers_are_reproducible(self):
        """Test that threaded runs depend only on the seed."""
        mechanism, vertex = greedy_mechanism()
        reports = [
            monte_carlo_interim(
                mechanism, intro2_distribution(), vertex, 10**4, np.random.default_rng(4), workers=3
            )
            for _ in range(2)
        ]
        np.testing.assert_array_equal(reports[0].frame["measured"], reports[1].frame["measured"])
        assert reports[0].passed

    def test_report_zero_variance(self):
        """Test that an exact match on a 0/1 entry has z = 0."""
        dist = intro2_distribution()
        report = interim_report(dist.universe, np.array([0.0, 1.0, 0.5, 0.5]), np.array([0.0, 1.0, 0.5, 0.5]), 10**4)
        assert report.passed
        assert not report.frame["z"].any()


class TestPostedPrice:
    """Test cases for best_posted_price."""

    def test_two_values(self):
        """Test that the lowest revenue-maximizing price wins ties."""
        assert best_posted_price([2.0, 1.0], [0.5, 0.5]) == (1.0, 1.0)

    def test_high_price(self):
        """Test a price at the top value."""
        assert best_posted_price([10.0, 1.0], [0.5, 0.5]) == (10.0, 5.0)

    def test_shape_mismatch(self):
        """Test one probability per value."""
        with pytest.raises(StructuralError):
            best_posted_price([1.0, 2.0], [1.0])
