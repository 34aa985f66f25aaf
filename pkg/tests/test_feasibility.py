#!/usr/bin/env python

"""Tests for expected-rank oracles and the Border feasibility check."""

from fractions import Fraction

import numpy as np
import pytest

from optauction.errors import InstanceTooLargeError
from optauction.feasibility import (
    KUnitOracle,
    MatroidRankOracle,
    MixtureOracle,
    ProfileRankOracle,
    check_expected_rank,
    expected_rank_oracle,
    g_bruteforce,
    g_k_dp,
    is_feasible,
    separate,
)
from optauction.instances import intro2_distribution, intro2_normalized, random_distribution
from optauction.matroid import PartitionMatroid, UniformMatroid
from optauction.model import NormalizedInterimRule, TypeProfile
from optauction.settings import settings


class TestExpectedRank:
    """Test cases for g_k and g_M."""

    def test_high_types_single_unit(self):
        """Test P(some agent is H) = 3/4."""
        assert g_k_dp(1, intro2_distribution(), ["1:H", "2:H"], exact=True) == Fraction(3, 4)

    def test_high_types_two_units(self):
        """Test E[#H] = 1 with two units."""
        assert g_k_dp(2, intro2_distribution(), ["1:H", "2:H"], exact=True) == 1

    def test_empty_and_full_sets(self):
        """Test g(∅) = 0 and g(T) = 1 for one unit."""
        dist = intro2_distribution()
        assert g_k_dp(1, dist, []) == 0
        assert g_bruteforce(1, dist, range(4), exact=True) == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_dp_matches_enumeration(self, seed):
        """Test the dynamic program against profile enumeration."""
        rng = np.random.default_rng(seed)
        dist = random_distribution(rng, rng.integers(1, 4, size=int(rng.integers(1, 4))))
        size = dist.universe.size
        for _ in range(10):
            mask = int(rng.integers(0, 1 << size))
            k = int(rng.integers(1, 4))
            assert g_k_dp(k, dist, mask, exact=True) == g_bruteforce(k, dist, mask, exact=True)

    def test_table_matches_pointwise_values(self):
        """Test that the vectorized tables agree with single queries."""
        dist = random_distribution(np.random.default_rng(3), [2, 3])
        for oracle in (KUnitOracle(dist, 2), KUnitOracle(dist, 2, method="enumeration")):
            table = oracle.table()
            for mask in range(1 << dist.universe.size):
                assert table[mask] == pytest.approx(float(g_k_dp(2, dist, mask)), abs=1e-12)

    def test_uniform_matroid_reproduces_k_units(self):
        """Test g_M of the uniform matroid equals g_k."""
        dist = random_distribution(np.random.default_rng(4), [2, 2, 2])
        matroid = MatroidRankOracle(dist, UniformMatroid(2, dist.universe.size))
        np.testing.assert_allclose(matroid.table(), KUnitOracle(dist, 2).table(), atol=1e-12)

    def test_oracles_are_submodular(self):
        """Test g(∅) = 0, monotonicity and submodularity on random triples."""
        dist = random_distribution(np.random.default_rng(5), [2, 3, 2])
        rng = np.random.default_rng(6)
        partition = PartitionMatroid([((0, 1, 2), 1), ((3, 4, 5, 6), 2)], 7)
        oracles = [
            KUnitOracle(dist, 1),
            KUnitOracle(dist, 2),
            MatroidRankOracle(dist, partition),
            ProfileRankOracle(TypeProfile(dist.universe, (0, 2, 5)), 1),
        ]
        for oracle in oracles:
            assert check_expected_rank(oracle, rng) == []

    def test_sampled_oracle_is_close(self):
        """Test the sampled matroid oracle within its accuracy."""
        dist = intro2_distribution()
        with pytest.warns(UserWarning):
            sampled = MatroidRankOracle(dist, UniformMatroid(1, 4), method="sampled", epsilon=0.05)
        assert sampled.approximate
        assert sampled(["1:H", "2:H"]) == pytest.approx(0.75, abs=0.05)

    def test_mixture_of_profile_ranks(self):
        """Test that profile rank functions mixed by f give g."""
        dist = intro2_distribution()
        profiles = list(dist.profiles(exact=True))
        mixture = MixtureOracle(
            [ProfileRankOracle(p, 1) for p, _ in profiles], [prob for _, prob in profiles]
        )
        np.testing.assert_allclose(mixture.table(), KUnitOracle(dist, 1).table(), atol=1e-12)
        assert mixture.exact(["1:H", "2:H"]) == Fraction(3, 4)

    def test_default_oracle(self):
        """Test expected_rank_oracle picks the exact oracle per supply."""
        dist = intro2_distribution()
        assert isinstance(expected_rank_oracle(1, dist), KUnitOracle)
        assert isinstance(expected_rank_oracle(UniformMatroid(2, 4), dist), KUnitOracle)
        partition = PartitionMatroid([((0, 1), 1), ((2, 3), 1)], 4)
        assert isinstance(expected_rank_oracle(partition, dist), MatroidRankOracle)


class TestSeparation:
    """Test cases for separate and is_feasible."""

    def test_rule_a_for_both_agents_is_infeasible(self):
        """Test that (A, A) violates the Border condition on {1:H, 2:H}."""
        g = KUnitOracle(intro2_distribution(), 1)
        feasible, certificate = is_feasible(intro2_normalized("A", "A"), g, exact=True)
        assert not feasible
        assert certificate.labels == ["1:H", "2:H"]
        assert certificate.slack == Fraction(-1, 4)
        assert certificate.g_value == Fraction(3, 4)
        assert certificate.mass == 1

    @pytest.mark.parametrize("pair", [("A", "B"), ("B", "A"), ("B", "B")])
    def test_feasible_pairs(self, pair):
        """Test that the other rule pairs are feasible."""
        g = KUnitOracle(intro2_distribution(), 1)
        feasible, certificate = is_feasible(intro2_normalized(*pair), g, exact=True)
        assert feasible
        assert certificate.slack >= 0

    def test_zero_rule(self):
        """Test that x̄ = 0 has slack 0 at the empty set."""
        dist = intro2_distribution()
        certificate = separate(NormalizedInterimRule.zeros(dist.universe), KUnitOracle(dist, 1))
        assert certificate.mask == 0
        assert certificate.slack == 0

    def test_two_units_make_rule_a_feasible(self):
        """Test that (A, A) is feasible with two units."""
        feasible, _ = is_feasible(intro2_normalized("A", "A"), KUnitOracle(intro2_distribution(), 2))
        assert feasible

    def test_slack_matches_recomputation(self):
        """Test that the reported slack is g(S*) - x̄(S*)."""
        rng = np.random.default_rng(7)
        dist = random_distribution(rng, [3, 2])
        g = KUnitOracle(dist, 1)
        xbar = rng.random(dist.universe.size) * dist.mass
        certificate = separate(xbar, g)
        recomputed = g.value_mask(certificate.mask) - sum(xbar[o] for o in certificate.members)
        assert certificate.slack == pytest.approx(recomputed, abs=1e-9)

    def test_downward_closed(self):
        """Test that shrinking a feasible rule keeps it feasible."""
        g = KUnitOracle(intro2_distribution(), 1)
        xbar = intro2_normalized("A", "B").values
        for scale in (0.0, 0.3, 0.9):
            assert is_feasible(xbar * scale, g)[0]

    def test_separation_guard(self):
        """Test that brute force refuses universes above the guard."""
        g = KUnitOracle(intro2_distribution(), 1)
        with settings.override(separation_guard=3):
            with pytest.raises(InstanceTooLargeError):
                separate(np.zeros(4), g)
