#!/usr/bin/env python

"""Tests for the type universe, distributions and interim rules."""

from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from optauction.errors import InfeasibleMassError, InstanceTooLargeError, StructuralError
from optauction.instances import intro2_distribution, intro2_rule, intro2_universe, random_distribution
from optauction.model import (
    AllocationVector,
    GlobalType,
    InterimAllocationRule,
    NormalizedInterimRule,
    ProductDistribution,
    TypeProfile,
    TypeUniverse,
    denormalize,
    normalize,
    profile_intersection,
    sample_profile,
)


class TestTypeUniverse:
    """Test cases for TypeUniverse."""

    def test_ordinals_are_dense_in_agent_order(self):
        """Test that ordinals run over agents, then labels."""
        universe = intro2_universe()
        assert universe.size == 4
        assert universe.n_agents == 2
        assert [universe.label_of(o) for o in range(4)] == ["1:H", "1:L", "2:H", "2:L"]
        assert list(universe.agent_types(2)) == [2, 3]

    def test_ordinal_accepts_every_key_form(self):
        """Test ordinal lookup by int, GlobalType and string."""
        universe = intro2_universe()
        assert universe.ordinal(3) == 3
        assert universe.ordinal(GlobalType(2, "H")) == 2
        assert universe.ordinal("1:L") == 1

    def test_unknown_keys_are_rejected(self):
        """Test that malformed or unknown types raise StructuralError."""
        universe = intro2_universe()
        with pytest.raises(StructuralError):
            universe.ordinal("3:H")
        with pytest.raises(StructuralError):
            universe.ordinal("H")
        with pytest.raises(StructuralError):
            universe.ordinal(4)

    def test_mask_of_subset(self):
        """Test the bitmask of a subset of type keys."""
        universe = intro2_universe()
        assert universe.mask(["1:H", "2:H"]) == 0b0101
        assert [str(t) for t in universe.members(0b0101)] == ["1:H", "2:H"]

    def test_invalid_universes(self):
        """Test construction errors."""
        with pytest.raises(StructuralError):
            TypeUniverse([])
        with pytest.raises(StructuralError):
            TypeUniverse([["H"], []])
        with pytest.raises(StructuralError):
            TypeUniverse([["H", "H"]])


class TestProductDistribution:
    """Test cases for ProductDistribution."""

    def test_exact_masses(self):
        """Test that string and Fraction masses are kept exactly."""
        dist = ProductDistribution(TypeUniverse([["a", "b", "c"]]), ["1/3", "1/3", Fraction(1, 3)])
        assert dist.exact_mass == (Fraction(1, 3),) * 3
        assert dist.mass.sum() == pytest.approx(1.0)

    def test_masses_must_sum_to_one(self):
        """Test that each agent's masses must sum to 1."""
        with pytest.raises(StructuralError):
            ProductDistribution(intro2_universe(), [0.5, 0.5, 0.5, 0.25])

    def test_negative_mass(self):
        """Test that negative masses are rejected."""
        with pytest.raises(StructuralError):
            ProductDistribution(TypeUniverse([["a", "b"]]), [1.5, -0.5])

    def test_profiles_enumerate_all_combinations(self):
        """Test exact profile enumeration of the two-agent example."""
        dist = intro2_distribution()
        profiles = list(dist.profiles(exact=True))
        assert len(profiles) == dist.profile_count == 4
        assert all(prob == Fraction(1, 4) for _, prob in profiles)
        assert str(profiles[1][0]) == "(1:H, 2:L)"

    def test_profile_guard(self):
        """Test that enumeration beyond the guard is refused."""
        dist = intro2_distribution()
        with pytest.raises(InstanceTooLargeError):
            dist.profile_table(guard=3)

    def test_sample_profiles(self):
        """Test sampled profiles use each agent's own types."""
        dist = intro2_distribution()
        rows = dist.sample_profiles(np.random.default_rng(0), 1000)
        assert rows.shape == (1000, 2)
        assert set(rows[:, 0]) <= {0, 1}
        assert set(rows[:, 1]) <= {2, 3}
        profile = sample_profile(dist, np.random.default_rng(1))
        assert len(profile.ordinals) == 2

    def test_sampled_frequencies_match_masses(self):
        """Test joint profile frequencies with a chi-squared test."""
        rng = np.random.default_rng(2)
        dist = random_distribution(rng, [3, 2])
        samples = 10**5
        rows = dist.sample_profiles(rng, samples)
        seen = Counter(map(tuple, rows.tolist()))
        observed, expected = [], []
        for profile, prob in dist.profiles():
            observed.append(seen.get(tuple(profile.ordinals), 0))
            expected.append(samples * prob)
        assert sum(observed) == samples
        _, p_value = stats.chisquare(observed, expected)
        assert p_value > 1e-4


class TestInterimRules:
    """Test cases for normalization and denormalization."""

    def test_normalize_rule_a(self):
        """Test rule A normalizes to 1/2 on H and 0 on L."""
        xbar = normalize(intro2_rule("A", "A"), intro2_distribution())
        assert xbar.exact == (Fraction(1, 2), Fraction(0), Fraction(1, 2), Fraction(0))

    def test_normalize_rule_b(self):
        """Test rule B normalizes to 1/4 everywhere."""
        xbar = normalize(intro2_rule("B", "B"), intro2_distribution())
        assert xbar.exact == (Fraction(1, 4),) * 4

    def test_denormalize_inverts_normalize(self):
        """Test that x̄ = 1/4 with f = 1/2 gives x = 1/2."""
        dist = intro2_distribution()
        x = denormalize(NormalizedInterimRule(dist.universe, ["1/4"] * 4), dist)
        assert x.exact == (Fraction(1, 2),) * 4

    def test_denormalize_rejects_excess_mass(self):
        """Test that x̄ above f is an InfeasibleMassError."""
        dist = intro2_distribution()
        with pytest.raises(InfeasibleMassError):
            denormalize(NormalizedInterimRule(dist.universe, ["3/4", 0, 0, 0]), dist)

    def test_zero_probability_type(self):
        """Test that a type with f = 0 gets x = 0 and cannot carry mass."""
        universe = TypeUniverse([["a", "b"]])
        dist = ProductDistribution(universe, [1, 0])
        x = denormalize(NormalizedInterimRule(universe, [Fraction(1, 2), 0]), dist)
        assert x.exact == (Fraction(1, 2), Fraction(0))
        with pytest.raises(InfeasibleMassError):
            denormalize(NormalizedInterimRule(universe, [0, Fraction(1, 10)]), dist)

    def test_entries_outside_unit_interval(self):
        """Test that rules must lie in [0, 1]."""
        with pytest.raises(StructuralError):
            InterimAllocationRule(intro2_universe(), [1.5, 0, 0, 0])
        with pytest.raises(StructuralError):
            InterimAllocationRule(intro2_universe(), [0.5, 0.5, 0.5])

    def test_rule_lookup_and_mass(self):
        """Test indexing by key and subset mass."""
        xbar = normalize(intro2_rule("A", "B"), intro2_distribution())
        assert xbar["2:L"] == pytest.approx(0.25)
        assert xbar.mass_of(["1:H", "2:H"]) == pytest.approx(0.75)


class TestProfilesAndAllocations:
    """Test cases for TypeProfile and AllocationVector."""

    def test_profile_from_labels(self):
        """Test building a profile from one label per agent."""
        universe = intro2_universe()
        profile = TypeProfile.from_labels(universe, ["L", "H"])
        assert profile.ordinals == (1, 2)
        assert profile_intersection(profile, ["1:H", "2:H"]) == frozenset({GlobalType(2, "H")})

    def test_profile_type_must_belong_to_agent(self):
        """Test that a profile cannot give agent 1 a type of agent 2."""
        with pytest.raises(StructuralError):
            TypeProfile(intro2_universe(), (2, 3))

    def test_allocation_serves_one_type_per_agent(self):
        """Test that two types of the same agent cannot both be served."""
        universe = intro2_universe()
        with pytest.raises(StructuralError):
            AllocationVector(universe, frozenset({0, 1}))
        allocation = AllocationVector(universe, frozenset({2}))
        assert allocation.served("2:H")
        assert allocation.served_agents() == [2]
        assert allocation.consistent_with(TypeProfile.from_labels(universe, ["L", "H"]))
