#!/usr/bin/env python

"""Tests for polymatroid vertices, rounding and ordered-subset mechanisms."""

from fractions import Fraction

import numpy as np
import pytest

from optauction.errors import NotInPolytopeError, StructuralError
from optauction.feasibility import KUnitOracle, MixtureOracle, ProfileRankOracle
from optauction.instances import (
    intro2_distribution,
    intro2_normalized,
    random_distribution,
    random_polymatroid_point,
)
from optauction.model import NormalizedInterimRule, TypeProfile
from optauction.polymatroid import (
    OrderedSubset,
    OrderedSubsetMechanism,
    RandomizedOrderedSubsetMechanism,
    TightFamily,
    decompose_vertex,
    ordered_subset_from_vertex,
    rand_round,
    rra_mechanism,
    run_ordered_subset,
    vertex_from_order,
)
from optauction.verify import exact_interim, monte_carlo_interim

ORDER = ["1:H", "2:H", "1:L", "2:L"]


@pytest.fixture
def g():
    return KUnitOracle(intro2_distribution(), 1)


def random_setting(seed, max_types=3):
    """Seeded generator, distribution with 2 or 3 agents, and k in {1, 2}."""
    rng = np.random.default_rng(seed)
    n_agents = int(rng.integers(2, 4))
    dist = random_distribution(rng, rng.integers(1, max_types + 1, size=n_agents))
    return rng, dist, int(rng.integers(1, 3))


def random_order(rng, size):
    return [int(o) for o in rng.permutation(size)[: int(rng.integers(0, size + 1))]]


class TestVertices:
    """Test cases for vertex_from_order and its inverse."""

    def test_marginal_gains(self, g):
        """Test the vertex of the order (H1, H2, L1, L2)."""
        vertex = vertex_from_order(g, ORDER)
        np.testing.assert_allclose(vertex.values, [0.5, 0.25, 0.25, 0.0], atol=1e-12)

    def test_exact_vertex(self, g):
        """Test rational marginal gains."""
        vertex = vertex_from_order(g, ORDER, exact=True)
        assert vertex.exact == (Fraction(1, 2), Fraction(1, 4), Fraction(1, 4), Fraction(0))

    def test_empty_order(self, g):
        """Test that the empty order gives the zero vector."""
        assert not vertex_from_order(g, []).values.any()

    def test_order_recovered_from_vertex(self, g):
        """Test the greedy tight-set walk on a vertex."""
        vertex = vertex_from_order(g, ORDER)
        order = ordered_subset_from_vertex(g, vertex.values)
        assert order.labels == ["1:H", "2:H", "1:L"]
        np.testing.assert_allclose(vertex_from_order(g, order).values, vertex.values, atol=1e-12)

    def test_interior_point_is_not_a_vertex(self, g):
        """Test that (B, B) has no generating order."""
        with pytest.raises(StructuralError):
            ordered_subset_from_vertex(g, intro2_normalized("B", "B"))

    def test_repeated_type(self, g):
        """Test that an ordered subset cannot repeat a type."""
        with pytest.raises(StructuralError):
            OrderedSubset.from_keys(g.universe, ["1:H", "1:H"])

    def test_mixture_decomposition(self, g):
        """Test that mixed profile vertices add up to the vertex of g."""
        dist = intro2_distribution()
        profiles = list(dist.profiles())
        oracles = [ProfileRankOracle(p, 1) for p, _ in profiles]
        weights = [float(prob) for _, prob in profiles]
        parts = decompose_vertex(oracles, weights, ORDER)
        total = sum(w * v.values for w, v in zip(weights, parts))
        np.testing.assert_allclose(total, vertex_from_order(g, ORDER).values, atol=1e-12)
        with pytest.raises(StructuralError):
            decompose_vertex(oracles, [0.5] * len(oracles), ORDER)

    @pytest.mark.parametrize("seed", range(50))
    def test_random_mixtures(self, seed):
        """Test the vertex of a random mixture against its weighted parts."""
        rng, dist, k = random_setting(seed)
        profiles = [p for p, _ in dist.profiles()]
        count = int(rng.integers(1, min(4, len(profiles)) + 1))
        chosen = rng.choice(len(profiles), size=count, replace=False)
        oracles = [ProfileRankOracle(profiles[int(j)], k) for j in chosen]
        weights = rng.dirichlet(np.ones(count))
        order = random_order(rng, dist.universe.size)
        parts = decompose_vertex(oracles, weights, order)
        total = sum(w * v.values for w, v in zip(weights, parts))
        mixed = vertex_from_order(MixtureOracle(oracles, weights), order)
        np.testing.assert_allclose(mixed.values, total, atol=1e-9)


class TestTightFamily:
    """Test cases for the nested tight-set chain."""

    def test_insert_keeps_order(self):
        """Test inserting sets out of order."""
        family = TightFamily()
        family.insert(0b0111)
        family.insert(0b0001)
        assert family.sets == [0, 0b0001, 0b0111]
        assert [(lo, hi) for _, lo, hi in family.gaps()] == [(0, 0b0001), (0b0001, 0b0111)]

    def test_crossing_set(self):
        """Test that a set crossing the chain is refused."""
        family = TightFamily()
        family.insert(0b0011)
        with pytest.raises(StructuralError):
            family.insert(0b0110)


class TestOrderedSubsetMechanism:
    """Test cases for greedy service in a fixed order."""

    def test_first_present_type_wins(self, g):
        """Test that 2:H is served on the profile (L, H) with one unit."""
        profile = TypeProfile.from_labels(g.universe, ["L", "H"])
        allocation = run_ordered_subset(ORDER, 1, profile)
        assert allocation.served("2:H")
        assert not allocation.served("1:L")

    def test_enough_units_serve_everyone(self, g):
        """Test that k >= n serves every present type in the order."""
        profile = TypeProfile.from_labels(g.universe, ["L", "H"])
        allocation = run_ordered_subset(ORDER, 2, profile)
        assert allocation.served_agents() == [1, 2]

    def test_unordered_types_are_not_served(self, g):
        """Test that types missing from the order are never served."""
        profile = TypeProfile.from_labels(g.universe, ["L", "H"])
        assert run_ordered_subset(["1:H"], 1, profile).winners == frozenset()

    def test_exact_interim_is_the_vertex(self, g):
        """Test that the greedy mechanism implements its vertex exactly."""
        order = OrderedSubset.from_keys(g.universe, ORDER)
        measured = exact_interim(OrderedSubsetMechanism(order, 1), intro2_distribution(), exact=True)
        assert measured.exact == vertex_from_order(g, order, exact=True).exact

    @pytest.mark.parametrize("seed", range(20))
    def test_random_orders_implement_their_vertex(self, seed):
        """Test exact interim rules of random greedy mechanisms."""
        rng, dist, k = random_setting(seed)
        order = OrderedSubset(dist.universe, tuple(random_order(rng, dist.universe.size)))
        measured = exact_interim(OrderedSubsetMechanism(order, k), dist, exact=True)
        assert measured.exact == vertex_from_order(KUnitOracle(dist, k), order, exact=True).exact


class TestRandRound:
    """Test cases for randomized rounding."""

    def test_mean_matches_point(self, g):
        """Test that the average rounded vertex is the input point."""
        rng = np.random.default_rng(0)
        target = intro2_normalized("B", "B")
        rounds = 2000
        total = np.zeros(4)
        for _ in range(rounds):
            vertex, _ = rand_round(g, target, rng)
            assert vertex.steps <= 2 * g.universe.size
            total += vertex.values
        np.testing.assert_allclose(total / rounds, target.values, atol=5 * 0.25 / np.sqrt(rounds))

    @pytest.mark.parametrize("seed", range(50))
    def test_random_points(self, seed):
        """Test vertices, step counts and means on random points of P(g_k)."""
        rng, dist, k = random_setting(seed, max_types=2)
        g = KUnitOracle(dist, k)
        size = dist.universe.size
        point = random_polymatroid_point(rng, g)
        rounds = 300
        total = np.zeros(size)
        for _ in range(rounds):
            vertex, order = rand_round(g, point, rng)
            assert vertex.steps <= 2 * size
            np.testing.assert_allclose(vertex.values, vertex_from_order(g, order).values, atol=1e-7)
            total += vertex.values
        # Coordinates lie in [0, f(t)], so their variance is at most y(f - y).
        spread = np.clip(point * (dist.mass - point), 0.0, None)
        np.testing.assert_allclose(total / rounds, point, rtol=0.0, atol=6 * np.sqrt(spread / rounds) + 1e-7)

    def test_vertex_is_a_fixed_point(self, g):
        """Test that a vertex rounds to itself."""
        vertex = vertex_from_order(g, ORDER)
        rounded, _ = rand_round(g, vertex.values, np.random.default_rng(1))
        np.testing.assert_allclose(rounded.values, vertex.values, atol=1e-9)

    def test_point_outside_polytope(self, g):
        """Test that (A, A) cannot be rounded."""
        with pytest.raises(NotInPolytopeError):
            rand_round(g, intro2_normalized("A", "A"), np.random.default_rng(2))


class TestRraMechanism:
    """Test cases for rra_mechanism."""

    def test_vertex_gets_a_deterministic_mechanism(self, g):
        """Test that a vertex target needs no rounding."""
        target = vertex_from_order(g, ORDER).as_rule()
        assert isinstance(rra_mechanism(g, target, 1), OrderedSubsetMechanism)

    def test_zero_target_never_serves(self, g):
        """Test that x̄ = 0 allocates to nobody."""
        mechanism = rra_mechanism(g, NormalizedInterimRule.zeros(g.universe), 1)
        profile = TypeProfile.from_labels(g.universe, ["H", "H"])
        assert mechanism.run(profile, np.random.default_rng(3)).winners == frozenset()

    def test_interior_target_is_randomized(self, g):
        """Test that (B, B) is implemented in expectation."""
        target = intro2_normalized("B", "B")
        mechanism = rra_mechanism(g, target, 1)
        assert isinstance(mechanism, RandomizedOrderedSubsetMechanism)
        report = monte_carlo_interim(
            mechanism, intro2_distribution(), target, 10**4, np.random.default_rng(4)
        )
        assert report.passed

    def test_infeasible_target(self, g):
        """Test that (A, A) is refused."""
        with pytest.raises(NotInPolytopeError):
            rra_mechanism(g, intro2_normalized("A", "A"), 1)
