"""Named instances and random instance generators.

The two-agent example has agents with types H and L, each with probability
1/2. Rule A serves an agent exactly when its type is H; rule B serves every
type with probability 1/2. Pairs (A, B) and (B, B) are feasible for one
unit; (A, A) is not.
"""

from fractions import Fraction
from typing import List, Sequence, Tuple

import numpy as np

from .feasibility import ExpectedRankOracle
from .matroid import MatroidOracle, PartitionMatroid
from .model import (
    InterimAllocationRule,
    NormalizedInterimRule,
    ProductDistribution,
    TypeKey,
    TypeUniverse,
    normalize,
)
from .optimizer import AuctionInstance, SupplyConstraint
from .polymatroid import vertex_from_order
from .single_agent import UnitDemandPreference

RULES = {"A": {"H": 1, "L": 0}, "B": {"H": Fraction(1, 2), "L": Fraction(1, 2)}}


def intro2_universe() -> TypeUniverse:
    return TypeUniverse([["H", "L"], ["H", "L"]])


def intro2_distribution() -> ProductDistribution:
    """Two agents, types H and L with probability 1/2 each, in exact arithmetic."""
    half = Fraction(1, 2)
    return ProductDistribution(intro2_universe(), [half, half, half, half])


def intro2_rule(first: str, second: str) -> InterimAllocationRule:
    """Interim rule where agent 1 uses rule ``first`` and agent 2 rule ``second``."""
    values = [RULES[first][label] for label in ("H", "L")] + [
        RULES[second][label] for label in ("H", "L")
    ]
    return InterimAllocationRule(intro2_universe(), values)


def intro2_normalized(first: str, second: str) -> NormalizedInterimRule:
    return normalize(intro2_rule(first, second), intro2_distribution())


def intro2_instance(
    high: float = 2.0, low: float = 1.0, k: int = 1, no_subsidy: bool = False
) -> AuctionInstance:
    """Quasi-linear single-item version with values ``high`` and ``low``."""
    pref = UnitDemandPreference(np.array([[high], [low]]))
    return AuctionInstance(intro2_distribution(), [pref, pref], k, no_subsidy=no_subsidy)


def random_distribution(
    rng: np.random.Generator,
    type_counts: Sequence[int],
    denominator: int = 12,
) -> ProductDistribution:
    """Product distribution with rational masses p/``denominator``, all positive."""
    labels = [[f"t{j}" for j in range(count)] for count in type_counts]
    universe = TypeUniverse(labels)
    masses: List[Fraction] = []
    for count in type_counts:
        if count > denominator:
            raise ValueError("Need at least one unit of mass per type")
        cuts = np.sort(rng.choice(np.arange(1, denominator), size=count - 1, replace=False))
        parts = np.diff(np.concatenate([[0], cuts, [denominator]]))
        masses.extend(Fraction(int(p), denominator) for p in parts)
    return ProductDistribution(universe, masses)


def random_unit_demand_instance(
    rng: np.random.Generator,
    n_agents: int = 2,
    types_per_agent: int = 2,
    items: int = 1,
    constraint=1,
    max_value: int = 10,
) -> AuctionInstance:
    """Instance with integer item values in [0, ``max_value``]."""
    dist = random_distribution(rng, [types_per_agent] * n_agents)
    prefs = [
        UnitDemandPreference(rng.integers(0, max_value + 1, size=(types_per_agent, items)).astype(float))
        for _ in range(n_agents)
    ]
    return AuctionInstance(dist, prefs, constraint)


def random_rule_below_mass(
    rng: np.random.Generator, dist: ProductDistribution, scale: float = 1.0
) -> NormalizedInterimRule:
    """Uniform x̄(t) in [0, scale f(t)]; feasible or not."""
    values = rng.random(dist.universe.size) * dist.mass * scale
    return NormalizedInterimRule(dist.universe, np.minimum(values, dist.mass))


def random_polymatroid_point(
    rng: np.random.Generator, g: ExpectedRankOracle, vertices: int = 3
) -> np.ndarray:
    """Random convex combination of vertices of P(g) for random orders."""
    size = g.universe.size
    weights = rng.dirichlet(np.ones(vertices))
    point = np.zeros(size)
    for weight in weights:
        length = int(rng.integers(0, size + 1))
        order = [int(o) for o in rng.permutation(size)[:length]]
        point += weight * vertex_from_order(g, order).values
    return point


def partition_instance(
    dist: ProductDistribution,
    preferences: Sequence[UnitDemandPreference],
    blocks: Sequence[Tuple[Sequence[TypeKey], int]],
) -> AuctionInstance:
    """Matroid supply from blocks of type keys, each serving at most its cap."""
    universe = dist.universe
    ordinal_blocks = [([universe.ordinal(key) for key in keys], int(cap)) for keys, cap in blocks]
    matroid: MatroidOracle = PartitionMatroid(ordinal_blocks, universe.size)
    return AuctionInstance(dist, preferences, SupplyConstraint.from_matroid(matroid))
