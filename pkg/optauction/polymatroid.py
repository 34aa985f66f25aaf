"""Polymatroid vertices, randomized rounding and ordered-subset mechanisms.

For k-unit and matroid supply the feasible normalized rules form the
polymatroid P(g) of the expected-rank function g. Its vertices are the
marginal-gain vectors of ordered subsets, and each vertex is implemented
by the greedy mechanism that serves present types in that order. Interior
points are implemented by first rounding them to a random vertex with the
right expectation.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NotInPolytopeError, SolverError, StructuralError
from .feasibility import (
    BruteForceMinimizer,
    Constraint,
    ExpectedRankOracle,
    SubmodularMinimizer,
    separate,
)
from .matroid import as_matroid
from .model import (
    AllocationVector,
    Mechanism,
    NormalizedInterimRule,
    TypeKey,
    TypeProfile,
    TypeUniverse,
)
from .settings import resolve
from .utils import members_of

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OrderedSubset:
    """Distinct types in service priority order."""

    universe: TypeUniverse
    elements: Tuple[int, ...]

    def __post_init__(self) -> None:
        elements = tuple(self.universe.ordinal(e) for e in self.elements)
        if len(set(elements)) != len(elements):
            raise StructuralError("An ordered subset cannot repeat a type")
        object.__setattr__(self, "elements", elements)

    @classmethod
    def from_keys(cls, universe: TypeUniverse, keys: Iterable[TypeKey]) -> "OrderedSubset":
        return cls(universe, tuple(universe.ordinal(k) for k in keys))

    @property
    def labels(self) -> List[str]:
        return [self.universe.label_of(o) for o in self.elements]

    def prefix_masks(self) -> List[int]:
        masks, mask = [0], 0
        for o in self.elements:
            mask |= 1 << o
            masks.append(mask)
        return masks

    def __iter__(self) -> Iterator[int]:
        return iter(self.elements)

    def __len__(self) -> int:
        return len(self.elements)


@dataclass
class PolymatroidVertex:
    """Marginal-gain vector of an ordered subset.

    Attributes:
        values: The vertex over all type ordinals.
        order: The generating ordered subset.
        exact: Rational values when computed exactly.
        steps: Rounding iterations that produced the vertex (0 otherwise).
    """

    values: np.ndarray
    order: OrderedSubset
    exact: Optional[Tuple[Fraction, ...]] = None
    steps: int = 0

    def as_rule(self) -> NormalizedInterimRule:
        data = list(self.exact) if self.exact is not None else np.clip(self.values, 0.0, 1.0)
        return NormalizedInterimRule(self.order.universe, data)


class TightFamily:
    """Nested family ∅ = S^0 ⊂ S^1 ⊂ ... ⊂ S^m of tight sets, as masks."""

    def __init__(self) -> None:
        self.sets: List[int] = [0]

    @property
    def top(self) -> int:
        return self.sets[-1]

    def insert(self, mask: int) -> None:
        """Add a set, keeping the chain ordered.

        Raises:
            StructuralError: If the set does not nest with the chain.
        """
        if mask in self.sets:
            return
        for r, current in enumerate(self.sets):
            if mask & ~current == 0:
                if self.sets[r - 1] & ~mask:
                    raise StructuralError("Tight set does not nest with the family")
                self.sets.insert(r, mask)
                return
        if self.top & ~mask:
            raise StructuralError("Tight set does not nest with the family")
        self.sets.append(mask)

    def gaps(self) -> List[Tuple[int, int, int]]:
        """(r, S^{r-1}, S^r) for r = 1..m."""
        return [(r, self.sets[r - 1], self.sets[r]) for r in range(1, len(self.sets))]

    def is_tight(self, g: ExpectedRankOracle, y: np.ndarray, tolerance: float) -> bool:
        return all(
            abs(g.value_mask(s) - sum(y[o] for o in members_of(s))) <= tolerance
            for s in self.sets
        )


def vertex_from_order(
    g: ExpectedRankOracle, order: Union[OrderedSubset, Sequence[TypeKey]], exact: bool = False
) -> PolymatroidVertex:
    """y(π_r) = g(π_1..π_r) - g(π_1..π_{r-1}) on the order, 0 elsewhere."""
    if not isinstance(order, OrderedSubset):
        order = OrderedSubset.from_keys(g.universe, order)
    size = g.universe.size
    prefixes = order.prefix_masks()
    values = np.zeros(size)
    exact_values: Optional[List[Fraction]] = None
    if exact:
        exact_values = [Fraction(0)] * size
        levels = [g.exact(m) for m in prefixes]
        for r, o in enumerate(order.elements, start=1):
            exact_values[o] = levels[r] - levels[r - 1]
        values = np.array([float(v) for v in exact_values])
    else:
        levels = [g.value_mask(m) for m in prefixes]
        for r, o in enumerate(order.elements, start=1):
            values[o] = levels[r] - levels[r - 1]
    return PolymatroidVertex(values, order, tuple(exact_values) if exact_values else None)


def ordered_subset_from_vertex(
    g: ExpectedRankOracle,
    y: Union[NormalizedInterimRule, np.ndarray],
    tolerance: Optional[float] = None,
) -> OrderedSubset:
    """Recover an order generating the vertex ``y``.

    Greedily extends a tight set W by the smallest type s with y(s) > 0
    such that W + s is tight, until no positive type is left outside W.

    Raises:
        StructuralError: If ``y`` is not a vertex of P(g).
    """
    tolerance = resolve("tolerance", tolerance)
    values = y.values if isinstance(y, NormalizedInterimRule) else np.asarray(y, dtype=float)
    size = g.universe.size
    order: List[int] = []
    mask, mass = 0, 0.0
    while True:
        remaining = [o for o in range(size) if not mask >> o & 1 and values[o] > tolerance]
        if not remaining:
            break
        for o in remaining:
            if abs(g.value_mask(mask | 1 << o) - (mass + values[o])) <= tolerance:
                order.append(o)
                mask |= 1 << o
                mass += values[o]
                break
        else:
            raise StructuralError("Point is not a vertex of the polymatroid")
    return OrderedSubset(g.universe, tuple(order))


def _trim(vertex: PolymatroidVertex, tolerance: float) -> OrderedSubset:
    elements = list(vertex.order.elements)
    while elements and abs(vertex.values[elements[-1]]) <= tolerance:
        elements.pop()
    return OrderedSubset(vertex.order.universe, tuple(elements))


def rand_round(
    g: ExpectedRankOracle,
    y: Union[NormalizedInterimRule, np.ndarray],
    rng: np.random.Generator,
    tolerance: Optional[float] = None,
    minimizer: Optional[SubmodularMinimizer] = None,
    check: bool = True,
) -> Tuple[PolymatroidVertex, OrderedSubset]:
    """Round a point of P(g) to a random vertex with expectation ``y``.

    Keeps a nested family of tight sets. While some gap S^r minus S^{r-1}
    has two elements s < s', it moves along e_s - e_s' to the nearest new
    tight set in either direction. Otherwise, while some s outside the top
    set has y(s) > 0, it either raises y(s) to a new tight set or zeroes
    it. Each move is chosen so the step has mean zero.

    Args:
        g: Expected-rank oracle.
        y: Point of the polymatroid.
        rng: Source of the coin flips.
        tolerance: Membership and positivity tolerance.
        minimizer: Subset minimization engine; brute force by default.
        check: Verify membership of ``y`` first.

    Returns:
        Tuple[PolymatroidVertex, OrderedSubset]: The vertex (with its step
        count) and its order, trailing zero marginals trimmed.

    Raises:
        NotInPolytopeError: If ``y`` is not in P(g).
    """
    tolerance = resolve("tolerance", tolerance)
    minimizer = minimizer or BruteForceMinimizer()
    values = y.values if isinstance(y, NormalizedInterimRule) else np.asarray(y, dtype=float)
    point = np.clip(np.array(values, dtype=float), 0.0, None)
    size = g.universe.size
    if check:
        certificate = separate(point, g, minimizer=minimizer)
        if certificate.violated(tolerance):
            raise NotInPolytopeError(
                f"Point violates g(S) >= y(S) on {certificate.labels} by {-float(certificate.slack)}"
            )

    family = TightFamily()
    steps = 0
    limit = 2 * size
    while True:
        gap = next(((lo, hi) for _, lo, hi in family.gaps() if len(members_of(hi & ~lo)) >= 2), None)
        if gap is not None:
            lo, hi = gap
            s, s2 = members_of(hi & ~lo)[:2]
            up, delta = minimizer.minimize(g, point, lo | 1 << s, hi & ~(1 << s2))
            down, delta2 = minimizer.minimize(g, point, lo | 1 << s2, hi & ~(1 << s))
            delta, delta2 = max(delta, 0.0), max(delta2, 0.0)
            if delta + delta2 <= 0.0 or rng.random() < delta2 / (delta + delta2):
                point[s] += delta
                point[s2] -= delta
                family.insert(up)
            else:
                point[s] -= delta2
                point[s2] += delta2
                family.insert(down)
        else:
            outside = [o for o in range(size) if not family.top >> o & 1 and point[o] > tolerance]
            if not outside:
                break
            s = outside[0]
            full = (1 << size) - 1
            up, delta = minimizer.minimize(g, point, family.top | 1 << s, full)
            delta, delta2 = max(delta, 0.0), float(point[s])
            if delta + delta2 <= 0.0 or rng.random() < delta2 / (delta + delta2):
                point[s] += delta
                family.insert(up)
            else:
                point[s] = 0.0
        steps += 1
        if steps > limit:
            raise SolverError(f"Rounding did not terminate within {limit} iterations")

    order = OrderedSubset(g.universe, tuple(members_of(hi & ~lo)[0] for _, lo, hi in family.gaps()))
    vertex = vertex_from_order(g, order)
    order = _trim(vertex, tolerance)
    vertex = vertex_from_order(g, order)
    vertex.steps = steps
    logger.debug("Rounded to order %s in %d steps", order.labels, steps)
    return vertex, order


def run_ordered_subset(
    order: Union[OrderedSubset, Sequence[TypeKey]],
    constraint: Constraint,
    profile: TypeProfile,
) -> AllocationVector:
    """Serve present types in order while the served set stays independent."""
    universe = profile.universe
    if not isinstance(order, OrderedSubset):
        order = OrderedSubset.from_keys(universe, order)
    matroid = as_matroid(constraint, universe.size)
    present = profile.mask
    served, count = 0, 0
    for o in order.elements:
        if present >> o & 1 and matroid.can_add(served, count, o):
            served |= 1 << o
            count += 1
    return AllocationVector(universe, frozenset(members_of(served)))


class OrderedSubsetMechanism(Mechanism):
    """Deterministic greedy mechanism of one ordered subset."""

    def __init__(self, order: OrderedSubset, constraint: Constraint) -> None:
        self.order = order
        self.universe = order.universe
        self.constraint = constraint
        self.matroid = as_matroid(constraint, order.universe.size)

    def run(self, profile: TypeProfile, rng: Optional[np.random.Generator] = None) -> AllocationVector:
        return run_ordered_subset(self.order, self.matroid, profile)

    def service_probabilities(self, profile: TypeProfile, exact: bool = False) -> List[Union[int, float]]:
        winners = self.run(profile).winners
        return [int(o in winners) for o in profile.ordinals]

    def describe(self) -> Dict[str, object]:
        return {"kind": "ordered-subset", "order": self.order.labels}


class RandomizedOrderedSubsetMechanism(Mechanism):
    """Round x̄ to a random vertex per run, then serve greedily in its order."""

    def __init__(
        self,
        g: ExpectedRankOracle,
        target: NormalizedInterimRule,
        constraint: Constraint,
        tolerance: Optional[float] = None,
    ) -> None:
        tolerance = resolve("tolerance", tolerance)
        certificate = separate(target, g)
        if certificate.violated(tolerance):
            raise NotInPolytopeError(
                f"Target violates g(S) >= x̄(S) on {certificate.labels} by {-float(certificate.slack)}"
            )
        self.g = g
        self.target = target
        self.universe = target.universe
        self.constraint = constraint
        self.matroid = as_matroid(constraint, target.universe.size)
        self.tolerance = tolerance

    def draw_order(self, rng: np.random.Generator) -> OrderedSubset:
        _, order = rand_round(self.g, self.target, rng, tolerance=self.tolerance, check=False)
        return order

    def run(self, profile: TypeProfile, rng: np.random.Generator) -> AllocationVector:
        return run_ordered_subset(self.draw_order(rng), self.matroid, profile)

    def describe(self) -> Dict[str, object]:
        return {
            "kind": "randomized-ordered-subset",
            "polymatroid": self.g.flavor,
            "target": self.target.as_dict(),
        }


def rra_mechanism(
    g: ExpectedRankOracle,
    target: NormalizedInterimRule,
    constraint: Constraint,
    tolerance: Optional[float] = None,
) -> Mechanism:
    """Ex post mechanism implementing ``target`` in expectation.

    A vertex target gets its deterministic ordered-subset mechanism;
    anything else gets randomized rounding per run.

    Raises:
        NotInPolytopeError: If the target is not in P(g).
    """
    tolerance = resolve("tolerance", tolerance)
    try:
        order = ordered_subset_from_vertex(g, target, tolerance)
    except StructuralError:
        return RandomizedOrderedSubsetMechanism(g, target, constraint, tolerance)
    vertex = vertex_from_order(g, order)
    if np.allclose(vertex.values, target.values, rtol=0.0, atol=tolerance):
        return OrderedSubsetMechanism(order, constraint)
    return RandomizedOrderedSubsetMechanism(g, target, constraint, tolerance)


def decompose_vertex(
    oracles: Sequence[ExpectedRankOracle],
    weights: Sequence[float],
    order: Union[OrderedSubset, Sequence[TypeKey]],
) -> List[PolymatroidVertex]:
    """Vertex of every oracle for the same order.

    For a mixture g = sum_j λ_j g_j the vertex of g is sum_j λ_j times these.

    Raises:
        StructuralError: If the weights are negative or do not sum to 1.
    """
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(oracles):
        raise StructuralError("Need one weight per oracle")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > resolve("tolerance"):
        raise StructuralError("Weights must be nonnegative and sum to 1")
    return [vertex_from_order(g, order) for g in oracles]
