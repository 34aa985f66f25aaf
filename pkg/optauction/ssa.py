"""Stochastic sequential allocation for a single unit.

A token starts with a dummy type t0. Agents are visited in index order;
agent i, holding type b, takes the token from the current holder a with
probability π(a, b). The final holder is served. The pair (y, z) records
the probability y(a, s) that type a holds the token after stage s and the
probability z(a, b) that b takes it from a; feasible pairs form the SSA
polytope, whose points are exactly the single-unit feasible rules.

Rows of every matrix are indexed by ``row = ordinal + 1`` with row 0 the
dummy type; ``y`` has one column per stage 0..n.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import RerouteCapacityError, StructuralError
from .model import (
    AllocationVector,
    Mechanism,
    NormalizedInterimRule,
    ProductDistribution,
    TypeKey,
    TypeProfile,
    TypeUniverse,
)
from .settings import resolve
from .utils import LinearProgram, LinearProgramResult, to_fraction

logger = logging.getLogger(__name__)

DUMMY = "t0"

RowKey = Union[None, str, TypeKey]


def _row_agents(universe: TypeUniverse) -> np.ndarray:
    """Agent index of every row, 0 for the dummy type."""
    return np.concatenate([[0], universe.agent_of]).astype(np.int64)


def _transfer_mask(universe: TypeUniverse) -> np.ndarray:
    """True at (a, b) when a belongs to an earlier agent than b."""
    agents = _row_agents(universe)
    return agents[:, None] < agents[None, :]


def _row(universe: TypeUniverse, key: RowKey) -> int:
    if key is None or (isinstance(key, str) and key == DUMMY):
        return 0
    return universe.ordinal(key) + 1


def row_labels(universe: TypeUniverse) -> List[str]:
    return [DUMMY] + [universe.label_of(o) for o in range(universe.size)]


@dataclass
class SsaPoint:
    """Token-holding probabilities y and transfer probabilities z.

    Attributes:
        dist: The type distribution (fixes universe and the f in S.4).
        y: (|T_N| + 1, n + 1) array; y[a, s] for stages s >= agent(a).
        z: (|T_N| + 1, |T_N| + 1) array; z[a, b] for agent(a) < agent(b).
    """

    dist: ProductDistribution
    y: np.ndarray
    z: np.ndarray

    @property
    def universe(self) -> TypeUniverse:
        return self.dist.universe

    def copy(self) -> "SsaPoint":
        return SsaPoint(self.dist, self.y.copy(), self.z.copy())

    def row(self, key: RowKey) -> int:
        """Row of a type key; None or "t0" is the dummy type."""
        return _row(self.universe, key)

    @property
    def final_mass(self) -> NormalizedInterimRule:
        """x̄(t) = y(t, n) for the agent types."""
        values = np.clip(self.y[1:, -1], 0.0, 1.0)
        return NormalizedInterimRule(self.universe, values, tolerance=1.0)

    @property
    def dummy_mass(self) -> float:
        return float(self.y[0, -1])

    def violations(self, tolerance: Optional[float] = None) -> List[str]:
        """Constraints S.1-S.4 (and y >= 0) violated by more than ``tolerance``."""
        tolerance = resolve("coverage_tolerance", tolerance)
        universe = self.universe
        agents = _row_agents(universe)
        mass = np.concatenate([[1.0], self.dist.mass])
        n = universe.n_agents
        labels = row_labels(universe)
        out = []
        if abs(self.y[0, 0] - 1.0) > tolerance:
            out.append(f"S.1: y(t0, 0) = {self.y[0, 0]}")
        for b in range(1, len(agents)):
            i = agents[b]
            earlier = agents < i
            inflow = float(self.z[earlier, b].sum())
            if abs(self.y[b, i] - inflow) > tolerance:
                out.append(f"S.2: y({labels[b]}, {i}) = {self.y[b, i]} but inflow is {inflow}")
        for a in range(len(agents)):
            for s in range(agents[a] + 1, n + 1):
                stolen = float(self.z[a, agents == s].sum())
                expected = self.y[a, s - 1] - stolen
                if abs(self.y[a, s] - expected) > tolerance:
                    out.append(f"S.3: y({labels[a]}, {s}) = {self.y[a, s]}, expected {expected}")
            for s in range(agents[a], n + 1):
                if self.y[a, s] < -tolerance:
                    out.append(f"y({labels[a]}, {s}) = {self.y[a, s]} is negative")
        for a in range(len(agents)):
            for b in range(len(agents)):
                if agents[a] >= agents[b]:
                    continue
                cap = self.y[a, agents[b] - 1] * mass[b]
                if self.z[a, b] < -tolerance or self.z[a, b] > cap + tolerance:
                    out.append(
                        f"S.4: z({labels[a]}, {labels[b]}) = {self.z[a, b]} outside [0, {cap}]"
                    )
        return out

    def validate(self, tolerance: Optional[float] = None) -> None:
        """Raise StructuralError if the point is not in the SSA polytope."""
        problems = self.violations(tolerance)
        if problems:
            raise StructuralError("Point is not in the SSA polytope: " + "; ".join(problems[:5]))


@dataclass
class TransitionTable:
    """Stealing probabilities π(a, b) for agent(a) < agent(b), zero elsewhere."""

    universe: TypeUniverse
    pi: np.ndarray

    def __post_init__(self) -> None:
        pi = np.asarray(self.pi, dtype=float)
        size = self.universe.size + 1
        if pi.shape != (size, size):
            raise StructuralError(f"Transition table must be {size}x{size}, got {pi.shape}")
        if np.any(pi < -1e-12) or np.any(pi > 1 + 1e-12):
            raise StructuralError("Transition probabilities must lie in [0, 1]")
        self.pi = np.where(_transfer_mask(self.universe), np.clip(pi, 0.0, 1.0), 0.0)

    @classmethod
    def zeros(cls, universe: TypeUniverse) -> "TransitionTable":
        size = universe.size + 1
        return cls(universe, np.zeros((size, size)))

    def set(self, holder: RowKey, taker: RowKey, value: float) -> None:
        a, b = _row(self.universe, holder), _row(self.universe, taker)
        if not _transfer_mask(self.universe)[a, b]:
            raise StructuralError("Only a later agent can take the token")
        self.pi[a, b] = value

    def get(self, holder: RowKey, taker: RowKey) -> float:
        return float(self.pi[_row(self.universe, holder), _row(self.universe, taker)])

    def to_frame(self) -> pd.DataFrame:
        """Dense table with holder rows and taker columns, labeled by type."""
        labels = row_labels(self.universe)
        return pd.DataFrame(self.pi, index=labels, columns=labels)


def interim_of_table(
    table: TransitionTable, dist: ProductDistribution
) -> Tuple[SsaPoint, NormalizedInterimRule]:
    """Run the stage dynamic program of a transition table.

    z(a, b) = y(a, i - 1) π(a, b) f(b) for b of agent i, and y follows S.2
    and S.3.

    Returns:
        Tuple[SsaPoint, NormalizedInterimRule]: The point and x̄ = y(., n).
    """
    universe = dist.universe
    if table.universe != universe:
        raise StructuralError("Table and distribution are over different type universes")
    agents = _row_agents(universe)
    n = universe.n_agents
    mass = np.concatenate([[1.0], dist.mass])
    size = universe.size + 1
    y = np.zeros((size, n + 1))
    z = np.zeros((size, size))
    y[0, 0] = 1.0
    for i in range(1, n + 1):
        earlier = agents < i
        takers = np.nonzero(agents == i)[0]
        z[np.ix_(earlier, takers)] = (
            y[earlier, i - 1][:, None] * table.pi[np.ix_(earlier, takers)] * mass[takers][None, :]
        )
        y[earlier, i] = y[earlier, i - 1] - z[np.ix_(earlier, takers)].sum(axis=1)
        y[takers, i] = z[earlier][:, takers].sum(axis=0)
    point = SsaPoint(dist, y, z)
    return point, point.final_mass


@dataclass
class SsaVariables:
    """LP columns of (y, z); -1 where the entry is not a variable."""

    y: np.ndarray
    z: np.ndarray


def add_ssa_polytope(lp: LinearProgram, dist: ProductDistribution) -> SsaVariables:
    """Add the variables and constraints S.1-S.4 of the SSA polytope to ``lp``."""
    universe = dist.universe
    agents = _row_agents(universe)
    n = universe.n_agents
    mass = np.concatenate([[1.0], dist.mass])
    size = universe.size + 1
    y = -np.ones((size, n + 1), dtype=np.int64)
    z = -np.ones((size, size), dtype=np.int64)
    for a in range(size):
        for s in range(agents[a], n + 1):
            y[a, s] = lp.add_variables(1, lower=0.0, upper=1.0)[0]
    for a in range(size):
        for b in range(size):
            if agents[a] < agents[b]:
                z[a, b] = lp.add_variables(1, lower=0.0, upper=1.0)[0]
    lp.set_bounds(y[0, 0], 1.0, 1.0)
    for b in range(1, size):
        i = agents[b]
        row = {y[b, i]: 1.0}
        for a in np.nonzero(agents < i)[0]:
            row[z[a, b]] = -1.0
        lp.add_eq(row, 0.0)
    for a in range(size):
        for s in range(agents[a] + 1, n + 1):
            row = {y[a, s]: 1.0, y[a, s - 1]: -1.0}
            for b in np.nonzero(agents == s)[0]:
                row[z[a, b]] = 1.0
            lp.add_eq(row, 0.0)
    for a in range(size):
        for b in range(size):
            if agents[a] < agents[b]:
                lp.add_le({z[a, b]: 1.0, y[a, agents[b] - 1]: -mass[b]}, 0.0)
    return SsaVariables(y, z)


def read_point(result: LinearProgramResult, columns: SsaVariables, dist: ProductDistribution) -> SsaPoint:
    y = np.where(columns.y >= 0, result.x[np.maximum(columns.y, 0)], 0.0)
    z = np.where(columns.z >= 0, result.x[np.maximum(columns.z, 0)], 0.0)
    return SsaPoint(dist, y, z)


def max_coverage_lp(
    target: NormalizedInterimRule, dist: ProductDistribution
) -> Tuple[SsaPoint, float]:
    """Maximize sum_t y(t, n) subject to y(t, n) <= x̄(t) over the SSA polytope.

    The target is implementable by SSA iff the achieved mass equals
    sum_t x̄(t) within the coverage tolerance.

    Raises:
        SolverError: If the LP fails.
    """
    universe = dist.universe
    if target.universe != universe:
        raise StructuralError("Target and distribution are over different type universes")
    lp = LinearProgram("max-coverage")
    columns = add_ssa_polytope(lp, dist)
    n = universe.n_agents
    for o in range(universe.size):
        col = columns.y[o + 1, n]
        lp.set_bounds(col, 0.0, float(max(target.values[o], 0.0)))
        lp.add_objective({col: 1.0})
    result = lp.solve()
    point = read_point(result, columns, dist)
    logger.debug("Max coverage %.9g of target mass %.9g", result.value, target.values.sum())
    return point, float(result.value)


def is_implementable(
    target: NormalizedInterimRule,
    dist: ProductDistribution,
    tolerance: Optional[float] = None,
) -> bool:
    """True iff the max-coverage LP covers the whole target mass."""
    tolerance = resolve("coverage_tolerance", tolerance)
    _, achieved = max_coverage_lp(target, dist)
    return achieved >= float(target.values.sum()) - tolerance


def extract_table(point: SsaPoint, tolerance: Optional[float] = None) -> TransitionTable:
    """π = z / (y f) with π = 0 where the denominator vanishes.

    Raises:
        StructuralError: If the point violates S.1-S.4.
    """
    point.validate(tolerance)
    universe = point.universe
    agents = _row_agents(universe)
    mass = np.concatenate([[1.0], point.dist.mass])
    size = universe.size + 1
    pi = np.zeros((size, size))
    for a in range(size):
        for b in range(size):
            if agents[a] < agents[b]:
                denominator = point.y[a, agents[b] - 1] * mass[b]
                if denominator > 0:
                    pi[a, b] = min(1.0, max(0.0, point.z[a, b] / denominator))
    return TransitionTable(universe, pi)


def run_ssa(
    table: TransitionTable, profile: TypeProfile, rng: np.random.Generator
) -> AllocationVector:
    """One execution: exactly one coin flip per agent, final holder wins."""
    holder = 0
    for o in profile.ordinals:
        taker = o + 1
        if rng.random() < table.pi[holder, taker]:
            holder = taker
    if holder == 0:
        return AllocationVector.empty(table.universe)
    return AllocationVector(table.universe, frozenset({holder - 1}))


def run_ssa_batch(
    table: TransitionTable, profiles: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized executions over an (N, n) ordinal array.

    Returns:
        np.ndarray: (N,) array of winning ordinals, -1 where t0 keeps the token.
    """
    holder = np.zeros(profiles.shape[0], dtype=np.int64)
    for i in range(profiles.shape[1]):
        taker = profiles[:, i] + 1
        flips = rng.random(profiles.shape[0])
        holder = np.where(flips < table.pi[holder, taker], taker, holder)
    return holder - 1


def residual_capacity(point: SsaPoint, t_a: RowKey, t_b: RowKey) -> float:
    """Residual capacity between two types.

    Forward (b later than a): y(a, i_b - 1) f(b) - z(a, b). Backward (b
    earlier than a): z(b, a). Same agent: 0.
    """
    a, b = point.row(t_a), point.row(t_b)
    agents = _row_agents(point.universe)
    if agents[b] > agents[a]:
        f_b = point.dist.mass[b - 1]
        return float(max(0.0, point.y[a, agents[b] - 1] * f_b - point.z[a, b]))
    if agents[b] < agents[a]:
        return float(max(0.0, point.z[b, a]))
    return 0.0


def reroute(
    point: SsaPoint,
    src: RowKey,
    dst: RowKey,
    rho: float,
    tolerance: Optional[float] = None,
) -> SsaPoint:
    """Move a ρ-fraction of the token mass of ``src`` to ``dst``.

    The edge between the two types is adjusted, then a ρ-fraction of the
    subtree below ``src`` from stage max(i_src, i_dst) on is handed to
    ``dst``. Every other type keeps its final mass.

    Args:
        point: A point of the SSA polytope (left unchanged).
        src: Type losing mass; None or "t0" for the dummy type.
        dst: Type gaining mass.
        rho: Fraction in [0, 1].

    Returns:
        SsaPoint: The modified copy.

    Raises:
        StructuralError: If the types belong to the same agent or ρ is outside [0, 1].
        RerouteCapacityError: If the edge update breaks S.4.
    """
    tolerance = resolve("tolerance", tolerance)
    if not -tolerance <= rho <= 1 + tolerance:
        raise StructuralError(f"Reroute fraction must lie in [0, 1], got {rho}")
    rho = min(max(rho, 0.0), 1.0)
    s, d = point.row(src), point.row(dst)
    agents = _row_agents(point.universe)
    i_src, i_dst = agents[s], agents[d]
    if s == d or i_src == i_dst:
        raise StructuralError("Reroute needs types of two different agents")
    out = point.copy()
    if rho == 0.0:
        return out
    y0, z0 = point.y, point.z
    mass = np.concatenate([[1.0], point.dist.mass])
    if i_src < i_dst:
        out.z[s, d] += rho * y0[s, i_dst]
        cap = y0[s, i_dst - 1] * mass[d]
        if out.z[s, d] > cap + tolerance:
            raise RerouteCapacityError(
                f"z({s}, {d}) would reach {out.z[s, d]} above its capacity {cap}"
            )
    else:
        out.z[d, s] -= rho * y0[s, i_src]
        if out.z[d, s] < -tolerance:
            raise RerouteCapacityError(
                f"z({d}, {s}) would become negative ({out.z[d, s]})"
            )
    top = max(i_src, i_dst)
    n = point.universe.n_agents
    moved = rho * y0[s, top : n + 1]
    out.y[d, top : n + 1] += moved
    out.y[s, top : n + 1] -= moved
    later = agents > top
    moved_z = rho * z0[s, later]
    out.z[d, later] += moved_z
    out.z[s, later] -= moved_z
    return out


def degenerate_types(point: SsaPoint, tolerance: Optional[float] = None) -> List[int]:
    """Ordinals of types that receive the token but never keep it."""
    tolerance = resolve("tolerance", tolerance)
    agents = _row_agents(point.universe)
    return [
        b - 1
        for b in range(1, len(agents))
        if point.y[b, agents[b]] > tolerance and point.y[b, -1] <= tolerance
    ]


def eliminate_degenerate(point: SsaPoint, tolerance: Optional[float] = None) -> SsaPoint:
    """Equivalent point without degenerate types.

    Each degenerate type hands the token back to every earlier holder it
    took it from, which leaves the final mass of all agent types unchanged.
    """
    tolerance = resolve("tolerance", tolerance)
    agents = _row_agents(point.universe)
    out = point.copy()
    for _ in range(point.universe.size + 1):
        pending = degenerate_types(out, tolerance)
        if not pending:
            break
        for ordinal in pending:
            t = ordinal + 1
            i = agents[t]
            for r in np.nonzero(agents < i)[0]:
                holding = out.y[t, i]
                if holding <= tolerance:
                    break
                rho = min(1.0, max(0.0, out.z[r, t] / holding))
                if rho > 0.0:
                    out = reroute(out, ordinal, None if r == 0 else int(r - 1), rho, tolerance)
            logger.debug("Eliminated degenerate type %s", point.universe.label_of(ordinal))
    return out


def augmentable_types(
    point: SsaPoint,
    tolerance: Optional[float] = None,
    slack: float = 1e-9,
) -> List[bool]:
    """Augmentability of every row (dummy first) by LP probes.

    A type is augmentable when its final mass can strictly grow (by more
    than ``tolerance``) while every other agent type keeps its final mass.
    The dummy type is augmentable iff it keeps the token with positive
    probability; when it never does, no type is augmentable.
    """
    tolerance = resolve("coverage_tolerance", tolerance)
    universe = point.universe
    n = universe.n_agents
    if point.dummy_mass <= resolve("tolerance"):
        return [False] * (universe.size + 1)
    out = [True]
    fixed = np.clip(point.y[1:, n], 0.0, None)
    for tau in range(universe.size):
        lp = LinearProgram("augmentability")
        columns = add_ssa_polytope(lp, point.dist)
        for o in range(universe.size):
            if o == tau:
                continue
            col = columns.y[o + 1, n]
            lp.set_bounds(col, max(0.0, fixed[o] - slack), fixed[o] + slack)
        lp.add_objective({columns.y[tau + 1, n]: 1.0})
        best = lp.solve().value
        out.append(best > fixed[tau] + tolerance)
    return out


class SsaMechanism(Mechanism):
    """The SSA allocator of a transition table."""

    def __init__(self, table: TransitionTable) -> None:
        self.table = table
        self.universe = table.universe

    def run(self, profile: TypeProfile, rng: np.random.Generator) -> AllocationVector:
        return run_ssa(self.table, profile, rng)

    def run_batch(self, profiles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        winners = run_ssa_batch(self.table, profiles, rng)
        return profiles == winners[:, None]

    def service_probabilities(
        self, profile: TypeProfile, exact: bool = False
    ) -> List[Union[float, Fraction]]:
        """Holder distribution after the last stage, one entry per agent."""
        convert = to_fraction if exact else float
        holders: Dict[int, Union[float, Fraction]] = {0: convert(1.0)}
        for o in profile.ordinals:
            taker = o + 1
            taken = sum((p * convert(self.table.pi[a, taker]) for a, p in holders.items()), convert(0.0))
            holders = {a: p * (1 - convert(self.table.pi[a, taker])) for a, p in holders.items()}
            holders[taker] = taken
        return [holders[o + 1] for o in profile.ordinals]

    def describe(self) -> Dict[str, object]:
        return {
            "kind": "transition-table",
            "labels": row_labels(self.universe),
            "matrix": self.table.pi.tolist(),
        }
