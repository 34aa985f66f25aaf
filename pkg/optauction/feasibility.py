"""Interim feasibility: expected-rank oracles and Border separation.

A normalized interim rule x̄ is feasible for a supply constraint iff
x̄(S) <= g(S) for every set of types S, where g(S) is the expected rank of
the realized types inside S. This module provides the oracles for g (exact
dynamic program for k units, profile enumeration, sampling) and the
separation oracle that finds the most violated S.
"""

import logging
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import StructuralError, UnsupportedMechanismError
from .matroid import MatroidOracle, UniformMatroid, as_matroid
from .model import (
    GlobalType,
    NormalizedInterimRule,
    ProductDistribution,
    TypeKey,
    TypeProfile,
    TypeUniverse,
)
from .settings import resolve
from .utils import (
    check_guard,
    mask_of,
    members_of,
    parse_fraction,
    subset_masks,
    subset_sums,
    to_fraction,
)

logger = logging.getLogger(__name__)

Subset = Union[int, Iterable[TypeKey]]
Constraint = Union[int, MatroidOracle]


class ExpectedRankOracle(ABC):
    """Set function g over subsets of the type universe.

    Every oracle is nonnegative, nondecreasing and submodular with
    g(∅) = 0. Values can be queried for single sets or materialized for all
    2^|T_N| subsets at once with :meth:`table`.

    Attributes:
        universe: The type universe.
        flavor: Short tag naming how values are computed.
    """

    flavor = "abstract"
    approximate = False

    def __init__(self, universe: TypeUniverse) -> None:
        self.universe = universe
        self._cache: Dict[int, float] = {}
        self._table: Optional[np.ndarray] = None

    @abstractmethod
    def _value(self, mask: int) -> float:
        """g of the set encoded by ``mask``."""

    def _exact(self, mask: int) -> Fraction:
        raise UnsupportedMechanismError(f"{type(self).__name__} has no exact values")

    def _compute_table(self) -> np.ndarray:
        return np.array([self._value(m) for m in range(1 << self.universe.size)])

    def value_mask(self, mask: int) -> float:
        if self._table is not None:
            return float(self._table[mask])
        if mask not in self._cache:
            self._cache[mask] = float(self._value(mask))
        return self._cache[mask]

    def __call__(self, subset: Subset) -> float:
        return self.value_mask(self.universe.mask(subset))

    def exact(self, subset: Subset) -> Fraction:
        """g(S) in rational arithmetic.

        Raises:
            UnsupportedMechanismError: For oracles without exact values.
        """
        return self._exact(self.universe.mask(subset))

    def table(self, guard: Optional[int] = None) -> np.ndarray:
        """g over all masks 0 .. 2^|T_N| - 1, indexed by mask.

        Raises:
            InstanceTooLargeError: If |T_N| exceeds the separation guard.
        """
        guard = resolve("separation_guard", guard)
        check_guard(self.universe.size, guard, "Subset table over the type universe")
        if self._table is None:
            logger.debug(
                "Materializing %s table over %d subsets", self.flavor, 1 << self.universe.size
            )
            table = np.asarray(self._compute_table(), dtype=float)
            table.setflags(write=False)
            self._table = table
        return self._table

    def values(self, masks: np.ndarray) -> np.ndarray:
        """g over an array of masks, using the table when it is available."""
        if self._table is not None:
            return self._table[masks]
        return np.array([self.value_mask(int(m)) for m in masks])


def _agent_mass_table(dist: ProductDistribution) -> np.ndarray:
    """q_i(S) = f(S ∩ T_i) for all masks S, shape (2^|T_N|, n)."""
    universe = dist.universe
    q = np.zeros((1, universe.n_agents))
    for o in range(universe.size):
        added = q.copy()
        added[:, universe.agent_of[o] - 1] += dist.mass[o]
        q = np.concatenate([q, added])
    return q


def _k_unit_recurrence(q_columns: Sequence, k: int, one) -> object:
    """E[min(#present, k)] from per-agent presence probabilities.

    ``q_columns`` holds one probability (or one array of probabilities) per
    agent; ``one`` is the unit of the arithmetic in use (1.0, Fraction(1) or
    an array of ones).
    """
    kk = min(k, len(q_columns))
    if kk <= 0:
        return one * 0
    state = [one] + [one * 0 for _ in range(kk)]
    for q in q_columns:
        nxt = list(state)
        nxt[0] = state[0] - q * state[0]
        for j in range(1, kk):
            nxt[j] = state[j] + q * (state[j - 1] - state[j])
        nxt[kk] = state[kk] + q * state[kk - 1]
        state = nxt
    return sum(j * state[j] for j in range(1, kk + 1))


def g_k_dp(
    k: int,
    dist: ProductDistribution,
    subset: Subset,
    exact: bool = False,
) -> Union[float, Fraction]:
    """Expected min(|profile ∩ S|, k) by the per-agent dynamic program.

    The state after agent i holds the probability that exactly j of the
    first i agents have their type in S (j < k) or at least k do.

    Args:
        k: Number of units, at least 1.
        dist: Product type distribution.
        subset: The set S.
        exact: Compute in rational arithmetic.

    Returns:
        The value g_k(S), a Fraction when ``exact`` is set.
    """
    if int(k) < 1:
        raise StructuralError(f"Supply k must be at least 1, got {k}")
    universe = dist.universe
    mask = universe.mask(subset)
    q_columns = []
    for i in range(1, universe.n_agents + 1):
        members = [o for o in universe.agent_types(i) if mask >> o & 1]
        if exact:
            q_columns.append(sum((dist.exact_mass[o] for o in members), Fraction(0)))
        else:
            q_columns.append(float(sum(dist.mass[o] for o in members)))
    one = Fraction(1) if exact else 1.0
    return _k_unit_recurrence(q_columns, int(k), one)


def g_bruteforce(
    constraint: Constraint,
    dist: ProductDistribution,
    subset: Subset,
    guard: Optional[int] = None,
    exact: bool = False,
) -> Union[float, Fraction]:
    """Expected rank of profile ∩ S by enumerating every type profile.

    Args:
        constraint: Supply k or a matroid rank oracle.
        dist: Product type distribution.
        subset: The set S.
        guard: Largest number of profiles; defaults to the enumeration guard.
        exact: Compute in rational arithmetic.

    Raises:
        InstanceTooLargeError: If there are more profiles than the guard.
    """
    universe = dist.universe
    matroid = as_matroid(constraint, universe.size)
    mask = universe.mask(subset)
    total: Union[float, Fraction] = Fraction(0) if exact else 0.0
    for profile, prob in dist.profiles(guard=guard, exact=exact):
        if prob == 0:
            continue
        total += prob * matroid.rank_mask(profile.mask & mask)
    return total


class KUnitOracle(ExpectedRankOracle):
    """g_k for k identical units.

    Args:
        dist: Product type distribution.
        k: Number of units.
        method: "dp" for the dynamic program, "enumeration" for profile
            enumeration.
    """

    def __init__(self, dist: ProductDistribution, k: int, method: str = "dp") -> None:
        if method not in ("dp", "enumeration"):
            raise ValueError(f"Unknown method {method!r}; use 'dp' or 'enumeration'")
        if int(k) < 1:
            raise StructuralError(f"Supply k must be at least 1, got {k}")
        super().__init__(dist.universe)
        self.dist = dist
        self.k = int(k)
        self.method = method
        self.flavor = f"k-unit {method}"

    def _value(self, mask: int) -> float:
        if self.method == "dp":
            return float(g_k_dp(self.k, self.dist, mask))
        return float(g_bruteforce(self.k, self.dist, mask))

    def _exact(self, mask: int) -> Fraction:
        if self.method == "dp":
            return g_k_dp(self.k, self.dist, mask, exact=True)
        return g_bruteforce(self.k, self.dist, mask, exact=True)

    def _compute_table(self) -> np.ndarray:
        if self.method == "enumeration":
            return _enumeration_table(self.dist, UniformMatroid(self.k, self.universe.size))
        q = _agent_mass_table(self.dist)
        columns = [q[:, i] for i in range(q.shape[1])]
        return _k_unit_recurrence(columns, self.k, np.ones(q.shape[0]))


def _enumeration_table(dist: ProductDistribution, matroid: MatroidOracle) -> np.ndarray:
    ordinals, probs = dist.profile_table()
    masks = np.arange(1 << dist.universe.size, dtype=np.int64)
    table = np.zeros(masks.shape[0])
    for row, prob in zip(ordinals, probs):
        if prob == 0:
            continue
        table += prob * matroid.rank_batch(masks & mask_of(row))
    return table


class MatroidRankOracle(ExpectedRankOracle):
    """g_M(S) = E[rank(profile ∩ S)] for a matroid supply.

    Args:
        dist: Product type distribution.
        matroid: Rank oracle over the type ordinals.
        method: "enumeration" (exact) or "sampled".
        epsilon: Additive accuracy of the sampled estimate.
        delta: Failure probability of the sampled estimate.
        seed: Seed of the sampled profiles.
    """

    def __init__(
        self,
        dist: ProductDistribution,
        matroid: MatroidOracle,
        method: str = "enumeration",
        epsilon: float = 0.05,
        delta: float = 0.05,
        seed: Optional[int] = 0,
    ) -> None:
        if method not in ("enumeration", "sampled"):
            raise ValueError(f"Unknown method {method!r}; use 'enumeration' or 'sampled'")
        super().__init__(dist.universe)
        self.dist = dist
        self.matroid = matroid
        self.method = method
        self.flavor = f"matroid {method}"
        self._samples: Optional[np.ndarray] = None
        if method == "sampled":
            if not (0 < epsilon < 1 and 0 < delta < 1):
                raise ValueError("epsilon and delta must lie in (0, 1)")
            n = dist.universe.n_agents
            count = int(math.ceil(math.log(2.0 / delta) / (2.0 * epsilon**2))) * n
            warnings.warn(
                f"Sampled expected-rank oracle is approximate: {count} profiles, "
                f"accuracy {epsilon} with probability {1 - delta}",
                stacklevel=2,
            )
            self.approximate = True
            self.epsilon = epsilon
            self.delta = delta
            rng = np.random.default_rng(seed)
            rows = dist.sample_profiles(rng, count)
            self._samples = np.array([mask_of(r) for r in rows], dtype=np.int64)

    def _value(self, mask: int) -> float:
        if self._samples is not None:
            return float(np.mean(self.matroid.rank_batch(self._samples & mask)))
        return float(g_bruteforce(self.matroid, self.dist, mask))

    def _exact(self, mask: int) -> Fraction:
        if self._samples is not None:
            raise UnsupportedMechanismError("A sampled oracle has no exact values")
        return g_bruteforce(self.matroid, self.dist, mask, exact=True)

    def _compute_table(self) -> np.ndarray:
        if self._samples is None:
            return _enumeration_table(self.dist, self.matroid)
        masks = np.arange(1 << self.universe.size, dtype=np.int64)
        table = np.zeros(masks.shape[0])
        for sample in self._samples:
            table += self.matroid.rank_batch(masks & sample)
        return table / len(self._samples)


class ProfileRankOracle(ExpectedRankOracle):
    """r(S) = rank(profile ∩ S) for one fixed profile."""

    flavor = "profile rank"

    def __init__(self, profile: TypeProfile, constraint: Constraint) -> None:
        super().__init__(profile.universe)
        self.profile = profile
        self.matroid = as_matroid(constraint, profile.universe.size)
        self._profile_mask = profile.mask

    def _value(self, mask: int) -> float:
        return float(self.matroid.rank_mask(mask & self._profile_mask))

    def _exact(self, mask: int) -> Fraction:
        return Fraction(self.matroid.rank_mask(mask & self._profile_mask))

    def _compute_table(self) -> np.ndarray:
        masks = np.arange(1 << self.universe.size, dtype=np.int64)
        return self.matroid.rank_batch(masks & self._profile_mask).astype(float)


class MixtureOracle(ExpectedRankOracle):
    """Convex combination sum_j λ_j g_j of oracles over one universe."""

    flavor = "mixture"

    def __init__(
        self, oracles: Sequence[ExpectedRankOracle], weights: Sequence[Union[float, Fraction, str]]
    ) -> None:
        if len(oracles) == 0 or len(oracles) != len(weights):
            raise StructuralError("A mixture needs one weight per oracle")
        universe = oracles[0].universe
        if any(o.universe != universe for o in oracles):
            raise StructuralError("Mixed oracles must share a type universe")
        exact_weights = [parse_fraction(w) for w in weights]
        if any(w < 0 for w in exact_weights):
            raise StructuralError("Mixture weights must be nonnegative")
        if abs(float(sum(exact_weights)) - 1.0) > resolve("tolerance"):
            raise StructuralError("Mixture weights must sum to 1")
        super().__init__(universe)
        self.oracles = list(oracles)
        self.exact_weights = exact_weights
        self.weights = np.array([float(w) for w in exact_weights])

    def _value(self, mask: int) -> float:
        return float(sum(w * o.value_mask(mask) for w, o in zip(self.weights, self.oracles)))

    def _exact(self, mask: int) -> Fraction:
        return sum((w * o._exact(mask) for w, o in zip(self.exact_weights, self.oracles)), Fraction(0))

    def _compute_table(self) -> np.ndarray:
        return sum(w * o.table() for w, o in zip(self.weights, self.oracles))


def expected_rank_oracle(constraint: Constraint, dist: ProductDistribution) -> ExpectedRankOracle:
    """The exact default oracle for a supply given as k or a matroid."""
    if isinstance(constraint, UniformMatroid):
        return KUnitOracle(dist, constraint.k)
    if isinstance(constraint, MatroidOracle):
        return MatroidRankOracle(dist, constraint)
    return KUnitOracle(dist, int(constraint))


@dataclass(frozen=True)
class ViolationCertificate:
    """The minimizer S* of g(S) - x̄(S) and its slack.

    Attributes:
        universe: The type universe.
        mask: Bitmask of S*.
        g_value: g(S*).
        mass: x̄(S*).
        slack: g(S*) - x̄(S*); negative when x̄ is infeasible.
    """

    universe: TypeUniverse
    mask: int
    g_value: Union[float, Fraction]
    mass: Union[float, Fraction]
    slack: Union[float, Fraction]

    @property
    def members(self) -> Tuple[int, ...]:
        return members_of(self.mask)

    @property
    def types(self) -> Tuple[GlobalType, ...]:
        return self.universe.members(self.mask)

    @property
    def labels(self) -> List[str]:
        return [str(t) for t in self.types]

    def violated(self, tolerance: Optional[float] = None) -> bool:
        return float(self.slack) < -resolve("tolerance", tolerance)


class SubmodularMinimizer(ABC):
    """Engine minimizing g(S) - y(S) over required ⊆ S ⊆ allowed."""

    @abstractmethod
    def minimize(
        self,
        oracle: ExpectedRankOracle,
        y: np.ndarray,
        required: int = 0,
        allowed: Optional[int] = None,
    ) -> Tuple[int, float]:
        """Return (mask, value) of the lexicographically first minimizer."""


class BruteForceMinimizer(SubmodularMinimizer):
    """Enumerates every set between ``required`` and ``allowed``.

    Minimizers within ``tie_tolerance`` of each other are tied and the one
    whose sorted ordinal tuple is lexicographically smallest wins.

    Args:
        guard: Largest number of free elements; defaults to the separation guard.
        tie_tolerance: Tie window; defaults to the settings value.
    """

    def __init__(self, guard: Optional[int] = None, tie_tolerance: Optional[float] = None) -> None:
        self.guard = guard
        self.tie_tolerance = tie_tolerance

    def candidates(
        self,
        oracle: ExpectedRankOracle,
        y: np.ndarray,
        required: int = 0,
        allowed: Optional[int] = None,
        window: Optional[float] = None,
    ) -> Tuple[List[int], np.ndarray]:
        """Masks within ``window`` of the minimum, in lexicographic order, and their values."""
        size = oracle.universe.size
        guard = resolve("separation_guard", self.guard)
        window = resolve("tie_tolerance", window if window is not None else self.tie_tolerance)
        if allowed is None:
            allowed = (1 << size) - 1
        if required & ~allowed:
            raise StructuralError("Required elements must be allowed")
        free = members_of(allowed & ~required)
        check_guard(len(free), guard, "Free elements of the subset search")
        masks = subset_masks(required, free)
        if size <= guard:
            g = oracle.table(guard)[masks]
        else:
            g = oracle.values(masks)
        values = g - subset_sums(y, required, free)
        best = float(values.min())
        tied = sorted(
            (members_of(int(masks[i])), int(masks[i]), float(values[i]))
            for i in np.nonzero(values <= best + window)[0]
        )
        return [m for _, m, _ in tied], np.array([v for _, _, v in tied])

    def minimize(
        self,
        oracle: ExpectedRankOracle,
        y: np.ndarray,
        required: int = 0,
        allowed: Optional[int] = None,
    ) -> Tuple[int, float]:
        ordered, values = self.candidates(oracle, y, required, allowed)
        return ordered[0], float(values[0])


def _rule_values(xbar: Union[NormalizedInterimRule, Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(xbar, NormalizedInterimRule):
        return np.asarray(xbar.values, dtype=float)
    return np.asarray(xbar, dtype=float)


def separate(
    xbar: Union[NormalizedInterimRule, np.ndarray],
    g: ExpectedRankOracle,
    exact: bool = False,
    minimizer: Optional[SubmodularMinimizer] = None,
) -> ViolationCertificate:
    """Find S* minimizing g(S) - x̄(S) over all subsets of types.

    Args:
        xbar: The normalized rule (or a plain vector over the ordinals).
        g: Expected-rank oracle defining the polymatroid.
        exact: Re-rank near-minimizers and report the slack in rational
            arithmetic, using the exact entries of ``xbar`` when it has them.
        minimizer: Subset minimization engine; brute force by default.

    Returns:
        ViolationCertificate: The minimizer; slack >= -tolerance iff feasible.

    Raises:
        InstanceTooLargeError: If |T_N| exceeds the separation guard.
    """
    y = _rule_values(xbar)
    if y.shape[0] != g.universe.size:
        raise StructuralError("Rule and oracle are over different type universes")
    minimizer = minimizer or BruteForceMinimizer()
    if not exact:
        mask, value = minimizer.minimize(g, y)
        mass = float(sum(y[o] for o in members_of(mask)))
        return ViolationCertificate(g.universe, mask, value + mass, mass, value)

    if isinstance(xbar, NormalizedInterimRule) and xbar.exact is not None:
        exact_y = list(xbar.exact)
    else:
        exact_y = [to_fraction(v) for v in y]
    if isinstance(minimizer, BruteForceMinimizer):
        window = max(1e-7, resolve("tie_tolerance", minimizer.tie_tolerance))
        masks, _ = minimizer.candidates(g, y, window=window)
    else:
        masks = [minimizer.minimize(g, y)[0]]
    best = None
    for mask in masks:
        g_value = g.exact(mask)
        mass = sum((exact_y[o] for o in members_of(mask)), Fraction(0))
        if best is None or g_value - mass < best[3]:
            best = (mask, g_value, mass, g_value - mass)
    mask, g_value, mass, slack = best
    return ViolationCertificate(g.universe, mask, g_value, mass, slack)


def is_feasible(
    xbar: Union[NormalizedInterimRule, np.ndarray],
    g: ExpectedRankOracle,
    tolerance: Optional[float] = None,
    exact: bool = False,
) -> Tuple[bool, ViolationCertificate]:
    """Border/MRMB feasibility test.

    Returns:
        Tuple[bool, ViolationCertificate]: True iff the minimum slack is at
        least ``-tolerance``, and the certificate of the minimizer.
    """
    certificate = separate(xbar, g, exact=exact)
    return not certificate.violated(tolerance), certificate


def check_expected_rank(
    g: ExpectedRankOracle,
    rng: np.random.Generator,
    triples: int = 1000,
    tolerance: Optional[float] = None,
) -> List[str]:
    """Spot-check g(∅) = 0, monotonicity and submodularity on random triples.

    Each triple is S ⊂ S' and s ∉ S'; the check is
    g(S + s) - g(S) >= g(S' + s) - g(S') >= 0.

    Returns:
        List[str]: Descriptions of the failed checks; empty when all pass.
    """
    tolerance = resolve("tolerance", tolerance)
    size = g.universe.size
    problems = []
    if abs(g.value_mask(0)) > tolerance:
        problems.append(f"g(empty set) = {g.value_mask(0)}")
    for _ in range(triples):
        s = int(rng.integers(size))
        outer = int(rng.integers(1 << size)) & ~(1 << s)
        inner = outer & int(rng.integers(1 << size))
        gain_inner = g.value_mask(inner | 1 << s) - g.value_mask(inner)
        gain_outer = g.value_mask(outer | 1 << s) - g.value_mask(outer)
        if gain_outer < -tolerance:
            problems.append(f"not monotone at {members_of(outer)} + {s}")
        if gain_inner < gain_outer - tolerance:
            problems.append(
                f"not submodular: {members_of(inner)} ⊂ {members_of(outer)} with {s}"
            )
    return problems
