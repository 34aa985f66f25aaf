"""Type universe, distributions, profiles and interim allocation rules.

Types of all agents live in one dense ordinal space: agent 1's types come
first, then agent 2's, and so on. Every vector in the library (interim
rules, normalized rules, polymatroid points) is a NumPy array over these
ordinals. Subsets of the universe are passed around as bitmasks.
"""

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from fractions import Fraction
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd

from .errors import InfeasibleMassError, StructuralError, UnsupportedMechanismError
from .settings import resolve
from .utils import Number, check_guard, mask_of, members_of, parse_fraction

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class GlobalType:
    """A type of one agent, labeled by the agent so types never collide.

    Attributes:
        agent_index: 1-based index of the agent owning the type.
        label: Label unique within the agent's type space.
    """

    agent_index: int
    label: str

    def __str__(self) -> str:
        return f"{self.agent_index}:{self.label}"


TypeKey = Union[int, str, GlobalType]


class TypeUniverse:
    """The disjoint union T_N of all agents' type spaces.

    Args:
        labels: One list of type labels per agent, in agent order.

    Raises:
        StructuralError: If there are no agents, an agent has no types, or a
            label repeats within an agent.
    """

    def __init__(self, labels: Sequence[Sequence[str]]) -> None:
        if len(labels) == 0:
            raise StructuralError("A type universe needs at least one agent")
        types: List[GlobalType] = []
        offsets = [0]
        for i, agent_labels in enumerate(labels, start=1):
            agent_labels = [str(label) for label in agent_labels]
            if not agent_labels:
                raise StructuralError(f"Agent {i} has no types")
            if len(set(agent_labels)) != len(agent_labels):
                raise StructuralError(f"Agent {i} has duplicate type labels")
            types.extend(GlobalType(i, label) for label in agent_labels)
            offsets.append(len(types))
        self._types: Tuple[GlobalType, ...] = tuple(types)
        self._offsets: Tuple[int, ...] = tuple(offsets)
        self._index: Dict[GlobalType, int] = {t: o for o, t in enumerate(types)}
        self._agent_of = np.array([t.agent_index for t in types], dtype=np.int64)
        self._agent_of.setflags(write=False)

    @property
    def n_agents(self) -> int:
        return len(self._offsets) - 1

    @property
    def size(self) -> int:
        """|T_N|, the total number of types."""
        return len(self._types)

    @property
    def types(self) -> Tuple[GlobalType, ...]:
        return self._types

    @property
    def agent_of(self) -> np.ndarray:
        """1-based agent index of every ordinal."""
        return self._agent_of

    @property
    def labels(self) -> List[List[str]]:
        return [
            [t.label for t in self._types[self._offsets[i] : self._offsets[i + 1]]]
            for i in range(self.n_agents)
        ]

    def agent_types(self, agent_index: int) -> range:
        """Ordinals of the types of agent ``agent_index`` (1-based)."""
        if not 1 <= agent_index <= self.n_agents:
            raise StructuralError(f"No agent with index {agent_index}")
        return range(self._offsets[agent_index - 1], self._offsets[agent_index])

    def ordinal(self, key: TypeKey) -> int:
        """Ordinal of a type given as ordinal, GlobalType or "agent:label" string.

        Raises:
            StructuralError: If the type is not part of the universe.
        """
        if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
            if not 0 <= int(key) < self.size:
                raise StructuralError(f"Type ordinal {key} out of range")
            return int(key)
        if isinstance(key, str):
            agent, sep, label = key.partition(":")
            if not sep or not agent.strip().isdigit():
                raise StructuralError(
                    f"Type {key!r} must be written as '<agent>:<label>'"
                )
            key = GlobalType(int(agent), label)
        if isinstance(key, GlobalType) and key in self._index:
            return self._index[key]
        raise StructuralError(f"Type {key!s} is not in the universe")

    def label_of(self, ordinal: int) -> str:
        return str(self._types[ordinal])

    def mask(self, subset: Union[int, Iterable[TypeKey]]) -> int:
        """Bitmask of a subset given as a mask or an iterable of type keys."""
        if isinstance(subset, (int, np.integer)) and not isinstance(subset, bool):
            mask = int(subset)
            if mask < 0 or mask >> self.size:
                raise StructuralError(f"Mask {mask} is outside the universe")
            return mask
        return mask_of(self.ordinal(key) for key in subset)

    def members(self, mask: int) -> Tuple[GlobalType, ...]:
        return tuple(self._types[o] for o in members_of(mask))

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[GlobalType]:
        return iter(self._types)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TypeUniverse) and self._types == other._types

    def __hash__(self) -> int:
        return hash(self._types)

    def __repr__(self) -> str:
        return f"TypeUniverse({self.labels!r})"


class ProductDistribution:
    """Independent per-agent type distributions f_i.

    Masses are stored exactly as fractions alongside a float view used for
    numerical work.

    Args:
        universe: The type universe.
        masses: One mass per type ordinal (numbers, Fractions or strings).
        tolerance: Allowed deviation of each agent's total from 1.

    Raises:
        StructuralError: On length mismatch, negative masses or agent totals
            away from 1.
    """

    def __init__(
        self,
        universe: TypeUniverse,
        masses: Sequence[Number],
        tolerance: Optional[float] = None,
    ) -> None:
        tolerance = resolve("tolerance", tolerance)
        if len(masses) != universe.size:
            raise StructuralError(
                f"Expected {universe.size} type masses, got {len(masses)}"
            )
        exact = []
        for o, value in enumerate(masses):
            try:
                fraction = parse_fraction(value)
            except ValueError as exc:
                raise StructuralError(
                    f"Mass of type {universe.label_of(o)}: {exc}"
                ) from exc
            if fraction < 0:
                raise StructuralError(
                    f"Mass of type {universe.label_of(o)} is negative ({value})"
                )
            exact.append(fraction)
        for i in range(1, universe.n_agents + 1):
            total = float(sum(exact[o] for o in universe.agent_types(i)))
            if abs(total - 1.0) > tolerance:
                raise StructuralError(
                    f"Type masses of agent {i} sum to {total}, expected 1"
                )
        self.universe = universe
        self.exact_mass: Tuple[Fraction, ...] = tuple(exact)
        self.mass = np.array([float(v) for v in exact])
        self.mass.setflags(write=False)

    @classmethod
    def from_agents(
        cls,
        universe: TypeUniverse,
        per_agent: Sequence[Sequence[Number]],
        tolerance: Optional[float] = None,
    ) -> "ProductDistribution":
        """Build from one list of masses per agent."""
        flat = [m for masses in per_agent for m in masses]
        return cls(universe, flat, tolerance=tolerance)

    def agent_mass(self, agent_index: int) -> np.ndarray:
        return self.mass[list(self.universe.agent_types(agent_index))]

    def agent_exact_mass(self, agent_index: int) -> List[Fraction]:
        return [self.exact_mass[o] for o in self.universe.agent_types(agent_index)]

    @property
    def profile_count(self) -> int:
        """Number of type profiles, the product of the |T_i|."""
        count = 1
        for i in range(1, self.universe.n_agents + 1):
            count *= len(self.universe.agent_types(i))
        return count

    def profile_table(self, guard: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """All type profiles and their probabilities.

        Args:
            guard: Largest number of profiles allowed; defaults to the
                enumeration guard.

        Returns:
            Tuple[np.ndarray, np.ndarray]: An (P, n) array of ordinals, one row
            per profile, and the (P,) array of profile probabilities.
        """
        guard = resolve("enumeration_guard", guard)
        check_guard(self.profile_count, guard, "Type profile enumeration")
        ranges = [list(self.universe.agent_types(i)) for i in range(1, self.universe.n_agents + 1)]
        grids = np.meshgrid(*[np.array(r, dtype=np.int64) for r in ranges], indexing="ij")
        ordinals = np.stack([g.reshape(-1) for g in grids], axis=1)
        probs = np.prod(self.mass[ordinals], axis=1)
        return ordinals, probs

    def profiles(
        self, guard: Optional[int] = None, exact: bool = False
    ) -> Iterator[Tuple["TypeProfile", Union[float, Fraction]]]:
        """Iterate over (profile, probability) pairs in lexicographic order."""
        guard = resolve("enumeration_guard", guard)
        check_guard(self.profile_count, guard, "Type profile enumeration")
        ranges = [self.universe.agent_types(i) for i in range(1, self.universe.n_agents + 1)]
        for combo in itertools.product(*ranges):
            if exact:
                prob: Union[float, Fraction] = Fraction(1)
                for o in combo:
                    prob *= self.exact_mass[o]
            else:
                prob = float(np.prod(self.mass[list(combo)]))
            yield TypeProfile(self.universe, tuple(combo)), prob

    def sample_profiles(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Sample ``count`` independent profiles as an (count, n) ordinal array."""
        columns = []
        for i in range(1, self.universe.n_agents + 1):
            ordinals = np.array(self.universe.agent_types(i), dtype=np.int64)
            p = self.mass[ordinals]
            columns.append(rng.choice(ordinals, size=count, p=p / p.sum()))
        return np.stack(columns, axis=1)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ProductDistribution)
            and self.universe == other.universe
            and self.exact_mass == other.exact_mass
        )

    def __hash__(self) -> int:
        return hash((self.universe, self.exact_mass))

    def __repr__(self) -> str:
        return f"ProductDistribution({self.universe!r}, {[str(m) for m in self.exact_mass]})"


@dataclass(frozen=True)
class TypeProfile:
    """One realized type per agent, stored as ordinals in agent order."""

    universe: TypeUniverse
    ordinals: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.ordinals) != self.universe.n_agents:
            raise StructuralError(
                f"A profile needs {self.universe.n_agents} types, got {len(self.ordinals)}"
            )
        for i, o in enumerate(self.ordinals, start=1):
            if int(o) not in self.universe.agent_types(i):
                raise StructuralError(f"Type ordinal {o} does not belong to agent {i}")
        object.__setattr__(self, "ordinals", tuple(int(o) for o in self.ordinals))

    @classmethod
    def from_labels(cls, universe: TypeUniverse, labels: Sequence[str]) -> "TypeProfile":
        """Build from one label per agent, e.g. ``["H", "L"]``."""
        if len(labels) != universe.n_agents:
            raise StructuralError(
                f"A profile needs {universe.n_agents} labels, got {len(labels)}"
            )
        return cls(
            universe,
            tuple(
                universe.ordinal(GlobalType(i, str(label)))
                for i, label in enumerate(labels, start=1)
            ),
        )

    @property
    def chosen(self) -> Tuple[GlobalType, ...]:
        return tuple(self.universe.types[o] for o in self.ordinals)

    @property
    def mask(self) -> int:
        return mask_of(self.ordinals)

    def __str__(self) -> str:
        return "(" + ", ".join(str(t) for t in self.chosen) + ")"


class _TypeVector:
    """Read-only vector over the type ordinals with an optional exact copy."""

    _lower = 0.0
    _upper = 1.0

    def __init__(
        self,
        universe: TypeUniverse,
        values: Union[Sequence[Any], np.ndarray],
        tolerance: Optional[float] = None,
    ) -> None:
        tolerance = resolve("tolerance", tolerance)
        if len(values) != universe.size:
            raise StructuralError(
                f"Expected {universe.size} entries, got {len(values)}"
            )
        exact: Optional[Tuple[Fraction, ...]] = None
        if not isinstance(values, np.ndarray) and all(
            isinstance(v, (int, Fraction, str)) and not isinstance(v, bool)
            for v in values
        ):
            exact = tuple(parse_fraction(v) for v in values)
            array = np.array([float(v) for v in exact])
        else:
            array = np.array(values, dtype=float)
        if np.any(~np.isfinite(array)):
            raise StructuralError("Rule entries must be finite")
        if np.any(array < self._lower - tolerance) or np.any(array > self._upper + tolerance):
            raise StructuralError(
                f"{type(self).__name__} entries must lie in [{self._lower}, {self._upper}]"
            )
        array = np.clip(array, self._lower, self._upper)
        array.setflags(write=False)
        self.universe = universe
        self.values = array
        self.exact = exact

    def __getitem__(self, key: TypeKey) -> float:
        return float(self.values[self.universe.ordinal(key)])

    def __len__(self) -> int:
        return self.universe.size

    def as_dict(self) -> Dict[str, float]:
        return {self.universe.label_of(o): float(v) for o, v in enumerate(self.values)}

    def to_series(self, name: Optional[str] = None) -> pd.Series:
        index = [self.universe.label_of(o) for o in range(self.universe.size)]
        return pd.Series(self.values, index=index, name=name)

    def agent_values(self, agent_index: int) -> np.ndarray:
        return self.values[list(self.universe.agent_types(agent_index))]

    def mass_of(self, subset: Union[int, Iterable[TypeKey]]) -> float:
        """Sum of the entries over a subset."""
        return float(sum(self.values[o] for o in members_of(self.universe.mask(subset))))

    def allclose(self, other: "_TypeVector", atol: float = 1e-9) -> bool:
        return self.universe == other.universe and bool(
            np.allclose(self.values, other.values, rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {v:.6g}" for k, v in self.as_dict().items())
        return f"{type(self).__name__}({body})"


class InterimAllocationRule(_TypeVector):
    """Per-type interim service probabilities x_i(t_i) in [0, 1]."""


class NormalizedInterimRule(_TypeVector):
    """Per-type service mass x̄(t) = x(t) f(t) in [0, 1].

    The bound x̄ <= f depends on a distribution and is checked by
    :meth:`check_mass`.
    """

    def check_mass(self, dist: ProductDistribution, tolerance: Optional[float] = None) -> None:
        """Raise InfeasibleMassError when some x̄(t) exceeds f(t)."""
        tolerance = resolve("tolerance", tolerance)
        _check_universe(self.universe, dist.universe)
        excess = self.values - dist.mass
        worst = int(np.argmax(excess))
        if excess[worst] > tolerance:
            raise InfeasibleMassError(
                f"Service mass {self.values[worst]} of type "
                f"{self.universe.label_of(worst)} exceeds its probability {dist.mass[worst]}"
            )

    @classmethod
    def zeros(cls, universe: TypeUniverse) -> "NormalizedInterimRule":
        return cls(universe, [0] * universe.size)


@dataclass(frozen=True)
class AllocationVector:
    """The set of served types of one mechanism run.

    Attributes:
        universe: The type universe.
        winners: Ordinals of the served types, at most one per agent.
    """

    universe: TypeUniverse
    winners: FrozenSet[int]

    def __post_init__(self) -> None:
        winners = frozenset(int(o) for o in self.winners)
        agents = [int(self.universe.agent_of[o]) for o in winners]
        if len(set(agents)) != len(agents):
            raise StructuralError("An allocation serves at most one type per agent")
        object.__setattr__(self, "winners", winners)

    @classmethod
    def empty(cls, universe: TypeUniverse) -> "AllocationVector":
        return cls(universe, frozenset())

    def served(self, key: TypeKey) -> bool:
        return self.universe.ordinal(key) in self.winners

    def served_agents(self) -> List[int]:
        return sorted(int(self.universe.agent_of[o]) for o in self.winners)

    def consistent_with(self, profile: TypeProfile) -> bool:
        """True when every winner is the realized type of its agent."""
        return self.winners <= set(profile.ordinals)

    @property
    def types(self) -> Tuple[GlobalType, ...]:
        return tuple(self.universe.types[o] for o in sorted(self.winners))


class Mechanism(ABC):
    """An ex post allocation mechanism over a type universe.

    Subclasses implement :meth:`run`; vectorized and exact variants are
    optional capabilities.
    """

    universe: TypeUniverse

    @abstractmethod
    def run(self, profile: TypeProfile, rng: np.random.Generator) -> AllocationVector:
        """Run the mechanism once on a reported profile."""

    def run_batch(self, profiles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Run on every row of an (N, n) ordinal array.

        Returns:
            np.ndarray: (N, n) boolean array, True where the agent is served.
        """
        served = np.zeros(profiles.shape, dtype=bool)
        for row, ordinals in enumerate(profiles):
            allocation = self.run(TypeProfile(self.universe, tuple(ordinals)), rng)
            for i, o in enumerate(ordinals):
                served[row, i] = int(o) in allocation.winners
        return served

    def service_probabilities(
        self, profile: TypeProfile, exact: bool = False
    ) -> List[Union[float, Fraction]]:
        """Probability that each agent is served on ``profile``.

        Raises:
            UnsupportedMechanismError: If the mechanism cannot compute them.
        """
        raise UnsupportedMechanismError(
            f"{type(self).__name__} has no exact service probabilities; "
            "use Monte Carlo estimation instead"
        )


def _check_universe(a: TypeUniverse, b: TypeUniverse) -> None:
    if a != b:
        raise StructuralError("Rule and distribution are over different type universes")


def normalize(rule: InterimAllocationRule, dist: ProductDistribution) -> NormalizedInterimRule:
    """Normalized rule x̄(t) = x(t) f(t).

    Args:
        rule: Interim allocation rule.
        dist: Type distribution over the same universe.

    Returns:
        NormalizedInterimRule: The normalized rule, exact when the rule is.

    Raises:
        StructuralError: If the universes differ.
    """
    _check_universe(rule.universe, dist.universe)
    if rule.exact is not None:
        return NormalizedInterimRule(
            rule.universe, [x * f for x, f in zip(rule.exact, dist.exact_mass)]
        )
    return NormalizedInterimRule(rule.universe, rule.values * dist.mass)


def denormalize(
    xbar: NormalizedInterimRule,
    dist: ProductDistribution,
    tolerance: Optional[float] = None,
) -> InterimAllocationRule:
    """Interim rule x(t) = x̄(t) / f(t), with x(t) = 0 where f(t) = 0.

    Raises:
        StructuralError: If the universes differ.
        InfeasibleMassError: If x̄(t) > f(t), or x̄(t) > 0 at f(t) = 0.
    """
    tolerance = resolve("tolerance", tolerance)
    _check_universe(xbar.universe, dist.universe)
    for o in range(xbar.universe.size):
        if dist.mass[o] == 0 and xbar.values[o] > tolerance:
            raise InfeasibleMassError(
                f"Type {xbar.universe.label_of(o)} has probability 0 but service "
                f"mass {xbar.values[o]}"
            )
    xbar.check_mass(dist, tolerance)
    if xbar.exact is not None:
        return InterimAllocationRule(
            xbar.universe,
            [min(Fraction(1), x / f) if f > 0 else Fraction(0) for x, f in zip(xbar.exact, dist.exact_mass)],
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(dist.mass > 0, xbar.values / np.where(dist.mass > 0, dist.mass, 1.0), 0.0)
    return InterimAllocationRule(xbar.universe, np.minimum(values, 1.0))


def sample_profile(dist: ProductDistribution, rng: np.random.Generator) -> TypeProfile:
    """Sample one type profile, agents independently."""
    ordinals = dist.sample_profiles(rng, 1)[0]
    return TypeProfile(dist.universe, tuple(int(o) for o in ordinals))


def profile_intersection(
    profile: TypeProfile, subset: Union[int, Iterable[TypeKey]]
) -> FrozenSet[GlobalType]:
    """The realized types of ``profile`` that belong to ``subset``."""
    mask = profile.universe.mask(subset) & profile.mask
    return frozenset(profile.universe.members(mask))
