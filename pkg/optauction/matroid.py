"""Supply constraints as matroid rank oracles.

Matroids are exposed through their rank function only; the greedy
allocator and the expected-rank oracles never enumerate independent sets.
Ground elements are type ordinals.
"""

import itertools
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InstanceTooLargeError, StructuralError
from .utils import mask_of, members_of, popcount

EXPLICIT_GROUND_LIMIT = 16
AXIOM_CHECK_LIMIT = 12


class MatroidOracle(ABC):
    """Rank oracle of a matroid over the ground set {0, ..., ground_size - 1}."""

    ground_size: int

    @abstractmethod
    def rank_mask(self, mask: int) -> int:
        """Rank of the set encoded by ``mask``."""

    def rank(self, members: Iterable[int]) -> int:
        return self.rank_mask(mask_of(members))

    def rank_batch(self, masks: np.ndarray) -> np.ndarray:
        """Ranks of an array of masks."""
        return np.array([self.rank_mask(int(m)) for m in np.asarray(masks).ravel()], dtype=np.int64).reshape(np.shape(masks))

    def is_independent(self, members: Iterable[int]) -> bool:
        mask = mask_of(members)
        return self.rank_mask(mask) == len(members_of(mask))

    def can_add(self, served_mask: int, served_count: int, ordinal: int) -> bool:
        """Greedy test: serving ``ordinal`` keeps the served set independent."""
        return self.rank_mask(served_mask | (1 << int(ordinal))) == served_count + 1


class UniformMatroid(MatroidOracle):
    """Rank min(|S|, k): at most k types served.

    Args:
        k: Number of units.
        ground_size: Size of the ground set; None accepts any set.
    """

    def __init__(self, k: int, ground_size: Optional[int] = None) -> None:
        if int(k) < 0:
            raise StructuralError(f"Supply k must be nonnegative, got {k}")
        self.k = int(k)
        self.ground_size = ground_size if ground_size is not None else 64

    def rank_mask(self, mask: int) -> int:
        return min(bin(int(mask)).count("1"), self.k)

    def rank_batch(self, masks: np.ndarray) -> np.ndarray:
        return np.minimum(popcount(masks, self.ground_size), self.k)

    def can_add(self, served_mask: int, served_count: int, ordinal: int) -> bool:
        return served_count < self.k

    def __repr__(self) -> str:
        return f"UniformMatroid(k={self.k})"


class PartitionMatroid(MatroidOracle):
    """Rank sum_b min(|S ∩ b|, c_b) over blocks b partitioning the ground set.

    Args:
        blocks: Pairs (ordinals of the block, cap of the block).
        ground_size: Size of the ground set the blocks must partition.

    Raises:
        StructuralError: If the blocks overlap, miss an element, reference an
            element outside the ground set, or have a negative cap.
    """

    def __init__(
        self, blocks: Sequence[Tuple[Iterable[int], int]], ground_size: int
    ) -> None:
        seen = 0
        normalized = []
        for members, cap in blocks:
            members = tuple(sorted(int(o) for o in members))
            if int(cap) < 0:
                raise StructuralError(f"Block cap must be nonnegative, got {cap}")
            for o in members:
                if not 0 <= o < ground_size:
                    raise StructuralError(f"Block element {o} is outside the ground set")
                if seen >> o & 1:
                    raise StructuralError(f"Element {o} appears in more than one block")
                seen |= 1 << o
            normalized.append((mask_of(members), members, int(cap)))
        if seen != (1 << ground_size) - 1:
            missing = [o for o in range(ground_size) if not seen >> o & 1]
            raise StructuralError(f"Blocks do not cover elements {missing}")
        self.blocks = [(members, cap) for _, members, cap in normalized]
        self._block_masks = [(mask, cap) for mask, _, cap in normalized]
        self.ground_size = ground_size

    def rank_mask(self, mask: int) -> int:
        return sum(min(bin(mask & b).count("1"), cap) for b, cap in self._block_masks)

    def rank_batch(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64)
        total = np.zeros(masks.shape, dtype=np.int64)
        for b, cap in self._block_masks:
            total += np.minimum(popcount(masks & b, self.ground_size), cap)
        return total

    def __repr__(self) -> str:
        return f"PartitionMatroid({self.blocks!r})"


class ExplicitMatroid(MatroidOracle):
    """Matroid given by its full list of independent sets.

    Rank is the size of the largest listed set inside the query. The family
    is not validated here; see :func:`validate_matroid`.

    Args:
        independent_sets: Every independent set, as iterables of ordinals.
        ground_size: Size of the ground set, at most 16.
    """

    def __init__(self, independent_sets: Iterable[Iterable[int]], ground_size: int) -> None:
        if ground_size > EXPLICIT_GROUND_LIMIT:
            raise InstanceTooLargeError(
                f"Explicit matroids support at most {EXPLICIT_GROUND_LIMIT} elements"
            )
        family = set()
        for members in independent_sets:
            mask = mask_of(members)
            if mask >> ground_size:
                raise StructuralError("Independent set element outside the ground set")
            family.add(mask)
        self.ground_size = ground_size
        self.family = frozenset(family)
        self._table: Optional[np.ndarray] = None

    def _rank_table(self) -> np.ndarray:
        if self._table is None:
            size = 1 << self.ground_size
            table = np.zeros(size, dtype=np.int64)
            for mask in range(1, size):
                if mask in self.family:
                    table[mask] = bin(mask).count("1")
                else:
                    table[mask] = max(
                        table[mask & ~(1 << o)] for o in members_of(mask)
                    )
            self._table = table
        return self._table

    def rank_mask(self, mask: int) -> int:
        return int(self._rank_table()[int(mask)])

    def rank_batch(self, masks: np.ndarray) -> np.ndarray:
        return self._rank_table()[np.asarray(masks, dtype=np.int64)]


@dataclass(frozen=True)
class MatroidViolation:
    """One failed matroid or rank-function axiom.

    Attributes:
        kind: Axiom name, e.g. "empty", "downward-closure", "exchange",
            "bounded", "monotone", "submodular".
        sets: The sets witnessing the failure, as sorted ordinal tuples.
        message: Human-readable description.
    """

    kind: str
    sets: Tuple[Tuple[int, ...], ...]
    message: str


def uniform_rank(k: int, subset: Iterable[int]) -> int:
    """min(|S|, k)."""
    return min(len(set(subset)), int(k))


def partition_rank(
    blocks: Sequence[Tuple[Iterable[int], int]],
    subset: Iterable[int],
    ground_size: Optional[int] = None,
) -> int:
    """sum over blocks of min(|S ∩ b|, c_b).

    Raises:
        StructuralError: If the blocks do not partition the ground set.
    """
    blocks = [(tuple(members), cap) for members, cap in blocks]
    if ground_size is None:
        ground_size = sum(len(members) for members, _ in blocks)
    return PartitionMatroid(blocks, ground_size).rank(subset)


def as_matroid(constraint: Union[int, MatroidOracle], ground_size: Optional[int] = None) -> MatroidOracle:
    """A rank oracle for a supply given as an integer k or a matroid."""
    if isinstance(constraint, MatroidOracle):
        return constraint
    return UniformMatroid(int(constraint), ground_size)


def validate_matroid(matroid: ExplicitMatroid) -> List[MatroidViolation]:
    """Check the independence axioms of an explicit family.

    Args:
        matroid: The family to check (ground set of at most 16 elements).

    Returns:
        List[MatroidViolation]: Empty iff the family is a matroid.
    """
    violations: List[MatroidViolation] = []
    family = matroid.family
    if 0 not in family:
        violations.append(MatroidViolation("empty", ((),), "The empty set is not independent"))
    for mask in sorted(family):
        for o in members_of(mask):
            sub = mask & ~(1 << o)
            if sub not in family:
                violations.append(
                    MatroidViolation(
                        "downward-closure",
                        (members_of(mask), members_of(sub)),
                        f"{set(members_of(mask))} is independent but its subset "
                        f"{set(members_of(sub))} is not",
                    )
                )
    ordered = sorted(family, key=lambda m: (bin(m).count("1"), m))
    for small in ordered:
        for large in ordered:
            if bin(large).count("1") <= bin(small).count("1"):
                continue
            if not any(small | (1 << o) in family for o in members_of(large & ~small)):
                violations.append(
                    MatroidViolation(
                        "exchange",
                        (members_of(small), members_of(large)),
                        f"No element of {set(members_of(large))} extends "
                        f"{set(members_of(small))}",
                    )
                )
    return violations


def check_rank_axioms(
    oracle: MatroidOracle, ground_size: Optional[int] = None
) -> List[MatroidViolation]:
    """Exhaustively check the rank-function axioms on a small ground set.

    Checks rank(∅) = 0, 0 <= rank(S) <= |S|, integrality, monotonicity and
    submodularity in the diminishing-returns form.

    Raises:
        InstanceTooLargeError: If the ground set has more than 12 elements.
    """
    size = oracle.ground_size if ground_size is None else ground_size
    if size > AXIOM_CHECK_LIMIT:
        raise InstanceTooLargeError(
            f"Rank axioms are checked on at most {AXIOM_CHECK_LIMIT} elements"
        )
    masks = np.arange(1 << size, dtype=np.int64)
    ranks = np.asarray(oracle.rank_batch(masks))
    violations: List[MatroidViolation] = []
    if ranks[0] != 0:
        violations.append(MatroidViolation("empty", ((),), "rank of the empty set is not 0"))
    sizes = popcount(masks, size)
    for mask in masks[(ranks < 0) | (ranks > sizes) | (ranks != np.round(ranks))]:
        violations.append(
            MatroidViolation("bounded", (members_of(int(mask)),), "rank outside [0, |S|] or not integral")
        )
    for o in range(size):
        without = masks[(masks >> o & 1) == 0]
        gain = ranks[without | (1 << o)] - ranks[without]
        for mask in without[(gain < 0) | (gain > 1)]:
            violations.append(
                MatroidViolation(
                    "monotone",
                    (members_of(int(mask)), (o,)),
                    f"adding {o} changes the rank by {int(gain[np.searchsorted(without, mask)])}",
                )
            )
    for a, b in itertools.combinations(range(size), 2):
        base = masks[((masks >> a & 1) == 0) & ((masks >> b & 1) == 0)]
        lhs = ranks[base | (1 << a)] + ranks[base | (1 << b)]
        rhs = ranks[base] + ranks[base | (1 << a) | (1 << b)]
        for mask in base[lhs < rhs]:
            violations.append(
                MatroidViolation(
                    "submodular",
                    (members_of(int(mask)), (a, b)),
                    f"elements {a} and {b} are complementary over {set(members_of(int(mask)))}",
                )
            )
    return violations
