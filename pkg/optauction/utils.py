"""Utility functions for the optauction library.

This module contains the helpers shared by the solver modules: reading
environment overrides, converting user-supplied probabilities to exact
fractions, bitmask bookkeeping over the type universe, and a small builder
around the HiGHS linear programming engine shipped with SciPy.

Functions:
    get_env_var: Retrieve an environment variable or return an explicit value.
    parse_fraction: Convert numbers and "p/q" strings to Fraction.
    check_guard: Raise when a size guard would be exceeded.
    popcount: Vectorized number of set bits.
    subset_masks: Enumerate all masks between a required and an allowed set.
    subset_sums: Sum a weight vector over the masks of subset_masks.

Example:
    Building and solving a tiny program:

    >>> from optauction.utils import LinearProgram
    >>> lp = LinearProgram("demo")
    >>> x = lp.add_variables(2, upper=1.0)
    >>> lp.add_objective({x[0]: 1.0, x[1]: 2.0})
    >>> lp.add_le({x[0]: 1.0, x[1]: 1.0}, 1.0)
    >>> lp.solve().value
    2.0
"""

import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import InstanceTooLargeError, SolverError

logger = logging.getLogger(__name__)

Number = Union[int, float, str, Fraction]


def get_env_var(name: Optional[str] = None, key: Optional[str] = None) -> Optional[str]:
    """
    Retrieves an environment variable. If a key is provided, it is returned
    directly. If a name is provided, the value is read from the environment.

    Args:
        name (Optional[str], optional): The name of the variable to retrieve. Defaults to None.
        key (Optional[str], optional): The value to return directly. Defaults to None.

    Returns:
        Optional[str]: The retrieved value, or None if nothing was found.
    """
    if key is not None:
        return key
    if name is not None:
        return os.environ.get(name)
    return None


def parse_fraction(value: Number) -> Fraction:
    """Convert a probability-like value to an exact Fraction.

    Strings may be decimals ("0.25") or ratios ("1/4"). Floats go through
    their shortest decimal representation so that 0.1 becomes 1/10.

    Args:
        value: The value to convert.

    Returns:
        Fraction: The exact value.

    Raises:
        ValueError: If the value cannot be read as a number.
    """
    if isinstance(value, bool):
        raise ValueError(f"Cannot interpret {value!r} as a probability")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, Rational):
        return Fraction(int(value.numerator), int(value.denominator))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            raise ValueError(f"Cannot interpret {value!r} as a probability")
        return Fraction(repr(float(value)))
    if isinstance(value, (np.integer,)):
        return Fraction(int(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"Cannot interpret {value!r} as a number") from exc
    raise ValueError(f"Cannot interpret {value!r} as a number")


def to_fraction(value: Union[float, Fraction, int]) -> Fraction:
    """Exact Fraction of a float as stored in binary (no decimal rounding)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    return Fraction(float(value))


def check_guard(count: int, guard: int, what: str) -> None:
    """Raise InstanceTooLargeError when ``count`` exceeds ``guard``.

    Args:
        count: The size that is about to be enumerated.
        guard: The largest size allowed.
        what: A short description used in the error message.
    """
    if count > guard:
        raise InstanceTooLargeError(
            f"{what} has size {count}, above the guard of {guard}; "
            "raise the guard in optauction.settings to proceed"
        )


def mask_of(members: Iterable[int]) -> int:
    """Bitmask with one bit per ordinal in ``members``."""
    mask = 0
    for ordinal in members:
        mask |= 1 << int(ordinal)
    return mask


def members_of(mask: int) -> Tuple[int, ...]:
    """Sorted ordinals of the set bits of ``mask``."""
    out = []
    bit = 0
    while mask:
        if mask & 1:
            out.append(bit)
        mask >>= 1
        bit += 1
    return tuple(out)


def popcount(masks: np.ndarray, width: int) -> np.ndarray:
    """Number of set bits of every entry of ``masks`` (bits below ``width``)."""
    masks = np.asarray(masks, dtype=np.int64)
    counts = np.zeros(masks.shape, dtype=np.int64)
    for bit in range(width):
        counts += (masks >> bit) & 1
    return counts


def subset_masks(required: int, free: Sequence[int]) -> np.ndarray:
    """All masks ``required | T`` for T ranging over subsets of ``free``.

    The array is built by doubling, so entry ``j`` adds the free elements
    selected by the bits of ``j``.
    """
    masks = np.array([required], dtype=np.int64)
    for ordinal in free:
        masks = np.concatenate([masks, masks | (1 << int(ordinal))])
    return masks


def subset_sums(weights: np.ndarray, required: int, free: Sequence[int]) -> np.ndarray:
    """Sums of ``weights`` over the masks returned by :func:`subset_masks`."""
    weights = np.asarray(weights, dtype=float)
    base = float(sum(weights[o] for o in members_of(required)))
    sums = np.array([base])
    for ordinal in free:
        sums = np.concatenate([sums, sums + weights[int(ordinal)]])
    return sums


@dataclass
class LinearProgramResult:
    """Optimal solution of a :class:`LinearProgram`.

    Attributes:
        x: Values of all variables.
        value: Objective value (the program maximizes).
        ub_duals: Rate of change of the objective per unit increase of each
            inequality right-hand side (nonnegative).
        eq_duals: Rate of change of the objective per unit increase of each
            equality right-hand side.
    """

    x: np.ndarray
    value: float
    ub_duals: np.ndarray
    eq_duals: np.ndarray


@dataclass
class LinearProgram:
    """Incremental builder for a maximization LP solved by HiGHS.

    Variables are added in blocks and addressed by integer column indices;
    constraints are sparse dictionaries mapping columns to coefficients.
    """

    name: str = "lp"
    lower: List[Optional[float]] = field(default_factory=list)
    upper: List[Optional[float]] = field(default_factory=list)
    cost: Dict[int, float] = field(default_factory=dict)
    _ub: List[Tuple[Dict[int, float], float]] = field(default_factory=list)
    _eq: List[Tuple[Dict[int, float], float]] = field(default_factory=list)

    @property
    def num_variables(self) -> int:
        return len(self.lower)

    @property
    def num_constraints(self) -> int:
        return len(self._ub) + len(self._eq)

    def add_variables(
        self,
        count: int,
        lower: Optional[float] = 0.0,
        upper: Optional[float] = None,
    ) -> np.ndarray:
        """Add ``count`` variables sharing the same bounds.

        Args:
            count: Number of variables to add.
            lower: Lower bound, or None for unbounded below.
            upper: Upper bound, or None for unbounded above.

        Returns:
            np.ndarray: Column indices of the new variables.
        """
        start = self.num_variables
        self.lower.extend([lower] * count)
        self.upper.extend([upper] * count)
        return np.arange(start, start + count, dtype=np.int64)

    def set_bounds(
        self, column: int, lower: Optional[float], upper: Optional[float]
    ) -> None:
        self.lower[int(column)] = lower
        self.upper[int(column)] = upper

    def add_objective(self, coefficients: Dict[int, float]) -> None:
        """Add terms to the maximization objective."""
        for column, coef in coefficients.items():
            column = int(column)
            self.cost[column] = self.cost.get(column, 0.0) + float(coef)

    def add_le(self, coefficients: Dict[int, float], rhs: float) -> int:
        """Add ``sum(coef * x) <= rhs`` and return its inequality row index."""
        self._ub.append((dict(coefficients), float(rhs)))
        return len(self._ub) - 1

    def add_eq(self, coefficients: Dict[int, float], rhs: float) -> int:
        """Add ``sum(coef * x) == rhs`` and return its equality row index."""
        self._eq.append((dict(coefficients), float(rhs)))
        return len(self._eq) - 1

    def _matrix(
        self, rows: List[Tuple[Dict[int, float], float]]
    ) -> Tuple[Optional[sparse.csr_matrix], Optional[np.ndarray]]:
        if not rows:
            return None, None
        data, row_idx, col_idx = [], [], []
        for r, (coefficients, _) in enumerate(rows):
            for column, coef in coefficients.items():
                if coef != 0.0:
                    row_idx.append(r)
                    col_idx.append(int(column))
                    data.append(float(coef))
        matrix = sparse.coo_matrix(
            (data, (row_idx, col_idx)), shape=(len(rows), self.num_variables)
        ).tocsr()
        rhs = np.array([b for _, b in rows], dtype=float)
        return matrix, rhs

    def solve(
        self,
        feasibility_tolerance: Optional[float] = None,
        optimality_tolerance: Optional[float] = None,
    ) -> LinearProgramResult:
        """Solve the program with the HiGHS dual simplex / IPM engine.

        Args:
            feasibility_tolerance: Absolute primal feasibility tolerance.
            optimality_tolerance: Absolute dual feasibility tolerance.

        Returns:
            LinearProgramResult: The optimal solution.

        Raises:
            SolverError: If HiGHS does not report an optimal solution.
        """
        from .settings import settings

        if feasibility_tolerance is None:
            feasibility_tolerance = settings.lp_feasibility_tolerance
        if optimality_tolerance is None:
            optimality_tolerance = settings.lp_optimality_tolerance

        c = np.zeros(self.num_variables)
        for column, coef in self.cost.items():
            c[column] = -coef
        a_ub, b_ub = self._matrix(self._ub)
        a_eq, b_eq = self._matrix(self._eq)
        bounds = list(zip(self.lower, self.upper))

        logger.debug(
            "Solving %s: %d variables, %d inequalities, %d equalities",
            self.name,
            self.num_variables,
            len(self._ub),
            len(self._eq),
        )
        res = linprog(
            c,
            A_ub=a_ub,
            b_ub=b_ub,
            A_eq=a_eq,
            b_eq=b_eq,
            bounds=bounds,
            method="highs",
            options={
                "primal_feasibility_tolerance": feasibility_tolerance,
                "dual_feasibility_tolerance": optimality_tolerance,
            },
        )
        if res.status != 0:
            raise SolverError(f"{self.name}: {res.message} (status {res.status})")

        ub_duals = np.zeros(len(self._ub))
        eq_duals = np.zeros(len(self._eq))
        if self._ub and getattr(res, "ineqlin", None) is not None:
            ub_duals = -np.asarray(res.ineqlin.marginals, dtype=float)
        if self._eq and getattr(res, "eqlin", None) is not None:
            eq_duals = -np.asarray(res.eqlin.marginals, dtype=float)
        return LinearProgramResult(
            x=np.asarray(res.x, dtype=float),
            value=float(-res.fun),
            ub_duals=ub_duals,
            eq_duals=eq_duals,
        )
