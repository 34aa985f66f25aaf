"""Single-agent revenue maximization under a per-type service cap.

Given the type distribution f of one agent and a cap x(t) on the
probability that type t is served, a solver returns the revenue-optimal
incentive compatible and individually rational outcome rule and its
revenue Rev(x). Two preference models are built in: unit-demand over m
items and a single item with a private budget. Both are linear programs and
can be embedded into the joint program of the optimizer through
:meth:`SingleAgentSolver.add_to_program`.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import StructuralError, UnsupportedMechanismError
from .utils import LinearProgram, LinearProgramResult

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnitDemandPreference:
    """Values of each type for each of m items; the agent wants one item.

    Attributes:
        values: (T, m) array, row t holds the item values of type t.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise StructuralError("Unit-demand values must be a non-empty (types, items) table")
        if np.any(values < 0) or np.any(~np.isfinite(values)):
            raise StructuralError("Unit-demand values must be finite and nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def type_count(self) -> int:
        return self.values.shape[0]

    @property
    def item_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PrivateBudgetPreference:
    """Value v(t) for a single item and a hard budget B(t) per type."""

    values: np.ndarray
    budgets: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float).reshape(-1)
        budgets = np.array(self.budgets, dtype=float).reshape(-1)
        if values.shape != budgets.shape or values.shape[0] == 0:
            raise StructuralError("Budget preferences need one value and one budget per type")
        if np.any(values < 0) or np.any(budgets < 0):
            raise StructuralError("Values and budgets must be nonnegative")
        if np.any(~np.isfinite(values)) or np.any(~np.isfinite(budgets)):
            raise StructuralError("Values and budgets must be finite")
        values.setflags(write=False)
        budgets.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "budgets", budgets)

    @property
    def type_count(self) -> int:
        return self.values.shape[0]


Preference = Union[UnitDemandPreference, PrivateBudgetPreference]


class OutcomeRule(ABC):
    """Per-type outcome distribution of a single-agent mechanism."""

    @property
    @abstractmethod
    def service_probability(self) -> np.ndarray:
        """Probability each type is served, x*(t)."""

    @property
    @abstractmethod
    def expected_payment(self) -> np.ndarray:
        """Expected payment of each type."""

    @abstractmethod
    def draw(self, t: int, served: bool, rng: np.random.Generator) -> Tuple[Any, float]:
        """Sample (attribute, payment) conditioned on service or non-service."""

    def revenue(self, f: np.ndarray) -> float:
        return float(np.dot(f, self.expected_payment))


@dataclass(frozen=True)
class UnitDemandOutcomeRule(OutcomeRule):
    """Item probabilities w_j(t) and expected payment p(t) per type."""

    w: np.ndarray
    p: np.ndarray

    @property
    def service_probability(self) -> np.ndarray:
        return np.clip(self.w.sum(axis=1), 0.0, 1.0)

    @property
    def expected_payment(self) -> np.ndarray:
        return self.p

    def draw(self, t: int, served: bool, rng: np.random.Generator) -> Tuple[Optional[int], float]:
        """Served: item j w.p. w_j/x*, payment p/x*. Not served: no item, no payment.

        A type that is never served pays p(t) regardless. Where a conditional
        has probability zero the null outcome (no item, zero payment) is used.
        """
        weights = np.clip(self.w[t], 0.0, None)
        total = float(weights.sum())
        if served:
            if total <= 0.0:
                return None, 0.0
            item = int(rng.choice(weights.shape[0], p=weights / total))
            return item, float(self.p[t]) / total
        if total <= 0.0:
            return None, float(self.p[t])
        return None, 0.0


@dataclass(frozen=True)
class BudgetOutcomeRule(OutcomeRule):
    """Service probability a(t) and probability q(t) of paying the budget B(t)."""

    a: np.ndarray
    q: np.ndarray
    budgets: np.ndarray

    @property
    def service_probability(self) -> np.ndarray:
        return np.clip(self.a, 0.0, 1.0)

    @property
    def expected_payment(self) -> np.ndarray:
        return self.budgets * self.q

    def draw(self, t: int, served: bool, rng: np.random.Generator) -> Tuple[int, float]:
        """Payments are 0 or B(t); the attribute is 1 when the budget is paid.

        When q <= a the budget is paid only on service, w.p. q/a. Otherwise
        it is always paid on service and w.p. (q - a)/(1 - a) without it.
        """
        a = float(np.clip(self.a[t], 0.0, 1.0))
        q = float(np.clip(self.q[t], 0.0, 1.0))
        if served:
            pay_prob = 0.0 if a <= 0.0 else min(1.0, q / a)
        else:
            pay_prob = 0.0 if a >= 1.0 or q <= a else (q - a) / (1.0 - a)
        paid = bool(rng.random() < pay_prob)
        return int(paid), float(self.budgets[t]) if paid else 0.0


@dataclass
class SingleAgentSolution:
    """Optimal outcome rule of one agent under a cap.

    Attributes:
        rule: The outcome rule.
        allocation: Induced service probabilities x*(t).
        revenue: Expected revenue sum_t f(t) * payment(t).
        cap: The cap the rule was solved under.
        cap_gradient: Supergradient of Rev at the cap (per type), when the
            solver provides dual information.
    """

    rule: OutcomeRule
    allocation: np.ndarray
    revenue: float
    cap: np.ndarray
    cap_gradient: Optional[np.ndarray] = None

    @classmethod
    def from_rule(
        cls, rule: OutcomeRule, f: Sequence[float], cap: Optional[Sequence[float]] = None
    ) -> "SingleAgentSolution":
        """Wrap a hand-built rule, e.g. to run :func:`check_ic_ir` on it."""
        f = np.asarray(f, dtype=float)
        allocation = rule.service_probability
        cap = allocation if cap is None else np.asarray(cap, dtype=float)
        return cls(rule, allocation, rule.revenue(f), cap)


@dataclass(frozen=True)
class IncentiveViolation:
    """An IC or IR constraint violated by more than the tolerance.

    Attributes:
        kind: "IC" or "IR".
        type_index: Index of the type whose constraint fails.
        misreport: Index of the envied type for IC, None for IR.
        amount: Size of the violation.
    """

    kind: str
    type_index: int
    misreport: Optional[int]
    amount: float


@dataclass
class ProgramHandle:
    """Column and row indices of one agent's variables in a joint program."""

    columns: List[np.ndarray] = field(default_factory=list)
    cap_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _check_inputs(type_count: int, f: Sequence[float], cap: Optional[Sequence[float]]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    f = np.asarray(f, dtype=float)
    if f.shape != (type_count,):
        raise StructuralError(f"Expected {type_count} type probabilities, got {f.shape[0]}")
    if cap is None:
        return f, None
    cap = np.asarray(cap, dtype=float)
    if cap.shape != (type_count,):
        raise StructuralError(f"Expected {type_count} caps, got {cap.shape[0]}")
    if np.any(cap < -1e-12) or np.any(cap > 1 + 1e-12):
        raise StructuralError("Caps must lie in [0, 1]")
    return f, np.clip(cap, 0.0, 1.0)


class SingleAgentSolver(ABC):
    """Solves the single-agent program for one preference model.

    Solvers that are linear programs set ``lp_expressible`` and implement
    :meth:`add_to_program` and :meth:`read_solution` so the optimizer can
    embed them into one joint program.
    """

    lp_expressible = False
    type_count: int

    @abstractmethod
    def solve(self, f: Sequence[float], cap: Sequence[float]) -> SingleAgentSolution:
        """Optimal rule and revenue for type probabilities ``f`` and caps ``cap``."""

    def add_to_program(
        self,
        lp: LinearProgram,
        f: np.ndarray,
        cap: Optional[np.ndarray] = None,
        cap_columns: Optional[np.ndarray] = None,
    ) -> ProgramHandle:
        """Add this agent's variables, constraints and revenue to ``lp``.

        Exactly one of ``cap`` (fixed caps) and ``cap_columns`` (LP columns
        holding the caps) is given.
        """
        raise UnsupportedMechanismError(f"{type(self).__name__} is not LP-expressible")

    def read_solution(
        self, result: LinearProgramResult, handle: ProgramHandle, f: np.ndarray, cap: np.ndarray
    ) -> SingleAgentSolution:
        raise UnsupportedMechanismError(f"{type(self).__name__} is not LP-expressible")


def _cap_row(
    lp: LinearProgram,
    coefficients: dict,
    t: int,
    cap: Optional[np.ndarray],
    cap_columns: Optional[np.ndarray],
) -> int:
    if cap_columns is not None:
        coefficients = dict(coefficients)
        coefficients[int(cap_columns[t])] = -1.0
        return lp.add_le(coefficients, 0.0)
    return lp.add_le(coefficients, float(cap[t]))


class UnitDemandSolver(SingleAgentSolver):
    """Unit-demand LP: item probabilities w and payments p per type.

    Args:
        preference: Item values per type.
        no_subsidy: Restrict payments to be nonnegative.
    """

    lp_expressible = True

    def __init__(self, preference: UnitDemandPreference, no_subsidy: bool = False) -> None:
        self.preference = preference
        self.no_subsidy = no_subsidy
        self.type_count = preference.type_count

    def add_to_program(self, lp, f, cap=None, cap_columns=None) -> ProgramHandle:
        values = self.preference.values
        T, m = values.shape
        w = lp.add_variables(T * m, lower=0.0, upper=1.0).reshape(T, m)
        p = lp.add_variables(T, lower=0.0 if self.no_subsidy else None, upper=None)
        lp.add_objective({p[t]: f[t] for t in range(T)})
        cap_rows = []
        for t in range(T):
            cap_rows.append(_cap_row(lp, {w[t, j]: 1.0 for j in range(m)}, t, cap, cap_columns))
            ir = {w[t, j]: -values[t, j] for j in range(m)}
            ir[p[t]] = 1.0
            lp.add_le(ir, 0.0)
            for s in range(T):
                if s == t:
                    continue
                # u(t, ω(s)) - u(t, ω(t)) <= 0
                ic = {}
                for j in range(m):
                    ic[w[s, j]] = ic.get(w[s, j], 0.0) + values[t, j]
                    ic[w[t, j]] = ic.get(w[t, j], 0.0) - values[t, j]
                ic[p[t]] = 1.0
                ic[p[s]] = -1.0
                lp.add_le(ic, 0.0)
        return ProgramHandle([w, p], np.array(cap_rows, dtype=np.int64))

    def read_solution(self, result, handle, f, cap) -> SingleAgentSolution:
        w_idx, p_idx = handle.columns
        w = np.clip(result.x[w_idx], 0.0, 1.0)
        p = result.x[p_idx]
        rule = UnitDemandOutcomeRule(w, p)
        gradient = result.ub_duals[handle.cap_rows] if result.ub_duals.size else None
        return SingleAgentSolution(rule, rule.service_probability, rule.revenue(f), np.asarray(cap, dtype=float), gradient)

    def solve(self, f, cap) -> SingleAgentSolution:
        f, cap = _check_inputs(self.type_count, f, cap)
        lp = LinearProgram("unit-demand")
        handle = self.add_to_program(lp, f, cap=cap)
        result = lp.solve()
        solution = self.read_solution(result, handle, f, cap)
        logger.debug("Unit-demand revenue %.9g at cap %s", solution.revenue, cap)
        return solution


class PrivateBudgetSolver(SingleAgentSolver):
    """Private-budget LP in pay-the-budget-with-probability form.

    Variables are the service probability a(t) and the probability q(t) of
    paying B(t). Incentive constraints are imposed only against misreports
    with a budget no larger than the true one.
    """

    lp_expressible = True

    def __init__(self, preference: PrivateBudgetPreference) -> None:
        self.preference = preference
        self.type_count = preference.type_count

    def add_to_program(self, lp, f, cap=None, cap_columns=None) -> ProgramHandle:
        v = self.preference.values
        B = self.preference.budgets
        T = v.shape[0]
        a = lp.add_variables(T, lower=0.0, upper=1.0)
        q = lp.add_variables(T, lower=0.0, upper=1.0)
        lp.add_objective({q[t]: f[t] * B[t] for t in range(T)})
        cap_rows = []
        for t in range(T):
            cap_rows.append(_cap_row(lp, {a[t]: 1.0}, t, cap, cap_columns))
            lp.add_le({q[t]: B[t], a[t]: -v[t]}, 0.0)
            for s in range(T):
                if s == t or B[s] > B[t]:
                    continue
                ic = {a[s]: v[t], q[t]: B[t]}
                ic[a[t]] = ic.get(a[t], 0.0) - v[t]
                ic[q[s]] = ic.get(q[s], 0.0) - B[s]
                lp.add_le(ic, 0.0)
        return ProgramHandle([a, q], np.array(cap_rows, dtype=np.int64))

    def read_solution(self, result, handle, f, cap) -> SingleAgentSolution:
        a_idx, q_idx = handle.columns
        rule = BudgetOutcomeRule(
            np.clip(result.x[a_idx], 0.0, 1.0),
            np.clip(result.x[q_idx], 0.0, 1.0),
            self.preference.budgets,
        )
        gradient = result.ub_duals[handle.cap_rows] if result.ub_duals.size else None
        return SingleAgentSolution(rule, rule.service_probability, rule.revenue(f), np.asarray(cap, dtype=float), gradient)

    def solve(self, f, cap) -> SingleAgentSolution:
        f, cap = _check_inputs(self.type_count, f, cap)
        lp = LinearProgram("private-budget")
        handle = self.add_to_program(lp, f, cap=cap)
        result = lp.solve()
        solution = self.read_solution(result, handle, f, cap)
        logger.debug("Private-budget revenue %.9g at cap %s", solution.revenue, cap)
        return solution


def solver_for(preference: Union[Preference, SingleAgentSolver], no_subsidy: bool = False) -> SingleAgentSolver:
    """The built-in solver for a preference, or the solver itself."""
    if isinstance(preference, SingleAgentSolver):
        return preference
    if isinstance(preference, UnitDemandPreference):
        return UnitDemandSolver(preference, no_subsidy=no_subsidy)
    if isinstance(preference, PrivateBudgetPreference):
        return PrivateBudgetSolver(preference)
    raise UnsupportedMechanismError(f"No solver for preference {type(preference).__name__}")


def solve_unit_demand(
    pref: UnitDemandPreference, f: Sequence[float], cap: Sequence[float], no_subsidy: bool = False
) -> SingleAgentSolution:
    """Revenue-optimal unit-demand rule under ``cap``.

    Examples:
        >>> pref = UnitDemandPreference([[1.0], [2.0]])
        >>> round(solve_unit_demand(pref, [0.5, 0.5], [1.0, 1.0]).revenue, 6)
        1.0
    """
    return UnitDemandSolver(pref, no_subsidy=no_subsidy).solve(f, cap)


def solve_private_budget(
    pref: PrivateBudgetPreference, f: Sequence[float], cap: Sequence[float]
) -> SingleAgentSolution:
    """Revenue-optimal private-budget rule under ``cap``."""
    return PrivateBudgetSolver(pref).solve(f, cap)


def check_ic_ir(
    solution: Union[SingleAgentSolution, OutcomeRule],
    pref: Preference,
    f: Optional[Sequence[float]] = None,
    tolerance: float = 1e-7,
) -> List[IncentiveViolation]:
    """List every IC and IR constraint violated by more than ``tolerance``.

    For budget preferences only misreports to types with budget at most the
    true budget are incentive constraints.

    Returns:
        List[IncentiveViolation]: Empty for a valid rule.
    """
    rule = solution.rule if isinstance(solution, SingleAgentSolution) else solution
    violations: List[IncentiveViolation] = []
    if isinstance(pref, UnitDemandPreference):
        if not isinstance(rule, UnitDemandOutcomeRule):
            raise StructuralError("A unit-demand preference needs a unit-demand rule")
        utility = pref.values @ rule.w.T - rule.p[None, :]  # utility[t, s] = u(t, ω(s))
        allowed = np.ones(utility.shape, dtype=bool)
    elif isinstance(pref, PrivateBudgetPreference):
        if not isinstance(rule, BudgetOutcomeRule):
            raise StructuralError("A budget preference needs a budget rule")
        utility = pref.values[:, None] * rule.a[None, :] - (rule.budgets * rule.q)[None, :]
        allowed = pref.budgets[None, :] <= pref.budgets[:, None]
    else:
        raise UnsupportedMechanismError(f"No IC/IR check for {type(pref).__name__}")
    T = utility.shape[0]
    for t in range(T):
        truthful = utility[t, t]
        if truthful < -tolerance:
            violations.append(IncentiveViolation("IR", t, None, float(-truthful)))
        for s in range(T):
            if s != t and allowed[t, s] and utility[t, s] - truthful > tolerance:
                violations.append(IncentiveViolation("IC", t, s, float(utility[t, s] - truthful)))
    return violations


def revenue_curve(
    pref: Union[Preference, SingleAgentSolver],
    f: Sequence[float],
    caps: Sequence[Sequence[float]],
) -> List[float]:
    """Rev(x) for every cap x in ``caps``."""
    solver = solver_for(pref)
    return [solver.solve(f, cap).revenue for cap in caps]
