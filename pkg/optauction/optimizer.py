"""Revenue-optimal auctions from single-agent solvers.

The optimizer picks a feasible normalized interim rule x̄ together with one
single-agent outcome rule per agent capped by x̄/f, maximizing total
revenue. Single-unit supply is one joint linear program over the SSA
polytope. k-unit and matroid supply add Border cuts x̄(S) <= g(S) lazily
until separation finds no violated set. The result is assembled into an
:class:`OptimalAuction` that runs the ex post allocator and then each
agent's outcome rule.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import SolverError, StructuralError, UnsupportedMechanismError
from .feasibility import Constraint, ExpectedRankOracle, expected_rank_oracle, separate
from .matroid import MatroidOracle, UniformMatroid, as_matroid
from .model import (
    AllocationVector,
    InterimAllocationRule,
    Mechanism,
    NormalizedInterimRule,
    ProductDistribution,
    TypeProfile,
    TypeUniverse,
    denormalize,
)
from .polymatroid import rra_mechanism, vertex_from_order
from .settings import resolve
from .single_agent import (
    Preference,
    SingleAgentSolution,
    SingleAgentSolver,
    solver_for,
)
from .ssa import SsaMechanism, add_ssa_polytope, extract_table, max_coverage_lp, read_point
from .utils import LinearProgram

logger = logging.getLogger(__name__)

SUPPLY_KINDS = ("single-unit", "k-unit", "matroid")


@dataclass(frozen=True)
class SupplyConstraint:
    """Inter-agent supply: one unit, k units or a matroid over the types.

    Attributes:
        kind: "single-unit", "k-unit" or "matroid".
        k: Number of units for the first two kinds.
        matroid: Rank oracle for the matroid kind.
    """

    kind: str = "single-unit"
    k: int = 1
    matroid: Optional[MatroidOracle] = None

    def __post_init__(self) -> None:
        if self.kind not in SUPPLY_KINDS:
            raise StructuralError(f"Unknown supply kind {self.kind!r}")
        if self.kind == "single-unit" and self.k != 1:
            raise StructuralError("Single-unit supply has k = 1")
        if self.kind == "k-unit" and self.k < 0:
            raise StructuralError(f"Supply k must be nonnegative, got {self.k}")
        if self.kind == "matroid" and self.matroid is None:
            raise StructuralError("Matroid supply needs a rank oracle")

    @classmethod
    def single_unit(cls) -> "SupplyConstraint":
        return cls("single-unit", 1)

    @classmethod
    def k_unit(cls, k: int) -> "SupplyConstraint":
        return cls("k-unit", int(k))

    @classmethod
    def from_matroid(cls, matroid: MatroidOracle) -> "SupplyConstraint":
        return cls("matroid", 0, matroid)

    @property
    def constraint(self) -> Constraint:
        """The supply as the integer k or the matroid oracle."""
        return self.matroid if self.kind == "matroid" else self.k

    def as_matroid(self, ground_size: Optional[int] = None) -> MatroidOracle:
        return as_matroid(self.constraint, ground_size)

    def expected_rank(self, dist: ProductDistribution) -> ExpectedRankOracle:
        """The exact expected-rank oracle g of this supply under ``dist``."""
        return expected_rank_oracle(self.constraint, dist)

    def describe(self) -> Dict[str, Any]:
        if self.kind == "matroid":
            return {"kind": self.kind, "matroid": repr(self.matroid)}
        return {"kind": self.kind, "k": self.k}


class AuctionInstance:
    """Agents, their type distributions and preferences, and the supply.

    Args:
        dist: Product type distribution; its universe fixes the agents.
        preferences: One preference (or custom solver) per agent.
        constraint: Supply constraint; an integer k means k units.
        no_subsidy: Forbid negative payments in unit-demand solvers.

    Raises:
        StructuralError: If the number of preferences or the type counts do
            not match the universe, or a matroid ground set is too small.
    """

    def __init__(
        self,
        dist: ProductDistribution,
        preferences: Sequence[Union[Preference, SingleAgentSolver]],
        constraint: Union[SupplyConstraint, int, MatroidOracle] = 1,
        no_subsidy: bool = False,
    ) -> None:
        universe = dist.universe
        if len(preferences) != universe.n_agents:
            raise StructuralError(
                f"Expected {universe.n_agents} preferences, got {len(preferences)}"
            )
        if isinstance(constraint, MatroidOracle):
            constraint = (
                SupplyConstraint.k_unit(constraint.k)
                if isinstance(constraint, UniformMatroid)
                else SupplyConstraint.from_matroid(constraint)
            )
        elif not isinstance(constraint, SupplyConstraint):
            k = int(constraint)
            constraint = SupplyConstraint.single_unit() if k == 1 else SupplyConstraint.k_unit(k)
        if constraint.kind == "matroid" and constraint.matroid.ground_size < universe.size:
            raise StructuralError("Matroid ground set is smaller than the type universe")
        self.dist = dist
        self.universe = universe
        self.preferences = list(preferences)
        self.constraint = constraint
        self.no_subsidy = no_subsidy
        self.solvers = [solver_for(p, no_subsidy=no_subsidy) for p in self.preferences]
        for i, solver in enumerate(self.solvers, start=1):
            expected = len(universe.agent_types(i))
            if solver.type_count != expected:
                raise StructuralError(
                    f"Agent {i} has {expected} types but its preference has {solver.type_count}"
                )

    @property
    def n_agents(self) -> int:
        return self.universe.n_agents

    @property
    def lp_expressible(self) -> bool:
        return all(s.lp_expressible for s in self.solvers)

    def agent_mass(self, agent_index: int) -> np.ndarray:
        return self.dist.agent_mass(agent_index)

    def __repr__(self) -> str:
        return (
            f"AuctionInstance(n={self.n_agents}, types={self.universe.size}, "
            f"supply={self.constraint.describe()})"
        )


@dataclass(frozen=True)
class AgentOutcome:
    """What one agent gets in one run of an :class:`OptimalAuction`.

    Attributes:
        agent_index: 1-based agent index.
        type_label: Global label of the reported type.
        served: Whether the agent is served.
        attribute: Item index (unit demand) or 1 when the budget is paid.
        payment: Payment of this run.
    """

    agent_index: int
    type_label: str
    served: bool
    attribute: Any
    payment: float


@dataclass
class OptimalAuction:
    """The revenue-optimal mechanism assembled from its parts.

    Attributes:
        instance: The instance that was optimized.
        target: The optimal normalized rule x̄*.
        solutions: Per-agent single-agent solutions, capped by x̄*/f.
        allocator: Ex post mechanism implementing x̄*.
        revenue: Sum of the per-agent revenues.
        objective: Objective value of the final program.
        method: Name of the optimization path.
        rounds: Constraint-generation rounds or Frank-Wolfe iterations.
    """

    instance: AuctionInstance
    target: NormalizedInterimRule
    solutions: List[SingleAgentSolution]
    allocator: Mechanism
    revenue: float
    objective: float
    method: str
    rounds: int = 0

    @property
    def universe(self) -> TypeUniverse:
        return self.instance.universe

    def interim_rule(self) -> InterimAllocationRule:
        """The realized interim rule x*, the service probabilities of the outcome rules."""
        values = np.concatenate([s.allocation for s in self.solutions])
        return InterimAllocationRule(self.universe, np.clip(values, 0.0, 1.0))

    def coin_probabilities(self) -> np.ndarray:
        """min(1, x*(t) / x(t)) with x = x̄*/f; 0 where x(t) = 0."""
        cap = denormalize(self.target, self.instance.dist, resolve("coverage_tolerance")).values
        realized = self.interim_rule().values
        with np.errstate(divide="ignore", invalid="ignore"):
            coin = np.where(cap > 0, realized / np.where(cap > 0, cap, 1.0), 0.0)
        return np.clip(coin, 0.0, 1.0)

    def service_probabilities(self, profile: TypeProfile, exact: bool = False) -> List[float]:
        """Per-agent service probability on ``profile``: allocator times coin."""
        coin = self.coin_probabilities()
        probs = self.allocator.service_probabilities(profile, exact=False)
        return [float(p) * coin[o] for p, o in zip(probs, profile.ordinals)]

    def run(self, profile: TypeProfile, rng: np.random.Generator) -> List[AgentOutcome]:
        return assemble_and_run(self, profile, rng)

    def simulate_revenue(
        self, rng: np.random.Generator, samples: int = 10**4
    ) -> Tuple[float, float]:
        """Monte Carlo revenue of the assembled auction.

        Returns:
            Tuple[float, float]: Mean revenue per run and its standard error.
        """
        if samples < 2:
            raise ValueError("Need at least two samples")
        dist = self.instance.dist
        profiles = dist.sample_profiles(rng, samples)
        served = self.allocator.run_batch(profiles, rng)
        coin = self.coin_probabilities()
        served &= rng.random(profiles.shape) < coin[profiles]
        totals = np.zeros(samples)
        for i, solution in enumerate(self.solutions, start=1):
            offset = self.universe.agent_types(i).start
            column = i - 1
            for row in range(samples):
                _, payment = solution.rule.draw(
                    int(profiles[row, column]) - offset, bool(served[row, column]), rng
                )
                totals[row] += payment
        mean = float(totals.mean())
        se = float(totals.std(ddof=1) / np.sqrt(samples))
        logger.info("Simulated revenue %.6g ± %.2g over %d runs", mean, se, samples)
        return mean, se

    def describe(self) -> Dict[str, Any]:
        descriptor = getattr(self.allocator, "describe", None)
        return {
            "method": self.method,
            "revenue": self.revenue,
            "objective": self.objective,
            "rounds": self.rounds,
            "supply": self.instance.constraint.describe(),
            "target": self.target.as_dict(),
            "interim": self.interim_rule().as_dict(),
            "allocator": descriptor() if descriptor else {"kind": type(self.allocator).__name__},
        }


def _add_agent_programs(
    lp: LinearProgram, instance: AuctionInstance, caps: np.ndarray
) -> list:
    handles = []
    for i, solver in enumerate(instance.solvers, start=1):
        types = np.array(instance.universe.agent_types(i), dtype=np.int64)
        handles.append(solver.add_to_program(lp, instance.agent_mass(i), cap_columns=caps[types]))
    return handles


def _read_agent_solutions(
    result, instance: AuctionInstance, handles: list, caps: np.ndarray
) -> List[SingleAgentSolution]:
    cap_values = np.clip(result.x[caps], 0.0, 1.0)
    solutions = []
    for i, (solver, handle) in enumerate(zip(instance.solvers, handles), start=1):
        types = np.array(instance.universe.agent_types(i), dtype=np.int64)
        solutions.append(
            solver.read_solution(result, handle, instance.agent_mass(i), cap_values[types])
        )
    return solutions


def _check_lp_expressible(instance: AuctionInstance, what: str) -> None:
    if not instance.lp_expressible:
        raise UnsupportedMechanismError(
            f"{what} needs LP-expressible single-agent solvers; use optimize_frank_wolfe"
        )


def optimize_single_unit(instance: AuctionInstance) -> OptimalAuction:
    """Solve the joint program over the SSA polytope for one unit.

    Every agent's LP shares the cap columns x(t), tied to the polytope by
    y(t, n) = f(t) x(t). The optimal (y, z) yields the transition table of
    the allocator.

    Args:
        instance: An instance with single-unit supply.

    Returns:
        OptimalAuction: The optimum with an SSA allocator.

    Raises:
        StructuralError: If the supply is not a single unit.
        UnsupportedMechanismError: If some solver is not LP-expressible.
        SolverError: If the LP fails.
    """
    if instance.constraint.kind != "single-unit":
        raise StructuralError("optimize_single_unit needs single-unit supply")
    _check_lp_expressible(instance, "optimize_single_unit")
    dist = instance.dist
    universe = instance.universe
    n = universe.n_agents
    lp = LinearProgram("single-unit")
    columns = add_ssa_polytope(lp, dist)
    caps = lp.add_variables(universe.size, lower=0.0, upper=1.0)
    handles = _add_agent_programs(lp, instance, caps)
    for o in range(universe.size):
        lp.add_eq({columns.y[o + 1, n]: 1.0, caps[o]: -dist.mass[o]}, 0.0)
    result = lp.solve()

    point = read_point(result, columns, dist)
    table = extract_table(point)
    target = NormalizedInterimRule(
        universe, np.minimum(np.clip(point.y[1:, n], 0.0, 1.0), dist.mass), tolerance=1.0
    )
    solutions = _read_agent_solutions(result, instance, handles, caps)
    revenue = float(sum(s.revenue for s in solutions))
    logger.info("Single-unit optimum %.9g (%d LP columns)", result.value, lp.num_variables)
    return OptimalAuction(
        instance, target, solutions, SsaMechanism(table), revenue, float(result.value), "single-unit"
    )


def optimize_polymatroid(
    instance: AuctionInstance, max_rounds: Optional[int] = None
) -> OptimalAuction:
    """Constraint generation over the polymatroid P(g).

    Starts from the singleton cuts f(t) x(t) <= g({t}); after each solve the
    most violated Border set is added as a cut until none is violated.

    Args:
        instance: An instance with any supply.
        max_rounds: Cap on the number of cuts added; unlimited by default.

    Returns:
        OptimalAuction: The optimum with a rounding allocator.

    Raises:
        UnsupportedMechanismError: If some solver is not LP-expressible.
        InstanceTooLargeError: If separation exceeds its guard.
        SolverError: If an LP fails, ``max_rounds`` is exhausted, or a cut
            already in the program is violated beyond the coverage tolerance.
    """
    _check_lp_expressible(instance, "optimize_polymatroid")
    tolerance = resolve("tolerance")
    dist = instance.dist
    universe = instance.universe
    g = instance.constraint.expected_rank(dist)
    lp = LinearProgram("polymatroid")
    caps = lp.add_variables(universe.size, lower=0.0, upper=1.0)
    handles = _add_agent_programs(lp, instance, caps)
    added = set()
    for o in range(universe.size):
        lp.add_le({caps[o]: dist.mass[o]}, g.value_mask(1 << o))
        added.add(1 << o)

    rounds = 0
    while True:
        result = lp.solve()
        xbar = np.clip(result.x[caps], 0.0, 1.0) * dist.mass
        certificate = separate(xbar, g)
        if not certificate.violated(tolerance):
            break
        if certificate.mask in added:
            # A repeated cut is only acceptable within the LP feasibility noise.
            if certificate.violated(resolve("coverage_tolerance")):
                raise SolverError(
                    f"Cut on {certificate.labels} is already in the program but still "
                    f"violated by {-float(certificate.slack):.3g}"
                )
            logger.debug("Cut on %s repeated within tolerance", certificate.labels)
            break
        if max_rounds is not None and rounds >= max_rounds:
            raise SolverError(f"No feasible optimum after {rounds} cuts")
        lp.add_le({caps[o]: dist.mass[o] for o in certificate.members}, float(certificate.g_value))
        added.add(certificate.mask)
        rounds += 1
        logger.debug(
            "Round %d: cut on %s with slack %.3g", rounds, certificate.labels, float(certificate.slack)
        )

    target = NormalizedInterimRule(universe, np.minimum(xbar, dist.mass), tolerance=1.0)
    solutions = _read_agent_solutions(result, instance, handles, caps)
    revenue = float(sum(s.revenue for s in solutions))
    allocator = rra_mechanism(
        g, target, instance.constraint.constraint, tolerance=resolve("coverage_tolerance")
    )
    logger.info("Polymatroid optimum %.9g after %d cuts", result.value, rounds)
    return OptimalAuction(
        instance, target, solutions, allocator, revenue, float(result.value), "polymatroid", rounds
    )


def _caps_of(xbar: np.ndarray, dist: ProductDistribution) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        caps = np.where(dist.mass > 0, xbar / np.where(dist.mass > 0, dist.mass, 1.0), 0.0)
    return np.clip(caps, 0.0, 1.0)


def _solve_agents(
    instance: AuctionInstance, caps: np.ndarray
) -> List[SingleAgentSolution]:
    solutions = []
    for i, solver in enumerate(instance.solvers, start=1):
        types = list(instance.universe.agent_types(i))
        solutions.append(solver.solve(instance.agent_mass(i), caps[types]))
    return solutions


def _revenue_gradient(
    instance: AuctionInstance,
    solutions: List[SingleAgentSolution],
    caps: np.ndarray,
    step: float,
) -> np.ndarray:
    """Supergradient of total revenue with respect to x̄."""
    dist = instance.dist
    gradient = np.zeros(instance.universe.size)
    for i, (solver, solution) in enumerate(zip(instance.solvers, solutions), start=1):
        types = list(instance.universe.agent_types(i))
        if solution.cap_gradient is not None:
            gradient[types] = solution.cap_gradient
            continue
        f = instance.agent_mass(i)
        base = caps[types]
        for local, o in enumerate(types):
            probe = base.copy()
            h = step if probe[local] + step <= 1.0 else -step
            probe[local] += h
            gradient[o] = (solver.solve(f, probe).revenue - solution.revenue) / h
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(dist.mass > 0, gradient / np.where(dist.mass > 0, dist.mass, 1.0), 0.0)


def optimize_frank_wolfe(
    instance: AuctionInstance,
    iterations: int = 100,
    step: float = 1e-6,
) -> OptimalAuction:
    """Experimental outer loop for solvers that are not linear programs.

    Each iteration moves toward the greedy vertex of P(g) along the revenue
    supergradient with step 2/(k + 2). The best iterate is kept.

    Args:
        instance: Any instance.
        iterations: Number of iterations.
        step: Finite-difference step for solvers without dual information.

    Returns:
        OptimalAuction: The best iterate found.
    """
    warnings.warn(
        "optimize_frank_wolfe is experimental and only approximately optimal",
        stacklevel=2,
    )
    dist = instance.dist
    universe = instance.universe
    g = instance.constraint.expected_rank(dist)
    xbar = np.zeros(universe.size)
    best: Optional[Tuple[float, np.ndarray, List[SingleAgentSolution]]] = None
    for k in range(iterations):
        caps = _caps_of(xbar, dist)
        solutions = _solve_agents(instance, caps)
        revenue = float(sum(s.revenue for s in solutions))
        if best is None or revenue > best[0]:
            best = (revenue, xbar.copy(), solutions)
        gradient = _revenue_gradient(instance, solutions, caps, step)
        positive = [int(o) for o in np.argsort(-gradient, kind="stable") if gradient[o] > 0]
        vertex = vertex_from_order(g, positive).values
        gamma = 2.0 / (k + 2.0)
        xbar = np.minimum((1.0 - gamma) * xbar + gamma * vertex, dist.mass)
        logger.debug("Frank-Wolfe iteration %d: revenue %.9g", k, revenue)

    revenue, xbar, solutions = best
    target = NormalizedInterimRule(universe, np.clip(xbar, 0.0, 1.0), tolerance=1.0)
    if instance.constraint.kind == "single-unit":
        point, _ = max_coverage_lp(target, dist)
        allocator: Mechanism = SsaMechanism(extract_table(point))
    else:
        allocator = rra_mechanism(
            g, target, instance.constraint.constraint, tolerance=resolve("coverage_tolerance")
        )
    logger.info("Frank-Wolfe best revenue %.9g after %d iterations", revenue, iterations)
    return OptimalAuction(
        instance, target, solutions, allocator, revenue, revenue, "frank-wolfe", iterations
    )


def optimize(instance: AuctionInstance) -> OptimalAuction:
    """Dispatch to the right optimization path for ``instance``."""
    if not instance.lp_expressible:
        return optimize_frank_wolfe(instance)
    if instance.constraint.kind == "single-unit":
        return optimize_single_unit(instance)
    return optimize_polymatroid(instance)


def assemble_and_run(
    auction: OptimalAuction, profile: TypeProfile, rng: np.random.Generator
) -> List[AgentOutcome]:
    """One run of the assembled auction.

    The allocator picks the provisionally served types. A served agent
    keeps service with probability x*(t)/x(t). Each agent then draws its
    outcome from its rule's service or non-service conditional.

    Raises:
        StructuralError: If the allocator serves a type with no target mass.
    """
    universe = auction.universe
    allocation: AllocationVector = auction.allocator.run(profile, rng)
    coin = auction.coin_probabilities()
    outcomes = []
    for i, o in enumerate(profile.ordinals, start=1):
        served = False
        if o in allocation.winners:
            if auction.target.values[o] <= 0.0:
                raise StructuralError(
                    f"Allocator served {universe.label_of(o)}, which has no target mass"
                )
            served = bool(rng.random() < coin[o])
        local = o - universe.agent_types(i).start
        attribute, payment = auction.solutions[i - 1].rule.draw(local, served, rng)
        outcomes.append(AgentOutcome(i, universe.label_of(o), served, attribute, payment))
    return outcomes
