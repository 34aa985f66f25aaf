"""Independent checks of mechanisms and optima.

Exact interim rules by profile enumeration, Monte Carlo estimates with
z-scores, a max-flow feasibility oracle that also yields an ex post rule,
and an exhaustive LP over ex post BIC mechanisms for small unit-demand
instances.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
from networkx.algorithms.flow import edmonds_karp
from scipy import stats

from .errors import StructuralError, UnsupportedMechanismError
from .matroid import as_matroid
from .model import (
    AllocationVector,
    Mechanism,
    NormalizedInterimRule,
    ProductDistribution,
    TypeProfile,
    TypeUniverse,
)
from .settings import resolve
from .single_agent import UnitDemandSolver
from .utils import LinearProgram, check_guard, mask_of, to_fraction

if TYPE_CHECKING:
    from .optimizer import AuctionInstance

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10**4

SOURCE = "source"
SINK = "sink"


@dataclass
class InterimReport:
    """Per-type comparison of a measured interim rule with a target.

    Attributes:
        frame: One row per type with columns type, target, measured, se, z
            and p_value.
        samples: Number of Monte Carlo runs (0 for exact comparisons).
        z_max: Largest accepted |z|.
    """

    frame: pd.DataFrame
    samples: int
    z_max: float

    @property
    def passed(self) -> bool:
        return bool((self.frame["z"].abs() <= self.z_max).all())

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def worst(self) -> Optional[str]:
        """Type with the largest |z|."""
        if self.frame.empty:
            return None
        return str(self.frame.loc[self.frame["z"].abs().idxmax(), "type"])

    def to_dict(self) -> Dict[str, object]:
        return {
            "verdict": self.verdict,
            "samples": self.samples,
            "z_max": self.z_max,
            "rows": self.frame.to_dict(orient="records"),
        }


def _z_scores(measured: np.ndarray, target: np.ndarray, samples: int) -> Tuple[np.ndarray, np.ndarray]:
    # variance from the larger of the empirical and target Bernoulli variances
    variance = np.maximum(measured * (1 - measured), target * (1 - target))
    se = np.sqrt(variance / samples)
    diff = measured - target
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
    return se, z


def interim_report(
    universe: TypeUniverse,
    measured: np.ndarray,
    target: np.ndarray,
    samples: int,
    z_max: Optional[float] = None,
) -> InterimReport:
    z_max = resolve("z_max", z_max)
    se, z = _z_scores(np.asarray(measured, dtype=float), np.asarray(target, dtype=float), samples)
    frame = pd.DataFrame(
        {
            "type": [universe.label_of(o) for o in range(universe.size)],
            "target": np.asarray(target, dtype=float),
            "measured": np.asarray(measured, dtype=float),
            "se": se,
            "z": z,
            "p_value": 2 * stats.norm.sf(np.abs(z)),
        }
    )
    return InterimReport(frame, samples, z_max)


def exact_interim(
    mechanism: Mechanism,
    dist: ProductDistribution,
    exact: bool = False,
    guard: Optional[int] = None,
) -> NormalizedInterimRule:
    """x̄(t) = sum over profiles of Pr(profile) P(serve t | profile).

    Raises:
        UnsupportedMechanismError: If the mechanism has no exact per-profile
            service probabilities.
        InstanceTooLargeError: If the profile count exceeds the guard.
    """
    universe = dist.universe
    if exact:
        totals: List[Union[float, Fraction]] = [Fraction(0)] * universe.size
    else:
        totals = [0.0] * universe.size
    for profile, prob in dist.profiles(guard=guard, exact=exact):
        served = mechanism.service_probabilities(profile, exact=exact)
        for o, p in zip(profile.ordinals, served):
            if exact and not isinstance(p, (int, Fraction)):
                p = to_fraction(p)
            totals[o] += prob * p
    if exact:
        return NormalizedInterimRule(universe, list(totals))
    return NormalizedInterimRule(universe, np.array(totals, dtype=float))


def _count_served(
    mechanism: Mechanism, dist: ProductDistribution, samples: int, rng: np.random.Generator
) -> np.ndarray:
    profiles = dist.sample_profiles(rng, samples)
    served = mechanism.run_batch(profiles, rng)
    return np.bincount(profiles[served], minlength=dist.universe.size)


def monte_carlo_interim(
    mechanism: Mechanism,
    dist: ProductDistribution,
    target: Union[NormalizedInterimRule, np.ndarray],
    samples: int,
    rng: np.random.Generator,
    z_max: Optional[float] = None,
    workers: int = 1,
) -> InterimReport:
    """Estimate the interim rule from ``samples`` runs and z-score it.

    Args:
        mechanism: The mechanism to run.
        dist: Type distribution the profiles are drawn from.
        target: Expected normalized rule.
        samples: Number of runs, at least 10^4.
        rng: Random source; with several workers it seeds one child stream each.
        z_max: Largest accepted |z|.
        workers: Number of threads sharing the runs.

    Raises:
        ValueError: If ``samples`` is below 10^4 or ``workers`` below 1.
    """
    if samples < MIN_SAMPLES:
        raise ValueError(f"Monte Carlo needs at least {MIN_SAMPLES} samples, got {samples}")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    target_values = target.values if isinstance(target, NormalizedInterimRule) else np.asarray(target)
    if workers == 1:
        counts = _count_served(mechanism, dist, samples, rng)
    else:
        seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(workers)
        shares = [samples // workers + (1 if w < samples % workers else 0) for w in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(
                lambda job: _count_served(mechanism, dist, job[0], np.random.default_rng(job[1])),
                zip(shares, seeds),
            )
            counts = sum(parts)
    measured = counts / samples
    report = interim_report(dist.universe, measured, target_values, samples, z_max)
    logger.info("Monte Carlo over %d runs: %s (worst %s)", samples, report.verdict, report.worst)
    return report


@dataclass
class FlowSolution:
    """Max-flow on the profile/type network.

    Attributes:
        universe: The type universe.
        saturated: True when every type-to-sink edge is saturated.
        flow: ρ(profile row, type ordinal), in probability units.
        cut: Types on the sink side of a minimum cut when not saturated.
        deficiency: Total capacity of the sink edges minus the flow value.
        profiles: (P, n) ordinal array of the profile nodes.
        probabilities: Probability of every profile.
        k: Number of units.
    """

    universe: TypeUniverse
    saturated: bool
    flow: Dict[Tuple[int, int], Fraction]
    cut: Tuple[int, ...]
    deficiency: Fraction
    profiles: np.ndarray
    probabilities: List[Fraction]
    k: int

    @property
    def cut_labels(self) -> List[str]:
        return [self.universe.label_of(o) for o in self.cut]

    @property
    def cut_mask(self) -> int:
        return mask_of(self.cut)

    def ex_post_rule(self) -> "FlowExPostRule":
        """The rule q(profile, t) = ρ / f(profile) as a mechanism.

        Raises:
            StructuralError: If the flow does not saturate the sink edges.
        """
        if not self.saturated:
            raise StructuralError(
                f"Flow is not saturated; types {self.cut_labels} violate the Border condition"
            )
        return FlowExPostRule(self)


class FlowExPostRule(Mechanism):
    """Per-profile service probabilities from a saturated flow.

    Winners are drawn by systematic sampling: one uniform offset u and the
    agents whose cumulative probability interval contains u + m for an
    integer m. Marginals equal q and at most ceil(sum q) <= k are served.
    """

    def __init__(self, solution: FlowSolution) -> None:
        self.solution = solution
        self.universe = solution.universe
        self.rows = {tuple(int(o) for o in p): r for r, p in enumerate(solution.profiles)}
        n = solution.profiles.shape[1]
        q = [[Fraction(0)] * n for _ in range(len(self.rows))]
        for (r, o), rho in solution.flow.items():
            prob = solution.probabilities[r]
            if prob > 0:
                i = int(self.universe.agent_of[o]) - 1
                q[r][i] = min(Fraction(1), rho / prob)
        self.q = q
        self.q_float = np.array([[float(v) for v in row] for row in q]) if q else np.zeros((0, n))

    def service_probabilities(self, profile: TypeProfile, exact: bool = False) -> List[Union[float, Fraction]]:
        row = self.q[self.rows[tuple(profile.ordinals)]]
        return list(row) if exact else [float(v) for v in row]

    def run(self, profile: TypeProfile, rng: np.random.Generator) -> AllocationVector:
        q = self.q_float[self.rows[tuple(profile.ordinals)]]
        u = rng.random()
        upper = np.cumsum(q)
        lower = upper - q
        served = np.floor(upper - u) - np.floor(lower - u) > 0
        winners = frozenset(int(profile.ordinals[i]) for i in np.nonzero(served)[0])
        return AllocationVector(self.universe, winners)

    def describe(self) -> Dict[str, object]:
        return {"kind": "flow-ex-post", "profiles": len(self.rows), "k": self.solution.k}


def _lcm(values: Sequence[int]) -> int:
    out = 1
    for v in values:
        out = out * v // math.gcd(out, v)
    return out


def flow_oracle(
    xbar: NormalizedInterimRule,
    dist: ProductDistribution,
    k: int = 1,
    guard: Optional[int] = None,
    tolerance: Optional[float] = None,
) -> FlowSolution:
    """Feasibility of x̄ for k units by max-flow.

    The network has edges source -> profile (capacity k f(p)), profile ->
    each of its types (f(p)) and type -> sink (x̄(t)). Capacities are
    scaled to integers so saturation is decided exactly up to
    ``tolerance``.

    Raises:
        InstanceTooLargeError: If the profile count exceeds the flow guard.
    """
    guard = resolve("flow_guard", guard)
    tolerance = resolve("tolerance", tolerance)
    universe = dist.universe
    if xbar.universe != universe:
        raise StructuralError("Rule and distribution are over different type universes")
    check_guard(dist.profile_count, guard, "Flow network profile nodes")
    profiles, _ = dist.profile_table(guard=dist.profile_count)
    probabilities = []
    for p in profiles:
        prob = Fraction(1)
        for o in p:
            prob *= dist.exact_mass[int(o)]
        probabilities.append(prob)
    targets = list(xbar.exact) if xbar.exact is not None else [to_fraction(v) for v in xbar.values]
    scale = _lcm([v.denominator for v in probabilities + targets])

    graph = nx.DiGraph()
    for r, (p, prob) in enumerate(zip(profiles, probabilities)):
        graph.add_edge(SOURCE, ("profile", r), capacity=int(k * prob * scale))
        for o in p:
            graph.add_edge(("profile", r), ("type", int(o)), capacity=int(prob * scale))
    for o in range(universe.size):
        graph.add_edge(("type", o), SINK, capacity=int(targets[o] * scale))

    value, flows = nx.maximum_flow(graph, SOURCE, SINK, flow_func=edmonds_karp)
    total = sum(targets, Fraction(0))
    deficiency = total - Fraction(value, scale)
    saturated = float(deficiency) <= tolerance
    flow = {}
    for r in range(len(profiles)):
        for node, amount in flows[("profile", r)].items():
            if amount:
                flow[(r, node[1])] = Fraction(amount, scale)
    cut: Tuple[int, ...] = ()
    if not saturated:
        _, (_, sink_side) = nx.minimum_cut(graph, SOURCE, SINK, flow_func=edmonds_karp)
        cut = tuple(sorted(node[1] for node in sink_side if isinstance(node, tuple) and node[0] == "type"))
    logger.debug(
        "Flow %s of %s over %d profiles: %s",
        Fraction(value, scale),
        total,
        len(profiles),
        "saturated" if saturated else f"cut {cut}",
    )
    return FlowSolution(universe, saturated, flow, cut, deficiency, profiles, probabilities, int(k))


def best_posted_price(values: Sequence[float], f: Sequence[float]) -> Tuple[float, float]:
    """Revenue-maximizing take-it-or-leave-it price for one item.

    Candidate prices are the values; ties go to the lowest price.

    Returns:
        Tuple[float, float]: (price, revenue = price * P(value >= price)).

    Examples:
        >>> best_posted_price([2.0, 1.0], [0.5, 0.5])
        (1.0, 1.0)
    """
    values = np.asarray(values, dtype=float)
    f = np.asarray(f, dtype=float)
    if values.shape != f.shape:
        raise StructuralError("Need one probability per value")
    best = (0.0, 0.0)
    for price in np.unique(values):
        revenue = float(price * f[values >= price].sum())
        if revenue > best[1] + 1e-12:
            best = (float(price), revenue)
    return best


def _unit_demand_values(instance: "AuctionInstance") -> List[np.ndarray]:
    values = []
    for solver in instance.solvers:
        if not isinstance(solver, UnitDemandSolver):
            raise UnsupportedMechanismError(
                "The exhaustive oracle supports unit-demand preferences only"
            )
        values.append(solver.preference.values)
    return values


def exhaustive_bic_revenue(instance: "AuctionInstance", guard: Optional[int] = None) -> float:
    """Optimal revenue over all ex post feasible BIC, IR mechanisms.

    Variables are the item probabilities w(p, i, j) of every profile p and
    the interim payments P_i(t). Incentive and participation constraints
    are imposed on interim quantities; per profile the served agents must
    be independent in expectation (at most k for k units, at most the rank
    for every set of agents under a matroid).

    Raises:
        UnsupportedMechanismError: If some preference is not unit-demand.
        InstanceTooLargeError: If the profile count exceeds the guard.
    """
    values = _unit_demand_values(instance)
    dist = instance.dist
    universe = instance.universe
    n = universe.n_agents
    profiles, probs = dist.profile_table(guard=guard)
    constraint = instance.constraint
    matroid = constraint.as_matroid(universe.size) if constraint.kind == "matroid" else None

    lp = LinearProgram("exhaustive-bic")
    w = []
    for r in range(len(profiles)):
        row = []
        for i in range(n):
            row.append(lp.add_variables(values[i].shape[1], lower=0.0, upper=1.0))
        w.append(row)
    pay = lp.add_variables(universe.size, lower=0.0 if instance.no_subsidy else None)
    lp.add_objective({pay[o]: dist.mass[o] for o in range(universe.size)})

    for r, p in enumerate(profiles):
        for i in range(n):
            lp.add_le({c: 1.0 for c in w[r][i]}, 1.0)
        if matroid is None:
            lp.add_le({c: 1.0 for i in range(n) for c in w[r][i]}, float(constraint.k))
            continue
        for agents in range(1, 1 << n):
            members = [i for i in range(n) if agents >> i & 1]
            rank = matroid.rank([int(p[i]) for i in members])
            if rank < len(members):
                lp.add_le({c: 1.0 for i in members for c in w[r][i]}, float(rank))

    # interim item probabilities W_i(t, j) as sparse rows over w
    for i in range(n):
        ordinals = list(universe.agent_types(i + 1))
        f_i = dist.mass[ordinals]
        interim: Dict[int, List[Dict[int, float]]] = {}
        for local, o in enumerate(ordinals):
            rows = np.nonzero(profiles[:, i] == o)[0]
            items = []
            for j in range(values[i].shape[1]):
                coefficients = {}
                for r in rows:
                    if f_i[local] > 0:
                        coefficients[int(w[r][i][j])] = probs[r] / f_i[local]
                items.append(coefficients)
            interim[local] = items
        v = values[i]
        for t, o in enumerate(ordinals):
            ir = {pay[o]: 1.0}
            for j in range(v.shape[1]):
                for c, coef in interim[t][j].items():
                    ir[c] = ir.get(c, 0.0) - v[t, j] * coef
            lp.add_le(ir, 0.0)
            for s, o2 in enumerate(ordinals):
                if s == t:
                    continue
                ic = {pay[o]: 1.0, pay[o2]: -1.0}
                for j in range(v.shape[1]):
                    for c, coef in interim[s][j].items():
                        ic[c] = ic.get(c, 0.0) + v[t, j] * coef
                    for c, coef in interim[t][j].items():
                        ic[c] = ic.get(c, 0.0) - v[t, j] * coef
                lp.add_le(ic, 0.0)
    result = lp.solve()
    logger.debug("Exhaustive BIC revenue %.9g over %d profiles", result.value, len(profiles))
    return float(result.value)
