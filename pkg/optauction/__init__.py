"""Top-level package for optauction."""

__author__ = """optauction developers"""
__version__ = "0.1.0"

from .errors import (
    InfeasibleMassError,
    InstanceTooLargeError,
    NotInPolytopeError,
    RerouteCapacityError,
    SchemaError,
    SolverError,
    StructuralError,
    UnsupportedMechanismError,
)
from .feasibility import (
    KUnitOracle,
    MatroidRankOracle,
    expected_rank_oracle,
    g_bruteforce,
    g_k_dp,
    is_feasible,
    separate,
)
from .matroid import ExplicitMatroid, PartitionMatroid, UniformMatroid
from .model import (
    AllocationVector,
    GlobalType,
    InterimAllocationRule,
    NormalizedInterimRule,
    ProductDistribution,
    TypeProfile,
    TypeUniverse,
    denormalize,
    normalize,
)
from .optimizer import (
    AuctionInstance,
    OptimalAuction,
    SupplyConstraint,
    assemble_and_run,
    optimize,
    optimize_frank_wolfe,
    optimize_polymatroid,
    optimize_single_unit,
)
from .polymatroid import OrderedSubset, rand_round, rra_mechanism, vertex_from_order
from .settings import settings
from .single_agent import (
    PrivateBudgetPreference,
    UnitDemandPreference,
    solve_private_budget,
    solve_unit_demand,
)
from .ssa import SsaMechanism, TransitionTable, extract_table, max_coverage_lp, run_ssa
from .verify import exact_interim, flow_oracle, monte_carlo_interim

__all__ = [
    "AllocationVector",
    "AuctionInstance",
    "ExplicitMatroid",
    "GlobalType",
    "InfeasibleMassError",
    "InstanceTooLargeError",
    "InterimAllocationRule",
    "KUnitOracle",
    "MatroidRankOracle",
    "NormalizedInterimRule",
    "NotInPolytopeError",
    "OptimalAuction",
    "OrderedSubset",
    "PartitionMatroid",
    "PrivateBudgetPreference",
    "ProductDistribution",
    "RerouteCapacityError",
    "SchemaError",
    "SolverError",
    "SsaMechanism",
    "StructuralError",
    "SupplyConstraint",
    "TransitionTable",
    "TypeProfile",
    "TypeUniverse",
    "UniformMatroid",
    "UnitDemandPreference",
    "UnsupportedMechanismError",
    "assemble_and_run",
    "denormalize",
    "exact_interim",
    "expected_rank_oracle",
    "extract_table",
    "flow_oracle",
    "g_bruteforce",
    "g_k_dp",
    "is_feasible",
    "max_coverage_lp",
    "monte_carlo_interim",
    "normalize",
    "optimize",
    "optimize_frank_wolfe",
    "optimize_polymatroid",
    "optimize_single_unit",
    "rand_round",
    "rra_mechanism",
    "run_ssa",
    "separate",
    "settings",
    "solve_private_budget",
    "solve_unit_demand",
    "vertex_from_order",
]
