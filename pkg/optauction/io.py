"""Instance, rule and report documents.

Documents are JSON. Instances list the agents with their types, type
probabilities and preference payloads, plus the supply constraint;
probabilities may be decimals or exact fractions such as "1/4". Schemas are
pydantic models, and every validation failure is re-raised as
:class:`~optauction.errors.SchemaError` naming the field path, or the line
and column for malformed JSON.
"""

import json
from fractions import Fraction
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import SchemaError, StructuralError, UnsupportedMechanismError
from .matroid import ExplicitMatroid, PartitionMatroid, UniformMatroid, validate_matroid
from .model import (
    InterimAllocationRule,
    NormalizedInterimRule,
    ProductDistribution,
    TypeUniverse,
    normalize,
)
from .optimizer import AuctionInstance, SupplyConstraint
from .single_agent import (
    PrivateBudgetPreference,
    PrivateBudgetSolver,
    UnitDemandPreference,
    UnitDemandSolver,
)
from .utils import members_of, parse_fraction

SCHEMA_VERSION = 1
PROBABILITY_TOLERANCE = 1e-9

Probability = Union[int, float, str]


def _check_probability(value: Probability) -> Probability:
    try:
        fraction = parse_fraction(value)
    except ValueError as exc:
        raise ValueError(str(exc)) from exc
    if fraction < 0 or fraction > 1:
        raise ValueError(f"probability must lie in [0, 1], got {value}")
    return value


class TypeEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    label: str = Field(min_length=1)
    probability: Probability
    values: Optional[List[Annotated[float, Field(ge=0)]]] = None
    value: Optional[Annotated[float, Field(ge=0)]] = None
    budget: Optional[Annotated[float, Field(ge=0)]] = None

    @field_validator("label")
    @classmethod
    def label_has_no_colon(cls, label: str) -> str:
        if ":" in label:
            raise ValueError("labels cannot contain ':'")
        return label

    @field_validator("probability")
    @classmethod
    def check_probability(cls, value: Probability) -> Probability:
        return _check_probability(value)


class AgentEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    types: List[TypeEntry] = Field(min_length=1)

    @model_validator(mode="after")
    def check_types(self) -> "AgentEntry":
        labels = [t.label for t in self.types]
        if len(set(labels)) != len(labels):
            raise ValueError(f"type labels must be unique, got {labels}")
        total = sum(parse_fraction(t.probability) for t in self.types)
        if abs(float(total) - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"type probabilities sum to {total}, expected 1")
        return self


class SingleUnitEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["single-unit"]


class KUnitEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["k-unit"]
    k: int = Field(ge=0)


class BlockEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    types: List[str]
    cap: int = Field(ge=0)


class MatroidEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["matroid"]
    blocks: Optional[List[BlockEntry]] = None
    independent_sets: Optional[List[List[str]]] = None

    @model_validator(mode="after")
    def one_description(self) -> "MatroidEntry":
        if (self.blocks is None) == (self.independent_sets is None):
            raise ValueError("give exactly one of 'blocks' and 'independent_sets'")
        return self


ConstraintEntry = Annotated[
    Union[SingleUnitEntry, KUnitEntry, MatroidEntry], Field(discriminator="kind")
]


class RuleDocument(BaseModel):
    """Interim or normalized rule keyed by agent index and type label."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["interim", "normalized"]
    agents: Dict[str, Dict[str, Probability]]

    @field_validator("agents")
    @classmethod
    def check_entries(cls, agents: Dict[str, Dict[str, Probability]]) -> Dict[str, Dict[str, Probability]]:
        for agent, entries in agents.items():
            if not agent.isdigit():
                raise ValueError(f"agent keys are 1-based indices, got {agent!r}")
            for value in entries.values():
                _check_probability(value)
        return agents


class InstanceDocument(BaseModel):
    """Top-level instance document."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    preference_model: Literal["unit-demand", "private-budget"]
    no_subsidy: bool = False
    agents: List[AgentEntry] = Field(min_length=1)
    constraint: ConstraintEntry
    target: Optional[RuleDocument] = None

    @model_validator(mode="after")
    def check_payloads(self) -> "InstanceDocument":
        for i, agent in enumerate(self.agents):
            for j, entry in enumerate(agent.types):
                where = f"agents.{i}.types.{j}"
                if self.preference_model == "unit-demand":
                    if entry.values is None or entry.value is not None or entry.budget is not None:
                        raise ValueError(f"{where}: unit-demand types carry 'values' only")
                    if len(entry.values) != len(agent.types[0].values or []) or not entry.values:
                        raise ValueError(f"{where}: every type needs one value per item")
                elif entry.value is None or entry.budget is None or entry.values is not None:
                    raise ValueError(f"{where}: private-budget types carry 'value' and 'budget'")
        return self


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        path = ".".join(str(p) for p in error["loc"]) or "<document>"
        parts.append(f"{path}: {error['msg']}")
    return "; ".join(parts)


def load_json(text: str) -> Any:
    """Parse JSON, reporting syntax errors by line and column.

    Raises:
        SchemaError: On malformed JSON.
    """
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def parse_instance_document(text: str) -> InstanceDocument:
    """Validate instance text against the schema.

    Raises:
        SchemaError: With the field path of every failure.
    """
    data = load_json(text)
    try:
        return InstanceDocument.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(_format_validation_error(exc)) from exc


def _universe_of(document: InstanceDocument) -> TypeUniverse:
    return TypeUniverse([[t.label for t in agent.types] for agent in document.agents])


def _constraint_of(entry: Any, universe: TypeUniverse) -> SupplyConstraint:
    if isinstance(entry, SingleUnitEntry):
        return SupplyConstraint.single_unit()
    if isinstance(entry, KUnitEntry):
        return SupplyConstraint.k_unit(entry.k)
    try:
        if entry.blocks is not None:
            blocks = [([universe.ordinal(key) for key in b.types], b.cap) for b in entry.blocks]
            matroid = PartitionMatroid(blocks, universe.size)
        else:
            sets = [[universe.ordinal(key) for key in s] for s in entry.independent_sets]
            matroid = ExplicitMatroid(sets, universe.size)
    except StructuralError as exc:
        raise SchemaError(f"constraint: {exc}") from exc
    if entry.independent_sets is not None:
        violations = validate_matroid(matroid)
        if violations:
            first = violations[0]
            sets = [[universe.label_of(o) for o in s] for s in first.sets]
            raise SchemaError(f"constraint.independent_sets: {first.kind} axiom fails on {sets}")
    return SupplyConstraint.from_matroid(matroid)


def instance_from_document(document: InstanceDocument) -> AuctionInstance:
    """Build the validated :class:`AuctionInstance` of a document.

    Raises:
        SchemaError: If type references in the constraint are unknown or the
            matroid blocks do not partition the types, or an explicit
            independence list is not a matroid.
    """
    universe = _universe_of(document)
    dist = ProductDistribution(
        universe,
        [parse_fraction(t.probability) for agent in document.agents for t in agent.types],
        tolerance=PROBABILITY_TOLERANCE,
    )
    preferences = []
    for agent in document.agents:
        if document.preference_model == "unit-demand":
            preferences.append(UnitDemandPreference(np.array([t.values for t in agent.types])))
        else:
            preferences.append(
                PrivateBudgetPreference(
                    np.array([t.value for t in agent.types]),
                    np.array([t.budget for t in agent.types]),
                )
            )
    constraint = _constraint_of(document.constraint, universe)
    return AuctionInstance(dist, preferences, constraint, no_subsidy=document.no_subsidy)


def parse_instance(text: str) -> AuctionInstance:
    """Parse and validate an instance document.

    Examples:
        >>> doc = '''{"preference_model": "unit-demand",
        ...   "agents": [{"types": [{"label": "H", "probability": "1/2", "values": [2]},
        ...                         {"label": "L", "probability": "1/2", "values": [1]}]}],
        ...   "constraint": {"kind": "single-unit"}}'''
        >>> parse_instance(doc).universe.size
        1
    """
    return instance_from_document(parse_instance_document(text))


def rule_from_document(
    document: RuleDocument, dist: ProductDistribution
) -> NormalizedInterimRule:
    """The normalized rule of a rule document.

    Raises:
        SchemaError: On unknown agents or labels, missing types, or service
            mass above a type's probability.
    """
    universe = dist.universe
    values: List[Optional[Fraction]] = [None] * universe.size
    for agent, entries in document.agents.items():
        for label, value in entries.items():
            try:
                ordinal = universe.ordinal(f"{agent}:{label}")
            except StructuralError as exc:
                raise SchemaError(f"agents.{agent}.{label}: {exc}") from exc
            values[ordinal] = parse_fraction(value)
    missing = [universe.label_of(o) for o, v in enumerate(values) if v is None]
    if missing:
        raise SchemaError(f"agents: no entry for types {missing}")
    try:
        if document.kind == "interim":
            return normalize(InterimAllocationRule(universe, values), dist)
        rule = NormalizedInterimRule(universe, values)
        rule.check_mass(dist)
        return rule
    except (StructuralError, ValueError) as exc:
        raise SchemaError(f"agents: {exc}") from exc


def parse_rule(text: str, dist: ProductDistribution) -> NormalizedInterimRule:
    """Parse a rule document against the types of ``dist``."""
    data = load_json(text)
    try:
        document = RuleDocument.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(_format_validation_error(exc)) from exc
    return rule_from_document(document, dist)


def _exact_text(value: Union[Fraction, float]) -> str:
    return str(value) if isinstance(value, Fraction) else repr(float(value))


def rule_document(rule: NormalizedInterimRule) -> Dict[str, Any]:
    """Normalized rule document of ``rule``, exact when the rule is."""
    universe = rule.universe
    data = rule.exact if rule.exact is not None else rule.values
    agents: Dict[str, Dict[str, str]] = {}
    for o, gt in enumerate(universe.types):
        agents.setdefault(str(gt.agent_index), {})[gt.label] = _exact_text(data[o])
    return {"kind": "normalized", "agents": agents}


def _constraint_document(constraint: SupplyConstraint, universe: TypeUniverse) -> Dict[str, Any]:
    if constraint.kind == "single-unit":
        return {"kind": "single-unit"}
    if constraint.kind == "k-unit":
        return {"kind": "k-unit", "k": constraint.k}
    matroid = constraint.matroid
    if isinstance(matroid, UniformMatroid):
        return {"kind": "k-unit", "k": matroid.k}
    if isinstance(matroid, PartitionMatroid):
        return {
            "kind": "matroid",
            "blocks": [
                {"types": [universe.label_of(o) for o in members], "cap": cap}
                for members, cap in matroid.blocks
            ],
        }
    if isinstance(matroid, ExplicitMatroid):
        return {
            "kind": "matroid",
            "independent_sets": [
                [universe.label_of(o) for o in members_of(mask)]
                for mask in sorted(matroid.family, key=lambda m: (bin(m).count("1"), m))
            ],
        }
    raise UnsupportedMechanismError(f"Cannot serialize matroid {type(matroid).__name__}")


def instance_document(
    instance: AuctionInstance, target: Optional[NormalizedInterimRule] = None
) -> Dict[str, Any]:
    """JSON-ready document of ``instance``.

    Raises:
        UnsupportedMechanismError: For custom solvers or matroids without a
            document form.
    """
    universe = instance.universe
    solvers = instance.solvers
    if all(isinstance(s, UnitDemandSolver) for s in solvers):
        model = "unit-demand"
    elif all(isinstance(s, PrivateBudgetSolver) for s in solvers):
        model = "private-budget"
    else:
        raise UnsupportedMechanismError("Only built-in preferences can be serialized")
    agents = []
    for i, solver in enumerate(solvers, start=1):
        types = []
        for local, o in enumerate(universe.agent_types(i)):
            entry: Dict[str, Any] = {
                "label": universe.types[o].label,
                "probability": str(instance.dist.exact_mass[o]),
            }
            if model == "unit-demand":
                entry["values"] = [float(v) for v in solver.preference.values[local]]
            else:
                entry["value"] = float(solver.preference.values[local])
                entry["budget"] = float(solver.preference.budgets[local])
            types.append(entry)
        agents.append({"types": types})
    document: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "preference_model": model,
        "no_subsidy": instance.no_subsidy,
        "agents": agents,
        "constraint": _constraint_document(instance.constraint, universe),
    }
    if target is not None:
        document["target"] = rule_document(target)
    return document


def serialize_instance(
    instance: AuctionInstance, target: Optional[NormalizedInterimRule] = None
) -> str:
    return json.dumps(instance_document(instance, target), indent=2)


def _json_default(value: Any) -> Any:
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def build_report(
    command: str,
    seed: Optional[int],
    body: Dict[str, Any],
    timing: Optional[float] = None,
) -> Dict[str, Any]:
    """Report document: command echo and seed, then ``body``, then timing if measured."""
    report: Dict[str, Any] = {"command": command, "seed": seed}
    report.update(body)
    if timing is not None:
        report["timing"] = {"seconds": timing}
    return report


def dump_report(report: Dict[str, Any]) -> str:
    return json.dumps(report, indent=2, default=_json_default)


def rule_frame(
    rule: NormalizedInterimRule, dist: Optional[ProductDistribution] = None
) -> pd.DataFrame:
    """x̄ table with one row per type; adds the interim x = x̄/f when ``dist`` is given."""
    universe = rule.universe
    frame = pd.DataFrame(
        {
            "type": [universe.label_of(o) for o in range(universe.size)],
            "agent": [t.agent_index for t in universe.types],
            "label": [t.label for t in universe.types],
            "xbar": rule.values,
        }
    )
    if dist is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            frame["x"] = np.where(dist.mass > 0, rule.values / np.where(dist.mass > 0, dist.mass, 1.0), 0.0)
    return frame


def report_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False)


def read_text(path: str) -> str:
    with open(path, encoding="utf-8") as handle:
        return handle.read()


def load_instance(path: str) -> Tuple[AuctionInstance, Optional[NormalizedInterimRule]]:
    """Instance and optional target rule stored in a file."""
    document = parse_instance_document(read_text(path))
    instance = instance_from_document(document)
    target = rule_from_document(document.target, instance.dist) if document.target else None
    return instance, target
