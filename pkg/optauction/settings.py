"""Numeric settings shared by every optauction module.

All tolerances and size guards live on a single validated
:class:`Settings` object. Operations accept an explicit value for the knob
they use and fall back to the module-level ``settings`` instance otherwise.

Example:
    >>> from optauction.settings import settings
    >>> with settings.override(separation_guard=10):
    ...     settings.separation_guard
    10
"""

import contextlib
import logging
from typing import Any, Dict, Iterator, Optional

import traitlets

from .utils import get_env_var

logger = logging.getLogger(__name__)

_ENV_PREFIX = "OPTAUCTION_"


class Settings(traitlets.HasTraits):
    """Validated configuration for tolerances and enumeration guards.

    Attributes:
        tolerance: Absolute probability tolerance for feasibility slacks,
            distribution sums and certificate recomputation.
        lp_feasibility_tolerance: Primal feasibility tolerance passed to HiGHS.
        lp_optimality_tolerance: Dual feasibility tolerance passed to HiGHS.
        coverage_tolerance: Tolerance of the max-coverage implementability test
            and of LP-derived points checked against the SSA polytope.
        tie_tolerance: Window within which subset minimizers count as tied.
        z_max: Largest accepted |z| in Monte Carlo reports.
        separation_guard: Largest universe size for brute-force subset search.
        enumeration_guard: Largest number of type profiles enumerated.
        flow_guard: Largest number of profile nodes in the flow network.
    """

    tolerance = traitlets.Float(1e-9)
    lp_feasibility_tolerance = traitlets.Float(1e-9)
    lp_optimality_tolerance = traitlets.Float(1e-7)
    coverage_tolerance = traitlets.Float(1e-7)
    tie_tolerance = traitlets.Float(1e-12)
    z_max = traitlets.Float(4.0)
    separation_guard = traitlets.Int(22)
    enumeration_guard = traitlets.Int(10**6)
    flow_guard = traitlets.Int(10**5)

    @traitlets.validate(
        "tolerance",
        "lp_feasibility_tolerance",
        "lp_optimality_tolerance",
        "coverage_tolerance",
        "tie_tolerance",
        "z_max",
    )
    def _validate_positive(self, proposal: Dict[str, Any]) -> float:
        value = proposal["value"]
        if value <= 0:
            raise traitlets.TraitError(
                f"{proposal['trait'].name} must be positive, got {value}"
            )
        return value

    @traitlets.validate("separation_guard", "enumeration_guard", "flow_guard")
    def _validate_guard(self, proposal: Dict[str, Any]) -> int:
        value = proposal["value"]
        if value < 1:
            raise traitlets.TraitError(
                f"{proposal['trait'].name} must be at least 1, got {value}"
            )
        return value

    @traitlets.observe(traitlets.All)
    def _log_change(self, change: Dict[str, Any]) -> None:
        logger.debug("setting %s: %r -> %r", change["name"], change["old"], change["new"])

    @classmethod
    def from_env(cls) -> "Settings":
        """Build settings with overrides from ``OPTAUCTION_*`` environment variables.

        Returns:
            Settings: A new settings object.

        Raises:
            traitlets.TraitError: If an override is out of range.
            ValueError: If an override is not a number.
        """
        obj = cls()
        for name in obj.trait_names():
            raw = get_env_var(_ENV_PREFIX + name.upper())
            if raw is None:
                continue
            trait = obj.traits()[name]
            value = int(raw) if isinstance(trait, traitlets.Int) else float(raw)
            setattr(obj, name, value)
        return obj

    def as_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in sorted(self.trait_names())}

    @contextlib.contextmanager
    def override(self, **kwargs: Any) -> Iterator["Settings"]:
        """Temporarily change settings inside a ``with`` block.

        Args:
            **kwargs: Setting names and their temporary values.

        Raises:
            ValueError: If a name is not a known setting.
        """
        unknown = [name for name in kwargs if not self.has_trait(name)]
        if unknown:
            raise ValueError(f"Unknown settings: {', '.join(sorted(unknown))}")
        previous = {name: getattr(self, name) for name in kwargs}
        try:
            for name, value in kwargs.items():
                setattr(self, name, value)
            yield self
        finally:
            for name, value in previous.items():
                setattr(self, name, value)


def resolve(name: str, value: Optional[Any] = None) -> Any:
    """Return ``value`` unless it is None, else the current setting ``name``."""
    if value is not None:
        return value
    return getattr(settings, name)


settings = Settings.from_env()
