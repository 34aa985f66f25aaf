"""Command-line interface.

Exit codes: 0 success, 1 infeasible or failed verdict, 2 usage or document
errors, 3 internal errors. Reports go to stdout as JSON (or CSV with
``--output csv``); logging goes to stderr.
"""

import functools
import logging
import time
from typing import Any, Callable, Dict, Optional, Tuple

import click
import numpy as np
import pandas as pd

from . import __version__
from .errors import NotInPolytopeError, SchemaError
from .feasibility import is_feasible
from .io import (
    build_report,
    dump_report,
    load_instance,
    parse_rule,
    read_text,
    report_to_csv,
    rule_document,
    rule_frame,
)
from .model import NormalizedInterimRule
from .optimizer import AuctionInstance, optimize
from .polymatroid import OrderedSubsetMechanism, rra_mechanism
from .settings import settings
from .ssa import SsaMechanism, extract_table, max_coverage_lp
from .verify import MIN_SAMPLES, exact_interim, flow_oracle, monte_carlo_interim

logger = logging.getLogger(__name__)

GUARD_OVERRIDE = {
    "separation_guard": 30,
    "enumeration_guard": 10**12,
    "flow_guard": 10**12,
}


class InternalError(click.ClickException):
    exit_code = 3


def handle_errors(func: Callable) -> Callable:
    """Map library errors to exit codes 2 (documents) and 3 (everything else)."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except SchemaError as exc:
            raise click.UsageError(str(exc)) from exc
        except Exception as exc:
            logger.debug("Command failed", exc_info=True)
            raise InternalError(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def _emit(ctx: click.Context, command: str, body: Dict[str, Any], frame: pd.DataFrame) -> None:
    options = ctx.obj
    if options["output"] == "csv":
        click.echo(report_to_csv(frame), nl=False)
        return
    timing = time.perf_counter() - options["start"] if options["timing"] else None
    click.echo(dump_report(build_report(command, options["seed"], body, timing)))


def _rng(ctx: click.Context) -> np.random.Generator:
    return np.random.default_rng(ctx.obj["seed"])


def _instance_and_rule(
    instance_path: str, rule_path: Optional[str]
) -> Tuple[AuctionInstance, Optional[NormalizedInterimRule]]:
    instance, target = load_instance(instance_path)
    if rule_path is not None:
        target = parse_rule(read_text(rule_path), instance.dist)
    return instance, target


def _allocator_for(instance: AuctionInstance, target: NormalizedInterimRule):
    """Implementation of ``target`` and the details of how it was found."""
    if instance.constraint.kind == "single-unit":
        point, achieved = max_coverage_lp(target, instance.dist)
        shortfall = float(target.values.sum()) - achieved
        if shortfall > settings.coverage_tolerance:
            return None, {"implementable": False, "shortfall": shortfall}
        return SsaMechanism(extract_table(point)), {"implementable": True, "shortfall": shortfall}
    g = instance.constraint.expected_rank(instance.dist)
    try:
        mechanism = rra_mechanism(g, target, instance.constraint.constraint)
    except NotInPolytopeError as exc:
        return None, {"implementable": False, "reason": str(exc)}
    return mechanism, {"implementable": True}


@click.group()
@click.version_option(__version__, prog_name="optauction")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of every random draw.")
@click.option("--tolerance", type=float, default=None, help="Probability tolerance.")
@click.option(
    "--output",
    type=click.Choice(["json", "csv"]),
    default="json",
    show_default=True,
    help="Report format.",
)
@click.option("--guard-override", is_flag=True, help="Lift the enumeration and separation guards.")
@click.option("--verbose", is_flag=True, help="Log debug messages to stderr.")
@click.option("--timing", is_flag=True, help="Add wall-clock timing to JSON reports.")
@click.pass_context
def cli(
    ctx: click.Context,
    seed: int,
    tolerance: Optional[float],
    output: str,
    guard_override: bool,
    verbose: bool,
    timing: bool,
) -> None:
    """Revenue-optimal auctions under interim feasibility constraints."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides: Dict[str, Any] = {}
    if tolerance is not None:
        overrides["tolerance"] = tolerance
    if guard_override:
        overrides.update(GUARD_OVERRIDE)
    try:
        ctx.with_resource(settings.override(**overrides))
    except Exception as exc:
        raise click.BadParameter(str(exc)) from exc
    ctx.obj = {"seed": seed, "output": output, "timing": timing, "start": time.perf_counter()}


instance_argument = click.argument("instance", type=click.Path(exists=True, dir_okay=False))


@cli.command()
@instance_argument
@click.argument("rule", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@handle_errors
def check(ctx: click.Context, instance: str, rule: str) -> None:
    """Border feasibility of RULE for the supply of INSTANCE."""
    auction_instance, target = _instance_and_rule(instance, rule)
    g = auction_instance.constraint.expected_rank(auction_instance.dist)
    exact = target.exact is not None and not g.approximate
    feasible, certificate = is_feasible(target, g, exact=exact)
    body = {
        "verdict": "feasible" if feasible else "infeasible",
        "certificate": {
            "set": certificate.labels,
            "g": certificate.g_value,
            "mass": certificate.mass,
            "slack": certificate.slack,
            "slack_value": float(certificate.slack),
        },
        "rule": rule_document(target),
    }
    frame = rule_frame(target, auction_instance.dist)
    frame["in_certificate"] = [o in certificate.members for o in range(len(frame))]
    _emit(ctx, "check", body, frame)
    if not feasible:
        click.echo(f"Infeasible: {certificate.labels} has slack {certificate.slack}", err=True)
        ctx.exit(1)


@cli.command()
@instance_argument
@click.pass_context
@handle_errors
def solve(ctx: click.Context, instance: str) -> None:
    """Optimal auction and revenue of INSTANCE."""
    auction_instance, _ = load_instance(instance)
    auction = optimize(auction_instance)
    frame = rule_frame(auction.target, auction_instance.dist)
    frame["realized"] = auction.interim_rule().values
    _emit(ctx, "solve", auction.describe(), frame)


@cli.command()
@instance_argument
@click.argument("rule", type=click.Path(exists=True, dir_okay=False), required=False)
@click.pass_context
@handle_errors
def implement(ctx: click.Context, instance: str, rule: Optional[str]) -> None:
    """Ex post mechanism implementing RULE (or the instance's target)."""
    auction_instance, target = _instance_and_rule(instance, rule)
    if target is None:
        raise click.UsageError("Give a RULE file or a target in the instance document")
    mechanism, details = _allocator_for(auction_instance, target)
    body: Dict[str, Any] = dict(details)
    if mechanism is not None:
        body["mechanism"] = mechanism.describe()
    if isinstance(mechanism, SsaMechanism):
        frame = mechanism.table.to_frame().reset_index().rename(columns={"index": "holder"})
    else:
        frame = rule_frame(target, auction_instance.dist)
    _emit(ctx, "implement", body, frame)
    if mechanism is None:
        click.echo("Rule is not implementable", err=True)
        ctx.exit(1)


@cli.command()
@instance_argument
@click.option(
    "--samples",
    type=click.IntRange(min=MIN_SAMPLES),
    default=10**5,
    show_default=True,
    help="Monte Carlo runs.",
)
@click.option(
    "--workers", type=click.IntRange(min=1), default=1, show_default=True, help="Worker threads."
)
@click.pass_context
@handle_errors
def simulate(ctx: click.Context, instance: str, samples: int, workers: int) -> None:
    """Monte Carlo interim rule and revenue of the optimal auction."""
    auction_instance, _ = load_instance(instance)
    auction = optimize(auction_instance)
    rng = _rng(ctx)
    report = monte_carlo_interim(
        auction.allocator, auction_instance.dist, auction.target, samples, rng, workers=workers
    )
    revenue, se = auction.simulate_revenue(rng, samples)
    body = {
        "verdict": report.verdict,
        "revenue": auction.revenue,
        "simulated_revenue": revenue,
        "simulated_revenue_se": se,
        "interim": report.to_dict(),
    }
    _emit(ctx, "simulate", body, report.frame)
    if not report.passed:
        ctx.exit(1)


@cli.command()
@instance_argument
@click.option(
    "--mode",
    type=click.Choice(["exact", "mc", "flow"]),
    default="exact",
    show_default=True,
    help="Verification method.",
)
@click.option("--rule", type=click.Path(exists=True, dir_okay=False), default=None, help="Rule to verify.")
@click.option(
    "--samples",
    type=click.IntRange(min=MIN_SAMPLES),
    default=10**5,
    show_default=True,
    help="Monte Carlo runs.",
)
@click.pass_context
@handle_errors
def verify(ctx: click.Context, instance: str, mode: str, rule: Optional[str], samples: int) -> None:
    """Check that a rule (default: the optimum) is implemented as claimed."""
    auction_instance, target = _instance_and_rule(instance, rule)
    dist = auction_instance.dist
    if target is None:
        target = optimize(auction_instance).target
    tolerance = settings.coverage_tolerance

    if mode == "flow":
        constraint = auction_instance.constraint
        if constraint.kind == "matroid":
            raise click.UsageError("Flow verification supports single-unit and k-unit supply")
        solution = flow_oracle(target, dist, constraint.k)
        body: Dict[str, Any] = {"saturated": solution.saturated}
        frame = rule_frame(target, dist)
        if solution.saturated:
            measured = exact_interim(solution.ex_post_rule(), dist).values
            frame["measured"] = measured
            passed = bool(np.allclose(measured, target.values, rtol=0.0, atol=tolerance))
        else:
            body["cut"] = solution.cut_labels
            body["deficiency"] = solution.deficiency
            passed = False
        body["verdict"] = "pass" if passed else "fail"
        _emit(ctx, "verify", body, frame)
        if not passed:
            ctx.exit(1)
        return

    mechanism, details = _allocator_for(auction_instance, target)
    if mechanism is None:
        _emit(ctx, "verify", {"verdict": "fail", **details}, rule_frame(target, dist))
        ctx.exit(1)
    if mode == "exact":
        if not isinstance(mechanism, (SsaMechanism, OrderedSubsetMechanism)):
            raise click.UsageError(
                "The rounding mechanism has no exact interim rule; use --mode mc"
            )
        measured = exact_interim(mechanism, dist).values
        frame = rule_frame(target, dist)
        frame["measured"] = measured
        passed = bool(np.allclose(measured, target.values, rtol=0.0, atol=tolerance))
        body = {
            "verdict": "pass" if passed else "fail",
            "max_error": float(np.max(np.abs(measured - target.values))) if len(measured) else 0.0,
            "mechanism": mechanism.describe(),
        }
    else:
        report = monte_carlo_interim(mechanism, dist, target, samples, _rng(ctx))
        passed = report.passed
        frame = report.frame
        body = {"verdict": report.verdict, "interim": report.to_dict()}
    _emit(ctx, "verify", body, frame)
    if not passed:
        ctx.exit(1)


def main(argv: Optional[list] = None) -> None:
    cli.main(args=argv, prog_name="optauction")


if __name__ == "__main__":
    main()
