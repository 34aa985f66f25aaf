#!/usr/bin/env python

"""Tests for the `optauction` command-line interface."""

import json
import os

import pytest
from click.testing import CliRunner

from optauction.cli import cli

DATA = os.path.join(os.path.dirname(__file__), "data")


def data(name):
    return os.path.join(DATA, name)


def report_of(result):
    """JSON report printed on stdout."""
    text = result.stdout
    return json.loads(text[text.index("{") : text.rindex("}") + 1])


@pytest.fixture
def runner():
    return CliRunner()


class TestCheck:
    """Test cases for `optauction check`."""

    def test_infeasible_rule(self, runner):
        """Test that (A, A) exits 1 with the exact certificate."""
        result = runner.invoke(cli, ["check", data("intro2.json"), data("ruleAA.json")])
        assert result.exit_code == 1
        report = report_of(result)
        assert report["command"] == "check"
        assert report["verdict"] == "infeasible"
        assert report["certificate"]["set"] == ["1:H", "2:H"]
        assert report["certificate"]["slack"] == "-1/4"
        assert report["certificate"]["g"] == "3/4"

    def test_feasible_rule(self, runner):
        """Test that (A, B) exits 0."""
        result = runner.invoke(cli, ["check", data("intro2.json"), data("ruleAB.json")])
        assert result.exit_code == 0
        assert report_of(result)["verdict"] == "feasible"

    def test_csv_output(self, runner):
        """Test the per-type CSV table."""
        result = runner.invoke(
            cli, ["--output", "csv", "check", data("intro2.json"), data("ruleAB.json")]
        )
        assert result.exit_code == 0
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "type,agent,label,xbar,x,in_certificate"
        assert len(lines) == 5


class TestSolve:
    """Test cases for `optauction solve`."""

    def test_revenue(self, runner):
        """Test the optimal revenue of the two-agent example."""
        result = runner.invoke(cli, ["--seed", "7", "solve", data("intro2.json")])
        assert result.exit_code == 0
        report = report_of(result)
        assert report["seed"] == 7
        assert report["method"] == "single-unit"
        assert report["revenue"] == pytest.approx(1.5, abs=1e-6)

    def test_deterministic(self, runner):
        """Test that the same seed gives byte-identical reports."""
        first = runner.invoke(cli, ["--seed", "7", "solve", data("intro2.json")])
        second = runner.invoke(cli, ["--seed", "7", "solve", data("intro2.json")])
        assert first.stdout == second.stdout

    def test_timing(self, runner):
        """Test that timing is appended when asked for."""
        result = runner.invoke(cli, ["--timing", "solve", data("intro2-k1.json")])
        assert result.exit_code == 0
        report = report_of(result)
        assert list(report)[-1] == "timing"
        assert report["revenue"] == pytest.approx(1.5, abs=1e-6)


class TestImplement:
    """Test cases for `optauction implement`."""

    def test_transition_table(self, runner):
        """Test that a single-unit rule gets an SSA table."""
        result = runner.invoke(cli, ["implement", data("intro2.json"), data("ruleAB.json")])
        assert result.exit_code == 0
        report = report_of(result)
        assert report["implementable"]
        assert report["mechanism"]["kind"] == "transition-table"

    def test_not_implementable(self, runner):
        """Test that (A, A) exits 1."""
        result = runner.invoke(cli, ["implement", data("intro2.json"), data("ruleAA.json")])
        assert result.exit_code == 1
        assert not report_of(result)["implementable"]

    def test_missing_rule(self, runner):
        """Test that a rule is required when the instance has no target."""
        result = runner.invoke(cli, ["implement", data("intro2.json")])
        assert result.exit_code == 2


class TestVerify:
    """Test cases for `optauction verify`."""

    def test_exact_optimum(self, runner):
        """Test exact verification of the optimal SSA allocator."""
        result = runner.invoke(cli, ["verify", data("intro2.json")])
        assert result.exit_code == 0
        assert report_of(result)["verdict"] == "pass"

    def test_flow(self, runner):
        """Test flow verification of a feasible and an infeasible rule."""
        ok = runner.invoke(cli, ["verify", data("intro2.json"), "--mode", "flow", "--rule", data("ruleAB.json")])
        assert ok.exit_code == 0
        assert report_of(ok)["saturated"]
        bad = runner.invoke(cli, ["verify", data("intro2.json"), "--mode", "flow", "--rule", data("ruleAA.json")])
        assert bad.exit_code == 1
        assert report_of(bad)["cut"] == ["1:H", "2:H"]

    def test_monte_carlo(self, runner):
        """Test Monte Carlo verification of an interior rule."""
        result = runner.invoke(
            cli,
            ["verify", data("intro2-k1.json"), "--mode", "mc", "--rule", data("ruleBB.json"), "--samples", "10000"],
        )
        assert result.exit_code == 0
        assert report_of(result)["verdict"] == "pass"

    def test_exact_mode_needs_a_deterministic_allocator(self, runner):
        """Test that rounding mechanisms cannot be verified exactly."""
        result = runner.invoke(
            cli, ["verify", data("intro2-k1.json"), "--mode", "exact", "--rule", data("ruleBB.json")]
        )
        assert result.exit_code == 2


class TestErrors:
    """Test cases for exit code 2."""

    def test_missing_file(self, runner):
        """Test a path that does not exist."""
        result = runner.invoke(cli, ["solve", data("missing.json")])
        assert result.exit_code == 2

    def test_bad_document(self, runner, tmp_path):
        """Test a document failing validation."""
        path = tmp_path / "bad.json"
        path.write_text('{"preference_model": "unit-demand", "agents": []}', encoding="utf-8")
        result = runner.invoke(cli, ["solve", str(path)])
        assert result.exit_code == 2

    def test_too_few_samples(self, runner):
        """Test that Monte Carlo commands refuse fewer than 10^4 runs."""
        result = runner.invoke(cli, ["simulate", data("intro2.json"), "--samples", "1000"])
        assert result.exit_code == 2
        result = runner.invoke(
            cli, ["verify", data("intro2.json"), "--mode", "mc", "--samples", "9999"]
        )
        assert result.exit_code == 2

    def test_version(self, runner):
        """Test --version."""
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert "optauction" in result.output
