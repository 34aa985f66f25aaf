#!/usr/bin/env python

"""Tests for the shared numeric settings."""

import pytest
import traitlets

from optauction.settings import Settings, resolve, settings


class TestSettings:
    """Test cases for Settings."""

    def test_defaults(self):
        """Test the default tolerances and guards."""
        fresh = Settings()
        assert fresh.tolerance == 1e-9
        assert fresh.coverage_tolerance == 1e-7
        assert fresh.z_max == 4.0
        assert fresh.separation_guard == 22
        assert fresh.enumeration_guard == 10**6
        assert fresh.flow_guard == 10**5

    def test_override_restores_previous_values(self):
        """Test that override is undone when the block exits."""
        before = settings.separation_guard
        with settings.override(separation_guard=5) as active:
            assert active.separation_guard == 5
            assert resolve("separation_guard") == 5
        assert settings.separation_guard == before

    def test_override_restores_after_errors(self):
        """Test that override is undone when the block raises."""
        before = settings.tolerance
        with pytest.raises(RuntimeError):
            with settings.override(tolerance=1e-3):
                raise RuntimeError("boom")
        assert settings.tolerance == before

    def test_unknown_setting(self):
        """Test that unknown names are refused."""
        with pytest.raises(ValueError):
            with settings.override(not_a_setting=1):
                pass

    def test_validation(self):
        """Test that tolerances must be positive and guards at least 1."""
        fresh = Settings()
        with pytest.raises(traitlets.TraitError):
            fresh.tolerance = 0.0
        with pytest.raises(traitlets.TraitError):
            fresh.flow_guard = 0

    def test_resolve_prefers_explicit_value(self):
        """Test that an explicit value wins over the setting."""
        assert resolve("tolerance", 0.5) == 0.5
        assert resolve("tolerance") == settings.tolerance

    def test_from_env(self, monkeypatch):
        """Test OPTAUCTION_* environment overrides."""
        monkeypatch.setenv("OPTAUCTION_SEPARATION_GUARD", "12")
        monkeypatch.setenv("OPTAUCTION_Z_MAX", "5.5")
        fresh = Settings.from_env()
        assert fresh.separation_guard == 12
        assert fresh.z_max == 5.5
        assert fresh.as_dict()["separation_guard"] == 12
