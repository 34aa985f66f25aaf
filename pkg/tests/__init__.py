"""Unit test package for optauction."""
