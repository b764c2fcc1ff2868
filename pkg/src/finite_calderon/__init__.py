"""Finite-measurement reconstruction of a Schroedinger potential from boundary data."""
