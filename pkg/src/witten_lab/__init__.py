"""Numerical laboratory for the Witten deformation on tame model manifolds."""

__version__ = "0.1.0"
