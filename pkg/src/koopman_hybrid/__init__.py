"""Koopman-van Hove phase-space wavefunctions and hybrid classical-quantum dynamics."""

__version__ = "0.1"

from .phase_space import HybridField, PhaseSpaceGrid, ScalarField, VectorField, make_grid  # noqa: F401
