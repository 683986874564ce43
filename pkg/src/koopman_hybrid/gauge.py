"""Symplectic gauge potentials and the shifted operators Z+ and Z-.

A gauge is a one-form A(z) with curl d_q A_p - d_p A_q = -1.  Its derivatives
are always taken analytically, since A itself is not periodic on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .phase_space import (HybridField, PhaseSpaceGrid, ScalarField, VectorField, d_p, d_q,
                          require_same_grid)

CURL_TOL = 1e-10


class GaugeKind(str, Enum):
    LIOUVILLE = "liouville"
    HARMONIC = "harmonic"
    CUSTOM = "custom"


class GaugeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaugePotential:
    """A(z) = (A_q, A_p) with its Jacobian.

    ``evaluator(q, p) -> (A_q, A_p)``;
    ``jacobian(q, p) -> ((dA_q/dq, dA_q/dp), (dA_p/dq, dA_p/dp))``.
    """

    kind: GaugeKind
    evaluator: Callable
    jacobian: Callable

    def __call__(self, q, p):
        return self.evaluator(q, p)

    def ja(self, q, p):
        """The rotated potential JA = (A_p, -A_q)."""
        aq, ap = self.evaluator(q, p)
        return ap, -aq

    def ja_jacobian(self, q, p):
        (aqq, aqp), (apq, app) = self.jacobian(q, p)
        return (apq, app), (-aqq, -aqp)

    def curl(self, q, p):
        (_, aqp), (apq, _) = self.jacobian(q, p)
        return apq - aqp


def _broadcast(x, like):
    return np.broadcast_to(np.asarray(x, dtype=float), np.shape(like)).copy()


def liouville() -> GaugePotential:
    """A = (p, 0), i.e. A.dz = p dq."""
    def ev(q, p):
        return _broadcast(p, q + p), _broadcast(0.0, q + p)

    def jac(q, p):
        z, o = _broadcast(0.0, q + p), _broadcast(1.0, q + p)
        return (z, o), (z, z.copy())

    return GaugePotential(GaugeKind.LIOUVILLE, ev, jac)


def harmonic() -> GaugePotential:
    """A = (p/2, -q/2), the rotation-symmetric gauge."""
    def ev(q, p):
        return _broadcast(0.5 * np.asarray(p), q + p), _broadcast(-0.5 * np.asarray(q), q + p)

    def jac(q, p):
        z, h = _broadcast(0.0, q + p), _broadcast(0.5, q + p)
        return (z, h), (-h, z.copy())

    return GaugePotential(GaugeKind.HARMONIC, ev, jac)


def custom(evaluator: Callable, jacobian: Callable, grid: Optional[PhaseSpaceGrid] = None,
           fd_step: float = 1e-6) -> GaugePotential:
    """User gauge; the curl constraint is checked on ``grid`` (or a probe set).

    The supplied Jacobian is also spot-checked against central differences.
    """
    if grid is not None:
        q, p = grid.mesh
    else:
        rng = np.random.default_rng(0)
        q, p = rng.uniform(-1.0, 1.0, (2, 16))
    g = GaugePotential(GaugeKind.CUSTOM, evaluator, jacobian)
    curl = np.asarray(g.curl(q, p))
    bad = np.max(np.abs(curl + 1.0))
    if not bad <= CURL_TOL:
        raise GaugeError(f"curl constraint d_q A_p - d_p A_q = -1 violated (max residual {bad:.3e})")

    qs, ps = np.ravel(q)[:8], np.ravel(p)[:8]
    jac = jacobian(qs, ps)
    for axis in (0, 1):
        dq = fd_step if axis == 0 else 0.0
        dp = fd_step if axis == 1 else 0.0
        hi = evaluator(qs + dq, ps + dp)
        lo = evaluator(qs - dq, ps - dp)
        for comp in (0, 1):
            fd = (np.asarray(hi[comp]) - np.asarray(lo[comp])) / (2 * fd_step)
            an = np.asarray(jac[comp][axis])
            if not np.allclose(fd, an, rtol=1e-6, atol=1e-6):
                raise GaugeError("gauge jacobian disagrees with finite differences of the evaluator")
    return g


def from_name(name: str) -> GaugePotential:
    key = name.strip().lower()
    if key == GaugeKind.LIOUVILLE.value:
        return liouville()
    if key == GaugeKind.HARMONIC.value:
        return harmonic()
    raise GaugeError(f"unknown gauge {name!r} (expected 'liouville' or 'harmonic')")


def evaluate_gauge(g: GaugePotential, grid: PhaseSpaceGrid) -> VectorField:
    q, p = grid.mesh
    aq, ap = g(q, p)
    if g.kind is GaugeKind.CUSTOM:
        curl = g.curl(q, p)
        bad = np.max(np.abs(np.asarray(curl) + 1.0))
        if not bad <= CURL_TOL:
            raise GaugeError(f"curl constraint violated on grid (max residual {bad:.3e})")
    return VectorField(ScalarField(grid, np.asarray(aq, dtype=float)),
                       ScalarField(grid, np.asarray(ap, dtype=float)))


# ---------------------------------------------------------------------------
# Z operators.  Arrays are (..., nq, np); gradients are stacked (2, ...).

def z_plus_arrays(values: np.ndarray, gradient: np.ndarray, aq: np.ndarray, ap: np.ndarray,
                  hbar: float) -> np.ndarray:
    """Z+ psi = J(-i hbar grad psi - A psi) = (-i hbar psi_p - A_p psi, i hbar psi_q + A_q psi)."""
    zq = -1j * hbar * gradient[1] - ap * values
    zp = 1j * hbar * gradient[0] + aq * values
    return np.stack([zq, zp])


def z_minus_arrays(values: np.ndarray, gradient: np.ndarray, aq: np.ndarray, ap: np.ndarray,
                   hbar: float) -> np.ndarray:
    """Z- F = J(i hbar grad F - A F)."""
    zq = 1j * hbar * gradient[1] - ap * values
    zp = -1j * hbar * gradient[0] + aq * values
    return np.stack([zq, zp])


def _field_gradient(psi: HybridField) -> np.ndarray:
    g = psi.grid
    return np.stack([d_q(psi.values, g), d_p(psi.values, g)])


def apply_z_plus(psi: HybridField, g: GaugePotential, hbar: float = 1.0,
                 grid: Optional[PhaseSpaceGrid] = None) -> tuple[HybridField, HybridField]:
    """Return (Z+^q psi, Z+^p psi), componentwise over the quantum index."""
    if grid is not None:
        require_same_grid(grid, psi.grid)
    q, p = psi.grid.mesh
    aq, ap = g(q, p)
    out = z_plus_arrays(psi.values, _field_gradient(psi), aq, ap, hbar)
    return HybridField(psi.grid, out[0]), HybridField(psi.grid, out[1])


def apply_z_minus(f: HybridField, g: GaugePotential, hbar: float = 1.0,
                  grid: Optional[PhaseSpaceGrid] = None) -> tuple[HybridField, HybridField]:
    if grid is not None:
        require_same_grid(grid, f.grid)
    q, p = f.grid.mesh
    aq, ap = g(q, p)
    out = z_minus_arrays(f.values, _field_gradient(f), aq, ap, hbar)
    return HybridField(f.grid, out[0]), HybridField(f.grid, out[1])


def phase_array(value: np.ndarray, gradient, g: GaugePotential, q, p) -> np.ndarray:
    """phi = H + grad H . JA, for H given by its value and analytic gradient."""
    jq, jp = g.ja(q, p)
    return value + gradient[0] * jq + gradient[1] * jp


def phase_function(H, g: GaugePotential, grid: PhaseSpaceGrid) -> ScalarField:
    """Scalar multiplier of the KvH equation, iħ∂tΨ = iħ{H,Ψ} + φΨ.

    ``H`` is any term exposing ``value(q, p)`` and ``gradient(q, p)``.
    """
    q, p = grid.mesh
    return ScalarField(grid, phase_array(H.value(q, p), H.gradient(q, p), g, q, p))


# ---------------------------------------------------------------------------
# gauge changes between the two built-in gauges

def gauge_change(source: GaugePotential, target: GaugePotential):
    """(theta, grad theta) callables with A_target - A_source = grad theta.

    A state transforms as psi -> exp(i theta / hbar) psi, which leaves every
    density and expectation unchanged.
    """
    kinds = (source.kind, target.kind)
    if GaugeKind.CUSTOM in kinds:
        raise GaugeError("gauge changes are only tabulated for the liouville and harmonic gauges")
    sign = {(GaugeKind.HARMONIC, GaugeKind.LIOUVILLE): 0.5,
            (GaugeKind.LIOUVILLE, GaugeKind.HARMONIC): -0.5}.get(kinds, 0.0)

    def theta(q, p):
        return sign * np.asarray(q) * np.asarray(p)

    def dtheta(q, p):
        q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
        return np.stack([sign * p, sign * q])

    return theta, dtheta


class GaugeShifted:
    """Closed form exp(i theta / hbar) * base with the product-rule gradient."""

    def __init__(self, base, theta, dtheta, hbar: float = 1.0):
        self.base, self.theta, self.dtheta, self.hbar = base, theta, dtheta, float(hbar)
        self.n = base.n

    def values(self, q, p):
        return np.exp(1j * self.theta(q, p) / self.hbar) * self.base.values(q, p)

    def gradient(self, q, p):
        ph = np.exp(1j * self.theta(q, p) / self.hbar)
        v, g = self.base.values(q, p), self.base.gradient(q, p)
        dt = self.dtheta(q, p)
        return ph * (g + (1j / self.hbar) * dt[:, None] * v[None])


def regauge(psi: HybridField, source: GaugePotential, target: GaugePotential, hbar: float = 1.0) -> HybridField:
    """Express ``psi`` (given in ``source``) in the ``target`` gauge."""
    theta, dtheta = gauge_change(source, target)
    if psi.analytic is not None:
        return HybridField.from_analytic(psi.grid, GaugeShifted(psi.analytic, theta, dtheta, hbar))
    q, p = psi.grid.mesh
    return HybridField(psi.grid, np.exp(1j * theta(q, p) / hbar) * psi.values)
