"""Invariant checks for a configured model (used by ``khs verify``)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exact import GaussianPacket, exact_quantum_density, hybrid_exact
from .gauge import harmonic, regauge
from .hybrid import apply_hybrid_liouvillian, bloch_vector, classical_density, hybrid_density, purity
from .kvh import inner
from .phase_space import HybridField, quad


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool


def _check(name, value, tol, lower=False) -> CheckResult:
    ok = bool(value >= tol) if lower else bool(value <= tol)
    return CheckResult(name, float(value), float(tol), ok)


def random_packets(setup, count: int, seed: int):
    """Gaussian packets placed within a few thermal widths, random spinors and momenta."""
    rng = np.random.default_rng(seed)
    P = setup.params
    out = []
    for _ in range(count):
        q0, p0 = rng.uniform(-2, 2) * P.sigma_q, rng.uniform(-2, 2) * P.sigma_p
        # packet width in units of the thermal width; the grid is isotropic in those units
        w = rng.uniform(1.5, 2.5)
        spinor = rng.normal(size=2) + 1j * rng.normal(size=2)
        spinor /= np.linalg.norm(spinor)
        scale_q, scale_p = P.sigma_q, P.sigma_p
        base = GaussianPacket(q0 / scale_q, p0 / scale_p, w, spinor, kq=rng.uniform(-0.5, 0.5))
        out.append(HybridField.from_analytic(setup.grid, _Scaled(base, scale_q, scale_p)))
    return out


class _Scaled:
    """base(q / sq, p / sp) renormalized to unit norm."""

    def __init__(self, base, sq, sp):
        self.base, self.sq, self.sp, self.n = base, sq, sp, base.n
        self.c = 1.0 / np.sqrt(sq * sp)

    def values(self, q, p):
        return self.c * self.base.values(np.asarray(q) / self.sq, np.asarray(p) / self.sp)

    def gradient(self, q, p):
        g = self.base.gradient(np.asarray(q) / self.sq, np.asarray(p) / self.sp)
        return self.c * np.stack([g[0] / self.sq, g[1] / self.sp])


def run_checks(setup, n_times: int = 100) -> list[CheckResult]:
    P, grid, g, H = setup.params, setup.grid, setup.gauge, setup.H
    cfg = setup.cfg
    res = []

    pk = random_packets(setup, 4, cfg.seed)
    herm = 0.0
    for a, b in zip(pk[:-1], pk[1:]):
        la = apply_hybrid_liouvillian(H, g, a, P.hbar).values
        lb = apply_hybrid_liouvillian(H, g, b, P.hbar).values
        herm = max(herm, abs(inner(a.values, lb, grid) - inner(la, b.values, grid)))
    res.append(_check("liouvillian_hermitian", herm, 1e-10))

    u0 = setup.upsilon0
    D1 = hybrid_density(u0, g, P.hbar, form="divergence")
    D2 = hybrid_density(u0, g, P.hbar, form="expanded")
    scale = np.max(np.abs(D1.values))
    res.append(_check("density_two_forms", np.max(np.abs(D1.values - D2.values)) / scale, 1e-10))
    res.append(_check("trace_equals_clebsch",
                      np.max(np.abs(D1.trace().values - classical_density(u0, g, P.hbar).values)), 0.0))
    if setup.state0.taper is None:
        q, p = grid.mesh
        ref = setup.state0.density(q, p)
        mask = ref > 1e-6 * ref.max()
        err = np.max(np.abs(D1.trace().values - ref)[mask]) / ref.max()
        res.append(_check("initial_boltzmann_density", err, 1e-8))

    times = np.linspace(0.0, min(cfg.t_final, 10.0), n_times)
    rhos = [exact_quantum_density(P, t, setup.state0) for t in times]
    norms = np.array([np.trace(r).real for r in rhos])
    res.append(_check("initial_purity", abs(purity(rhos[0] / norms[0]) - 1.0), 1e-10))
    res.append(_check("norm_drift", np.max(np.abs(norms - norms[0])), 1e-9))
    mins = [np.linalg.eigvalsh(r)[0] for r in rhos]
    res.append(_check("quantum_density_psd", max(0.0, -min(mins)), 1e-10))
    if P.alpha[1] == 0 and P.alpha[2] == 0:
        nx = max(abs(bloch_vector(r / np.trace(r).real)[0]) for r in rhos)
        res.append(_check("bloch_yz_confinement", nx, 1e-8))

    energies, rmin = [], 0.0
    base = HybridField.from_analytic(grid, setup.state0)
    for t in times[:: max(1, n_times // 20)]:
        u = hybrid_exact(P, base, t)
        if g.kind != harmonic().kind:
            u = regauge(u, harmonic(), g, P.hbar)
        D = hybrid_density(u, g, P.hbar)
        q, p = grid.mesh
        energies.append(np.real(quad(np.einsum("ab...,ba...->...", H.matrix(q, p), D.values), grid)))
        rho = D.trace().values
        rmin = min(rmin, rho.min() / rho.max())
    res.append(_check("energy_drift", np.max(np.abs(np.array(energies) - energies[0])), 1e-8))
    res.append(_check("classical_density_sign", -rmin, 1e-6))
    return res
