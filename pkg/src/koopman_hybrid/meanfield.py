"""Mean-field closure Upsilon = Psi(z) psi.

The classical factor follows KvH dynamics with H_eff(z) = <psi|H(z) psi>; the
quantum factor is driven by the n x n generator G = int Psi^* L_H Psi.
Both factors share a single RK4 clock.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauge import GaugeKind, GaugePotential
from .hybrid import HybridHamiltonian
from .kvh import CFLError, cfl_bound, clebsch_density, inner, phase_array
from .phase_space import PhaseSpaceGrid, ScalarField, d_p, d_q, quad


@dataclass(frozen=True, eq=False)
class MeanFieldState:
    Psi: ScalarField
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=complex).reshape(-1)
        object.__setattr__(self, "psi", psi)

    @property
    def grid(self) -> PhaseSpaceGrid:
        return self.Psi.grid

    def quantum_density(self) -> np.ndarray:
        return np.outer(self.psi, np.conj(self.psi))

    def norms(self) -> tuple[float, float]:
        return float(np.real(quad(np.abs(self.Psi.values) ** 2, self.grid))), float(np.vdot(self.psi, self.psi).real)


class MeanFieldSystem:
    """Coefficient fields of every (term, matrix) pair, precomputed on the grid."""

    def __init__(self, H: HybridHamiltonian, g: GaugePotential, grid: PhaseSpaceGrid, hbar: float = 1.0,
                 cfl_safety: float = 0.5):
        self.H, self.g, self.grid, self.hbar = H, g, grid, float(hbar)
        q, p = grid.mesh
        self.terms = []
        speed_q = speed_p = phimax = 0.0
        for term, M in H.terms():
            v, gr = term.on_grid(grid)
            if term.quadratic_homogeneous and g.kind is GaugeKind.HARMONIC:
                phi = None
            else:
                phi = phase_array(v, gr, g, q, p)
                phi = phi if np.any(phi) else None
            self.terms.append((gr[0], gr[1], phi, M))
            nrm = np.linalg.norm(M, 2)
            speed_q = speed_q + nrm * np.abs(gr[0])
            speed_p = speed_p + nrm * np.abs(gr[1])
            if phi is not None:
                phimax = phimax + nrm * np.abs(phi)
        vmax = float(np.max(np.hypot(speed_q, speed_p)))
        self.dt_max = cfl_bound(vmax, float(np.max(phimax)), grid, self.hbar, cfl_safety)

    def _pieces(self, Psi: np.ndarray):
        """Per-term i hbar {V, Psi} + phi Psi, i.e. L_V Psi."""
        dq, dp = d_q(Psi, self.grid), d_p(Psi, self.grid)
        out = []
        for vq, vp, phi, M in self.terms:
            lv = 1j * self.hbar * (vq * dp - vp * dq)
            if phi is not None:
                lv = lv + phi * Psi
            out.append((lv, M))
        return out

    def generator(self, Psi: np.ndarray, pieces=None) -> np.ndarray:
        """G = int Psi^* L_H Psi as an n x n matrix."""
        pieces = pieces if pieces is not None else self._pieces(Psi)
        G = np.zeros((self.H.n, self.H.n), dtype=complex)
        for lv, M in pieces:
            G = G + M * inner(Psi, lv, self.grid)
        return G

    def effective_weights(self, psi: np.ndarray) -> list[float]:
        return [float(np.real(np.vdot(psi, M @ psi))) for _, _, _, M in self.terms]

    def rhs(self, Psi: np.ndarray, psi: np.ndarray):
        pieces = self._pieces(Psi)
        w = self.effective_weights(psi)
        dPsi = sum(wj * lv for wj, (lv, _) in zip(w, pieces))
        G = self.generator(Psi, pieces)
        return -(1j / self.hbar) * dPsi, -(1j / self.hbar) * (G @ psi)

    def energy(self, state: MeanFieldState) -> float:
        pieces = self._pieces(state.Psi.values)
        return float(np.real(np.vdot(state.psi, self.generator(state.Psi.values, pieces) @ state.psi)))

    def check_dt(self, dt: float) -> None:
        if dt < 0:
            raise CFLError("dt must be non-negative")
        if dt > self.dt_max:
            raise CFLError(f"dt={dt:.6g} exceeds the CFL bound {self.dt_max:.6g}")

    def step(self, state: MeanFieldState, dt: float) -> MeanFieldState:
        self.check_dt(dt)
        if dt == 0:
            return MeanFieldState(ScalarField(self.grid, state.Psi.values.copy()), state.psi.copy())
        Y, y = state.Psi.values.astype(complex), state.psi
        k1 = self.rhs(Y, y)
        k2 = self.rhs(Y + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1])
        k3 = self.rhs(Y + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1])
        k4 = self.rhs(Y + dt * k3[0], y + dt * k3[1])
        Y = Y + (dt / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y = y + (dt / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        return MeanFieldState(ScalarField(self.grid, Y), y)


def effective_hamiltonian_values(H: HybridHamiltonian, psi: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    """H_eff(z) = <psi|H(z) psi> sampled on the grid."""
    q, p = grid.mesh
    return np.real(np.einsum("a,ab...,b->...", np.conj(psi), H.matrix(q, p), psi))


def meanfield_rhs(state: MeanFieldState, H: HybridHamiltonian, g: GaugePotential, hbar: float = 1.0):
    """(dPsi/dt, dpsi/dt) of the mean-field closure."""
    if state.psi.size != H.n:
        raise ValueError(f"quantum factor has {state.psi.size} components, Hamiltonian is {H.n}x{H.n}")
    sys = MeanFieldSystem(H, g, state.grid, hbar)
    dPsi, dpsi = sys.rhs(state.Psi.values, state.psi)
    return ScalarField(state.grid, dPsi), dpsi


def step_meanfield_rk4(state: MeanFieldState, H: HybridHamiltonian, g: GaugePotential, dt: float,
                       hbar: float = 1.0) -> MeanFieldState:
    if state.psi.size != H.n:
        raise ValueError(f"quantum factor has {state.psi.size} components, Hamiltonian is {H.n}x{H.n}")
    return MeanFieldSystem(H, g, state.grid, hbar).step(state, dt)


@dataclass
class DensityResiduals:
    classical: float
    quantum: float


def density_equation_residuals(states, times, H: HybridHamiltonian, g: GaugePotential,
                               hbar: float = 1.0) -> DensityResiduals:
    """Centered differences of rho and psi psi^dagger against the mean-field density equations.

    d_t rho = {Tr(rho_hat H), rho} and i hbar d_t rho_hat = [int rho H, rho_hat],
    evaluated at the middle of three equally spaced states.
    """
    if len(states) != 3:
        raise ValueError("need exactly three equally spaced states")
    dt = times[1] - times[0]
    if not np.isclose(times[2] - times[1], dt, rtol=1e-9, atol=0):
        raise ValueError("states must be equally spaced in time")
    grid = states[0].grid
    q, p = grid.mesh
    rhos = [clebsch_density(s.Psi, g, hbar).values for s in states]
    rhats = [s.quantum_density() for s in states]
    mid = states[1]
    # analytic gradient of H_eff; rho is differentiated spectrally
    gh = np.real(np.einsum("a,kab...,b->k...", np.conj(mid.psi), H.gradient(q, p), mid.psi))
    rho = rhos[1]
    br = gh[0] * d_p(rho, grid) - gh[1] * d_q(rho, grid)
    fd = (rhos[2] - rhos[0]) / (2 * dt)
    Hint = quad(H.matrix(q, p) * rho, grid)
    comm = Hint @ rhats[1] - rhats[1] @ Hint
    fdq = (rhats[2] - rhats[0]) / (2 * dt)
    return DensityResiduals(float(np.max(np.abs(fd - br))),
                            float(np.max(np.abs(1j * hbar * fdq - comm))))
