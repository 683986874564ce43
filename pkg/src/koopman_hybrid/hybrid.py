"""Hybrid classical-quantum dynamics for an n-level quantum factor.

The hybrid wavefunction Upsilon(z) is an n-vector per phase-space point and
evolves by i hbar d_t Upsilon = H Upsilon - grad H . Z+ Upsilon, where the
Hamiltonian is a scalar term plus (function x constant Hermitian matrix)
couplings.  The hybrid density

    D(z) = Upsilon Upsilon^dagger + div(Upsilon Z- Upsilon^dagger)

has the classical density as its trace and the quantum density matrix as its
phase-space integral.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gauge import GaugeKind, GaugePotential, harmonic, z_minus_arrays
from .kvh import (CFLError, HamiltonianError, HamiltonianTerm, KvHStepper, apply_covariant_liouvillian,
                  cfl_bound, clebsch_arrays, clebsch_density, gradient_of, inner, linear_combination,
                  liouvillian_arrays, phase_array, propagate_characteristics, rk4)
from .phase_space import (HybridField, PhaseSpaceGrid, ScalarField, d_p, d_q, dealias, div, quad,
                          require_same_grid)

HERMITIAN_TOL = 1e-12


# ---------------------------------------------------------------------------
# Hamiltonian

@dataclass(frozen=True, eq=False)
class HybridHamiltonian:
    """H(z) = scalar(z) * I + sum_j V_j(z) M_j with constant Hermitian M_j."""

    scalar: HamiltonianTerm
    couplings: tuple = ()
    n: int = 2

    def __post_init__(self):
        cs = []
        for V, M in self.couplings:
            M = np.asarray(M, dtype=complex)
            if M.shape != (self.n, self.n):
                raise HamiltonianError(f"coupling matrix has shape {M.shape}, expected ({self.n}, {self.n})")
            if np.max(np.abs(M - M.conj().T)) > HERMITIAN_TOL:
                raise HamiltonianError("coupling matrix is not Hermitian")
            cs.append((V, M))
        object.__setattr__(self, "couplings", tuple(cs))

    @classmethod
    def scalar_only(cls, H: HamiltonianTerm, n: int = 1) -> "HybridHamiltonian":
        return cls(H, (), n)

    @property
    def live_couplings(self):
        return [(V, M) for V, M in self.couplings if np.any(M != 0)]

    @property
    def is_scalar(self) -> bool:
        return not self.live_couplings

    def terms(self):
        """(term, matrix) pairs including the scalar part with the identity."""
        return [(self.scalar, np.eye(self.n, dtype=complex))] + self.live_couplings

    @property
    def is_scalar_plus_single_coupling(self) -> bool:
        live = self.live_couplings
        if self.n != 2 or len(live) != 1:
            return False
        V, M = live[0]
        if abs(np.trace(M)) > HERMITIAN_TOL:
            return False
        probe = np.array([0.3, -0.7, 1.1]), np.array([-0.4, 0.2, 0.9])
        return bool(np.all(np.asarray(V.gradient(*probe)[1]) == 0.0))

    @property
    def alpha(self) -> np.ndarray:
        """Pauli components of the single coupling matrix."""
        from .exact import SIGMA
        if not self.is_scalar_plus_single_coupling:
            raise HamiltonianError("Hamiltonian is not of the form H0 + V(q) alpha.sigma")
        M = self.live_couplings[0][1]
        return np.array([np.trace(s @ M).real / 2 for s in SIGMA])

    # sampled arrays ------------------------------------------------------

    def matrix(self, q, p) -> np.ndarray:
        shape = np.broadcast(q, p).shape
        out = np.zeros((self.n, self.n) + shape, dtype=complex)
        for term, M in self.terms():
            v = np.broadcast_to(np.asarray(term.value(q, p), float), shape)
            out += M[:, :, None, None].reshape((self.n, self.n) + (1,) * len(shape)) * v
        return out

    def gradient(self, q, p) -> np.ndarray:
        shape = np.broadcast(q, p).shape
        out = np.zeros((2, self.n, self.n) + shape, dtype=complex)
        for term, M in self.terms():
            g = term.gradient(q, p)
            Mb = M.reshape((self.n, self.n) + (1,) * len(shape))
            for k in range(2):
                out[k] += Mb * np.broadcast_to(np.asarray(g[k], float), shape)
        return out

    def hessian(self, q, p) -> np.ndarray:
        """(H_qq, H_qp, H_pp) stacked, each (n, n, ...)."""
        shape = np.broadcast(q, p).shape
        out = np.zeros((3, self.n, self.n) + shape, dtype=complex)
        for term, M in self.terms():
            if term.hessian is None:
                raise HamiltonianError(f"term {term.name} has no analytic Hessian")
            h = term.hessian(q, p)
            Mb = M.reshape((self.n, self.n) + (1,) * len(shape))
            for k in range(3):
                out[k] += Mb * np.broadcast_to(np.asarray(h[k], float), shape)
        return out


@dataclass(frozen=True, eq=False)
class HybridDensityField:
    grid: PhaseSpaceGrid
    values: np.ndarray      # (n, n, nq, np)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def trace(self) -> ScalarField:
        return ScalarField(self.grid, np.real(np.einsum("aa...->...", self.values)))

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.values - np.conj(np.swapaxes(self.values, 0, 1)))))

    def integral(self) -> np.ndarray:
        return quad(self.values, self.grid)


def _mat(M, ndim):
    return M.reshape(M.shape + (1,) * ndim)


def _mix(M: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Apply a constant matrix to the component axis of (n, ...) arrays."""
    if np.all(M.imag == 0) and np.isrealobj(vals):
        M = M.real
    return np.einsum("ab,b...->a...", M, vals)


# ---------------------------------------------------------------------------
# Liouvillian

def apply_hybrid_liouvillian(H: HybridHamiltonian, g: GaugePotential, ups: HybridField,
                             hbar: float = 1.0, form: str = "bracket",
                             derivatives: str = "spectral") -> HybridField:
    """L_H Upsilon = H Upsilon - grad H . Z+ Upsilon."""
    if ups.n != H.n:
        raise ValueError(f"field has {ups.n} components but the Hamiltonian is {H.n}x{H.n}")
    grid = ups.grid
    if ups.n == 1 and H.is_scalar and derivatives == "spectral":
        res = apply_covariant_liouvillian(H.scalar, g, ScalarField(grid, ups.values[0]), hbar, form)
        return HybridField(grid, res.values[None])
    q, p = grid.mesh
    aq, ap = g(q, p)
    dv = gradient_of(ups, derivatives)
    out = None
    for term, M in H.terms():
        hv, hg = term.on_grid(grid)
        piece = liouvillian_arrays(hv, hg, aq, ap, ups.values, dv, hbar, form)
        piece = piece if M is None or np.array_equal(M, np.eye(H.n)) else _mix(M, piece)
        out = piece if out is None else out + piece
    return HybridField(grid, out)


# ---------------------------------------------------------------------------
# densities

def _density_arrays(vals, dvals, g, q, p, hbar, form, grid, spectral):
    n = vals.shape[0]
    aq, ap = g(q, p)
    jq, jp = ap, -aq
    divja = g.curl(q, p)
    out = np.empty((n, n) + vals.shape[1:], dtype=complex)
    for a in range(n):
        out[a, a] = np.real(clebsch_arrays(vals[a], dvals[:, a], g, q, p, hbar, form, grid, spectral))
        for b in range(n):
            if a == b:
                continue
            ya, yb = vals[a], np.conj(vals[b])
            da, db = dvals[:, a], np.conj(dvals[:, b])
            P = ya * yb
            if form == "divergence":
                zm = z_minus_arrays(yb, db, aq, ap, hbar)
                if spectral:
                    out[a, b] = P + div(ya * zm[0], ya * zm[1], grid)
                else:
                    dz = -divja * yb - (jq * db[0] + jp * db[1])
                    out[a, b] = P + da[0] * zm[0] + da[1] * zm[1] + ya * dz
            elif form == "expanded":
                br = da[0] * db[1] - da[1] * db[0]        # {Upsilon_a, Upsilon_b^*}
                if spectral:
                    djp = div(jq * P, jp * P, grid)
                else:
                    gP = da * yb + ya * db
                    djp = divja * P + jq * gP[0] + jp * gP[1]
                out[a, b] = P - djp + 1j * hbar * br
            else:
                raise ValueError(f"unknown form {form!r}")
    return out


def _uses_analytic(ups, derivatives):
    return getattr(ups, "analytic", None) is not None and derivatives in ("auto", "analytic")


def hybrid_density(ups: HybridField, g: GaugePotential, hbar: float = 1.0, form: str = "divergence",
                   derivatives: str = "auto") -> HybridDensityField:
    """D = Upsilon Upsilon^dagger + div(Upsilon Z- Upsilon^dagger).

    ``form='expanded'`` evaluates Upsilon Upsilon^dagger - div(JA Upsilon Upsilon^dagger)
    + i hbar {Upsilon, Upsilon^dagger}.  Diagonal entries are stored real.
    """
    grid = ups.grid
    q, p = grid.mesh
    dv = gradient_of(ups, derivatives)
    vals = _density_arrays(ups.values, dv, g, q, p, hbar, form, grid, not _uses_analytic(ups, derivatives))
    return HybridDensityField(grid, vals)


def quantum_density(ups: HybridField) -> np.ndarray:
    """rho_hat = integral of Upsilon Upsilon^dagger (grid quadrature)."""
    v = ups.values
    n = v.shape[0]
    rho = np.empty((n, n), dtype=complex)
    for a in range(n):
        for b in range(a, n):
            rho[a, b] = complex(quad(v[a] * np.conj(v[b]), ups.grid))
            rho[b, a] = np.conj(rho[a, b])
    return rho


def classical_density(ups: HybridField, g: GaugePotential, hbar: float = 1.0,
                      derivatives: str = "auto") -> ScalarField:
    """rho = Tr D, i.e. the sum of the component Clebsch densities."""
    return clebsch_density(ups, g, hbar, derivatives=derivatives)


def check_density_matrix(rho: np.ndarray, tol: float = 1e-10) -> None:
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density matrix is not Hermitian")


def purity(rho: np.ndarray) -> float:
    """Tr(rho^2) (no normalization applied)."""
    check_density_matrix(rho)
    return float(np.real(np.trace(rho @ rho)))


def bloch_vector(rho: np.ndarray) -> np.ndarray:
    """n_k = Tr(sigma_k rho) for a 2x2 density matrix."""
    rho = np.asarray(rho)
    if rho.shape != (2, 2):
        raise ValueError("Bloch vector is defined for two-level systems only")
    check_density_matrix(rho)
    return np.array([2 * rho[0, 1].real, -2 * rho[0, 1].imag, (rho[0, 0] - rho[1, 1]).real])


def eigenvalues_2x2(D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (min, max) eigenvalues of a Hermitian 2x2 matrix field (2, 2, ...)."""
    a, d = D[0, 0].real, D[1, 1].real
    half = 0.5 * (a + d)
    rad = np.sqrt((0.5 * (a - d)) ** 2 + np.abs(D[0, 1]) ** 2)
    return half - rad, half + rad


def min_eigenvalue(D: HybridDensityField) -> np.ndarray:
    if D.n == 2:
        return eigenvalues_2x2(D.values)[0]
    m = np.moveaxis(D.values, (0, 1), (-2, -1))
    return np.linalg.eigvalsh(m)[..., 0]


# ---------------------------------------------------------------------------
# expectations

def _check_observable(A: HybridHamiltonian):
    for _, M in A.couplings:
        if np.max(np.abs(M - M.conj().T)) > HERMITIAN_TOL:
            raise HamiltonianError("observable is not Hermitian")


def hybrid_expectation(A: HybridHamiltonian, ups: HybridField, g: GaugePotential, hbar: float = 1.0,
                       form: str = "liouvillian", derivatives: str = "spectral") -> float:
    """<A> = <Upsilon | L_A Upsilon> (``form='liouvillian'``) or Tr int A D (``'density'``)."""
    _check_observable(A)
    if form == "liouvillian":
        la = apply_hybrid_liouvillian(A, g, ups, hbar, derivatives=derivatives)
        return inner(ups.values, la.values, ups.grid).real
    if form == "density":
        D = hybrid_density(ups, g, hbar, derivatives=derivatives)
        q, p = ups.grid.mesh
        AM = A.matrix(q, p)
        return float(np.real(quad(np.einsum("ab...,ba...->...", AM, D.values), ups.grid)))
    raise ValueError(f"unknown form {form!r}")


def commutator_rate(A: HybridHamiltonian, H: HybridHamiltonian, ups: HybridField, g: GaugePotential,
                    hbar: float = 1.0) -> float:
    """(1/i hbar) <Upsilon | [L_A, L_H] Upsilon>, the predicted d<A>/dt."""
    la = apply_hybrid_liouvillian(A, g, ups, hbar)
    lh = apply_hybrid_liouvillian(H, g, ups, hbar)
    lalh = apply_hybrid_liouvillian(A, g, lh, hbar)
    lhla = apply_hybrid_liouvillian(H, g, la, hbar)
    return float(np.real(inner(ups.values, lalh.values - lhla.values, ups.grid) / (1j * hbar)))


# ---------------------------------------------------------------------------
# time stepping

class HybridStepper:
    """RK4 for d_t Upsilon = -(i/hbar) L_H Upsilon with precomputed coefficient fields.

    A purely scalar Hamiltonian is stepped componentwise with the scalar KvH
    stepper (identically zero components are skipped).
    """

    def __init__(self, H: HybridHamiltonian, g: GaugePotential, grid: PhaseSpaceGrid,
                 hbar: float = 1.0, cfl_safety: float = 0.5):
        self.H, self.grid, self.hbar = H, grid, float(hbar)
        self.scalar_stepper = KvHStepper(H.scalar, g, grid, hbar, cfl_safety)
        q, p = grid.mesh
        self.terms = []
        speed_q = np.abs(self.scalar_stepper.hq)
        speed_p = np.abs(self.scalar_stepper.hp)
        phimax = 0.0 if self.scalar_stepper.phi is None else np.abs(self.scalar_stepper.phi)
        for V, M in H.live_couplings:
            vv, vg = V.on_grid(grid)
            if V.quadratic_homogeneous and g.kind is GaugeKind.HARMONIC:
                phi = None
            else:
                phi = phase_array(vv, vg, g, q, p)
                phi = phi if np.any(phi) else None
            Mr = M.real if np.all(M.imag == 0) else M
            self.terms.append((vg[0], vg[1], phi, Mr))
            norm = np.linalg.norm(M, 2)
            speed_q = speed_q + norm * np.abs(vg[0])
            speed_p = speed_p + norm * np.abs(vg[1])
            if phi is not None:
                phimax = phimax + norm * np.abs(phi)
        self.real_ok = (self.scalar_stepper.phi is None
                        and all(t[2] is None and np.isrealobj(t[3]) for t in self.terms))
        vmax = float(np.max(np.hypot(speed_q, speed_p)))
        self.dt_max = cfl_bound(vmax, float(np.max(phimax)), grid, self.hbar, cfl_safety)

    def rhs(self, y: np.ndarray) -> np.ndarray:
        dq, dp = d_q(y, self.grid), d_p(y, self.grid)
        s = self.scalar_stepper
        out = s.hq * dp - s.hp * dq
        if s.phi is not None:
            out = out - (1j / self.hbar) * (s.phi * y)
        for vq, vp, phi, M in self.terms:
            b = vq * dp - vp * dq
            if phi is not None:
                b = b - (1j / self.hbar) * (phi * y)
            out = out + np.einsum("ab,b...->a...", M, b)
        return out

    def check_dt(self, dt: float) -> None:
        if dt < 0:
            raise CFLError("dt must be non-negative")
        if dt > self.dt_max:
            raise CFLError(f"dt={dt:.6g} exceeds the CFL bound {self.dt_max:.6g}")

    def _prepare(self, y):
        if not self.real_ok and np.isrealobj(y):
            return y.astype(complex)
        return y

    def step(self, y: np.ndarray, dt: float) -> np.ndarray:
        self.check_dt(dt)
        if dt == 0:
            return y.copy()
        if self.H.is_scalar:
            out = y.copy()
            for a in range(y.shape[0]):
                if np.any(y[a]):
                    out[a] = self.scalar_stepper.step(y[a], dt)
            return out
        return rk4(self.rhs, self._prepare(y), dt)

    def run(self, y: np.ndarray, dt: float, nsteps: int, callback=None, every: int = 1) -> np.ndarray:
        self.check_dt(dt)
        if self.H.is_scalar:
            live = [a for a in range(y.shape[0]) if np.any(y[a])]
            y = y.copy()
            state = {a: y[a] for a in live}
            for k in range(1, nsteps + 1):
                for a in live:
                    state[a] = rk4(self.scalar_stepper.rhs, state[a], dt)
                if callback is not None and k % every == 0:
                    cur = y.copy() if not live else np.stack(
                        [state[a] if a in state else y[a] for a in range(y.shape[0])])
                    callback(k, cur)
            return np.stack([state[a] if a in state else y[a] for a in range(y.shape[0])]) if live else y
        y = self._prepare(y)
        for k in range(1, nsteps + 1):
            y = rk4(self.rhs, y, dt)
            if callback is not None and k % every == 0:
                callback(k, y)
        return y


def step_rk4_hybrid(H: HybridHamiltonian, g: GaugePotential, ups: HybridField, dt: float,
                    hbar: float = 1.0, cfl_safety: float = 0.5) -> HybridField:
    stepper = HybridStepper(H, g, ups.grid, hbar, cfl_safety)
    out = stepper.step(ups.values, dt)
    return HybridField(ups.grid, out.astype(complex) if np.isrealobj(out) else out)


# ---------------------------------------------------------------------------
# branch decomposition

class _Mixed:
    """Closed form U . base."""

    def __init__(self, base, U):
        self.base, self.U, self.n = base, np.asarray(U), np.asarray(U).shape[0]

    def values(self, q, p):
        return np.einsum("ab,b...->a...", self.U, self.base.values(q, p))

    def gradient(self, q, p):
        return np.einsum("ab,kb...->ka...", self.U, self.base.gradient(q, p))


class _Component:
    n = 1

    def __init__(self, base, index):
        self.base, self.index = base, index

    def values(self, q, p):
        return self.base.values(q, p)[self.index:self.index + 1]

    def gradient(self, q, p):
        return self.base.gradient(q, p)[:, self.index:self.index + 1]


class _Stack:
    def __init__(self, parts):
        self.parts, self.n = parts, len(parts)

    def values(self, q, p):
        return np.concatenate([s.values(q, p) for s in self.parts])

    def gradient(self, q, p):
        return np.concatenate([s.gradient(q, p) for s in self.parts], axis=1)


def branch_hamiltonians(H: HybridHamiltonian):
    """(U, H_+, H_-) for H = H0 + V(q) alpha.sigma."""
    from .exact import diagonalize_coupling
    if not H.is_scalar_plus_single_coupling:
        raise HamiltonianError("branch propagation needs H = H0 + V(q) alpha.sigma with n = 2")
    diag = diagonalize_coupling(H.alpha)
    V = H.live_couplings[0][0]
    Hp = linear_combination([H.scalar, V], [1.0, diag.lam], name="H+")
    Hm = linear_combination([H.scalar, V], [1.0, -diag.lam], name="H-")
    return diag.U, Hp, Hm


def branch_propagate(H: HybridHamiltonian, ups: HybridField, t: float, hbar: float = 1.0,
                     g: Optional[GaugePotential] = None, dt: Optional[float] = None) -> HybridField:
    """Rotate into the coupling eigenbasis, evolve each branch as a scalar KvH field, rotate back.

    Quadratic branch Hamiltonians in the harmonic gauge use exact characteristics;
    otherwise RK4 with step ``dt``.
    """
    g = g or harmonic()
    U, Hp, Hm = branch_hamiltonians(H)
    if t == 0:
        return ups
    grid = ups.grid
    exact_path = g.kind is GaugeKind.HARMONIC and Hp.quadratic_homogeneous and Hm.quadratic_homogeneous
    if exact_path and ups.analytic is not None:
        mixed = _Mixed(ups.analytic, U)
        parts = []
        for a, Hb in enumerate((Hp, Hm)):
            comp = HybridField.from_analytic(grid, _Component(mixed, a))
            parts.append(propagate_characteristics(Hb, g, comp, t, hbar).analytic)
        return HybridField.from_analytic(grid, _Mixed(_Stack(parts), np.conj(U).T))
    y = _mix(U, ups.values)
    out = np.empty(y.shape, dtype=complex)
    for a, Hb in enumerate((Hp, Hm)):
        comp = ScalarField(grid, y[a])
        if exact_path:
            out[a] = propagate_characteristics(Hb, g, comp, t, hbar).values
        else:
            if dt is None:
                raise ValueError("non-quadratic branches need an RK4 step dt")
            stepper = KvHStepper(Hb, g, grid, hbar)
            nsteps = int(round(t / dt))
            out[a] = stepper.run(comp.values, t / nsteps, nsteps)
    return HybridField(grid, _mix(np.conj(U).T, out))


# ---------------------------------------------------------------------------
# D evolution and AG right-hand sides

def _sgrad(x: np.ndarray, grid: PhaseSpaceGrid, dealias_products: bool) -> np.ndarray:
    if dealias_products:
        x = dealias(x, grid)
    return np.stack([d_q(x, grid), d_p(x, grid)])


def _mbracket(gA: np.ndarray, gB: np.ndarray) -> np.ndarray:
    """Matrix bracket {A, B}_ab = sum_c {A_ac, B_cb} from stacked gradients."""
    return (np.einsum("ac...,cb...->ab...", gA[0], gB[1])
            - np.einsum("ac...,cb...->ab...", gA[1], gB[0]))


def _comm(A, B):
    return np.einsum("ac...,cb...->ab...", A, B) - np.einsum("ac...,cb...->ab...", B, A)


@dataclass
class DEvolution:
    groups: dict
    total: np.ndarray
    grid: PhaseSpaceGrid = field(repr=False)

    def field(self) -> HybridDensityField:
        return HybridDensityField(self.grid, self.total)


def d_evolution_rhs(ups: HybridField, H: HybridHamiltonian, g: GaugePotential, hbar: float = 1.0,
                    dealias_products: bool = True, derivatives: str = "auto") -> DEvolution:
    """d_t D written through Upsilon, evaluated group by group.

    Groups (summed over the repeated index c and the phase-space index i;
    P = Upsilon Upsilon^dagger, B = {Upsilon, Upsilon^dagger}, K = JA . grad H):

    1. -(i/hbar) [H, D]
    2. {H, D} - {D, H}
    3. {JA_i P, d_i H} - {d_i H, JA_i P}
    4. (i/hbar) d_i [K, JA_i P] + [K, B]
    5. d_i ({H_ac, JA_i Upsilon*_b} Upsilon_c - {JA_i Upsilon_a, H_cb} Upsilon*_c)
    6. Upsilon_c {K_ac, Upsilon*_b} - {Upsilon_a, K_cb} Upsilon*_c
    7. -i hbar {Upsilon_c, {H_ac, Upsilon*_b}} + i hbar {{Upsilon_a, H_cb}, Upsilon*_c}
    """
    grid = ups.grid
    q, p = grid.mesh
    Y = ups.values
    Yc = np.conj(Y)
    dY = gradient_of(ups, derivatives)
    dYc = np.conj(dY)
    aq, ap = g(q, p)
    (aqq, aqp), (apq, app) = g.jacobian(q, p)
    ja = [ap, -aq]
    dja = [(apq, app), (-aqq, -aqp)]          # gradient of each JA component
    Hm = H.matrix(q, p)
    dH = H.gradient(q, p)
    hq, hp = dH[0], dH[1]
    hqq, hqp, hpp = H.hessian(q, p)
    dHq = np.stack([hqq, hqp])               # gradient of d_q H
    dHp = np.stack([hqp, hpp])
    sg = lambda x: _sgrad(x, grid, dealias_products)

    D = hybrid_density(ups, g, hbar, derivatives=derivatives).values
    P = np.einsum("a...,b...->ab...", Y, Yc)
    B = np.einsum("a...,b...->ab...", dY[0], dYc[1]) - np.einsum("a...,b...->ab...", dY[1], dYc[0])
    K = ap * hq - aq * hp
    dK = np.stack([apq * hq + ap * hqq - aqq * hp - aq * hqp,
                   app * hq + ap * hqp - aqp * hp - aq * hpp])

    groups = {}
    groups["commutator"] = -(1j / hbar) * _comm(Hm, D)
    dD = sg(D)
    groups["brackets"] = _mbracket(dH, dD) - _mbracket(dD, dH)

    g3 = 0
    for i, dHi in enumerate((dHq, dHp)):
        X = ja[i] * P
        dX = sg(X)
        g3 = g3 + _mbracket(dX, dHi) - _mbracket(dHi, dX)
    groups["gauge_brackets"] = g3

    g4 = _comm(K, B)
    for i in range(2):
        C = _comm(K, ja[i] * P)
        g4 = g4 + (1j / hbar) * sg(C)[i]
    groups["gauge_commutators"] = g4

    g5 = 0
    for i in range(2):
        # gradients of f_b = JA_i Upsilon*_b and e_a = JA_i Upsilon_a, taken analytically
        df = np.stack([dja[i][0] * Yc + ja[i] * dYc[0], dja[i][1] * Yc + ja[i] * dYc[1]])
        de = np.stack([dja[i][0] * Y + ja[i] * dY[0], dja[i][1] * Y + ja[i] * dY[1]])
        # {H_ac, f_b}
        br1 = (np.einsum("ac...,b...->acb...", hq, df[1]) - np.einsum("ac...,b...->acb...", hp, df[0]))
        # {e_a, H_cb}
        br2 = (np.einsum("a...,cb...->acb...", de[0], hp) - np.einsum("a...,cb...->acb...", de[1], hq))
        W = np.einsum("acb...,c...->ab...", br1, Y) - np.einsum("acb...,c...->ab...", br2, Yc)
        g5 = g5 + sg(W)[i]
    groups["gauge_divergence"] = g5

    # {K_ac, Upsilon*_b} and {Upsilon_a, K_cb}
    kb = np.einsum("ac...,b...->acb...", dK[0], dYc[1]) - np.einsum("ac...,b...->acb...", dK[1], dYc[0])
    yk = np.einsum("a...,cb...->acb...", dY[0], dK[1]) - np.einsum("a...,cb...->acb...", dY[1], dK[0])
    groups["gauge_transport"] = (np.einsum("c...,acb...->ab...", Y, kb)
                                 - np.einsum("acb...,c...->ab...", yk, Yc))

    E = np.einsum("ac...,b...->acb...", hq, dYc[1]) - np.einsum("ac...,b...->acb...", hp, dYc[0])
    F = np.einsum("a...,cb...->acb...", dY[0], hp) - np.einsum("a...,cb...->acb...", dY[1], hq)
    dE, dF = sg(E), sg(F)
    t1 = np.einsum("c...,acb...->ab...", dY[0], dE[1]) - np.einsum("c...,acb...->ab...", dY[1], dE[0])
    t2 = np.einsum("acb...,c...->ab...", dF[0], dYc[1]) - np.einsum("acb...,c...->ab...", dF[1], dYc[0])
    groups["double_brackets"] = -1j * hbar * t1 + 1j * hbar * t2

    total = sum(groups.values())
    return DEvolution(groups, total, grid)


def density_bilinear(x: np.ndarray, dx: np.ndarray, y: np.ndarray, dy: np.ndarray, g: GaugePotential,
                     grid: PhaseSpaceGrid, hbar: float) -> np.ndarray:
    """D(X, Y) = X Y^dagger + div(X Z- Y^dagger) (spectral divergence)."""
    q, p = grid.mesh
    aq, ap = g(q, p)
    yc, dyc = np.conj(y), np.conj(dy)
    zm = z_minus_arrays(yc, dyc, aq, ap, hbar)                 # (2, n, ...)
    out = np.einsum("a...,b...->ab...", x, yc)
    vq = np.einsum("a...,b...->ab...", x, zm[0])
    vp = np.einsum("a...,b...->ab...", x, zm[1])
    return out + div(vq, vp, grid)


def d_evolution_direct(ups: HybridField, H: HybridHamiltonian, g: GaugePotential,
                       hbar: float = 1.0) -> np.ndarray:
    """d_t D from the product rule on D(Upsilon, Upsilon) with d_t Upsilon = -(i/hbar) L_H Upsilon."""
    grid = ups.grid
    y = ups.values.astype(complex)
    dy = np.stack([d_q(y, grid), d_p(y, grid)])
    ydot = -(1j / hbar) * apply_hybrid_liouvillian(H, g, HybridField(grid, y), hbar).values
    dydot = np.stack([d_q(ydot, grid), d_p(ydot, grid)])
    return (density_bilinear(ydot, dydot, y, dy, g, grid, hbar)
            + density_bilinear(y, dy, ydot, dydot, g, grid, hbar))


def ag_rhs(D: HybridDensityField, H: HybridHamiltonian, hbar: float = 1.0,
           dealias_products: bool = False) -> HybridDensityField:
    """-(i/hbar)[H, D] + ({H, D} - {D, H})/2."""
    grid = D.grid
    q, p = grid.mesh
    Hm = H.matrix(q, p)
    dH = H.gradient(q, p)
    dD = _sgrad(D.values, grid, dealias_products)
    out = -(1j / hbar) * _comm(Hm, D.values) + 0.5 * (_mbracket(dH, dD) - _mbracket(dD, dH))
    return HybridDensityField(grid, out)


class AGStepper:
    """RK4 integration of the AG equation on the grid (verification only)."""

    def __init__(self, H: HybridHamiltonian, grid: PhaseSpaceGrid, hbar: float = 1.0):
        self.H, self.grid, self.hbar = H, grid, hbar

    def rhs(self, d: np.ndarray) -> np.ndarray:
        return ag_rhs(HybridDensityField(self.grid, d), self.H, self.hbar).values

    def run(self, d: np.ndarray, dt: float, nsteps: int) -> np.ndarray:
        d = d.astype(complex)
        for _ in range(nsteps):
            d = rk4(self.rhs, d, dt)
        return d


# ---------------------------------------------------------------------------
# partial traces

@dataclass
class PartialTraceReport:
    times: np.ndarray
    quantum_residuals: np.ndarray
    classical_residuals: np.ndarray
    classical_scale: float

    @property
    def quantum_max(self) -> float:
        return float(np.max(self.quantum_residuals))

    @property
    def classical_max(self) -> float:
        return float(np.max(self.classical_residuals))


def classical_trace_rhs(D: HybridDensityField, H: HybridHamiltonian) -> np.ndarray:
    """Tr{H, D} = sum_j {V_j, Tr(M_j D)} with analytic grad V_j."""
    grid = D.grid
    q, p = grid.mesh
    out = 0
    for term, M in H.terms():
        f = np.real(np.einsum("ab,ba...->...", M, D.values))
        gq, gp = term.gradient(q, p)
        out = out + gq * d_p(f, grid) - gp * d_q(f, grid)
    return out


def quantum_trace_rhs(D: HybridDensityField, H: HybridHamiltonian, hbar: float = 1.0) -> np.ndarray:
    """(1/i hbar) int [H, D]."""
    q, p = D.grid.mesh
    return quad(_comm(H.matrix(q, p), D.values), D.grid) / (1j * hbar)


def partial_trace_check(snapshots: Sequence[HybridField], times: Sequence[float], H: HybridHamiltonian,
                        g: GaugePotential, hbar: float = 1.0) -> PartialTraceReport:
    """Centered-difference d_t rho_hat and d_t rho against their trace equations."""
    if len(snapshots) < 3:
        raise ValueError("partial_trace_check needs at least 3 snapshots")
    times = np.asarray(times, dtype=float)
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        raise ValueError("snapshots must be equally spaced in time")
    dt = steps[0]
    require_same_grid(*[s.grid for s in snapshots])
    rhos = [quantum_density(s) for s in snapshots]
    cls = [classical_density(s, g, hbar).values for s in snapshots]
    qres, cres = [], []
    for k in range(1, len(snapshots) - 1):
        D = hybrid_density(snapshots[k], g, hbar)
        fd_q = (rhos[k + 1] - rhos[k - 1]) / (2 * dt)
        qres.append(np.max(np.abs(fd_q - quantum_trace_rhs(D, H, hbar))))
        fd_c = (cls[k + 1] - cls[k - 1]) / (2 * dt)
        cres.append(np.max(np.abs(fd_c - classical_trace_rhs(D, H))))
    scale = float(max(np.max(np.abs(c)) for c in cls))
    return PartialTraceReport(times[1:-1], np.array(qres), np.array(cres), scale)
