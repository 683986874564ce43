"""Closed-form solutions of the two-level system quadratically coupled to an oscillator.

Hamiltonian: H = H0 + (q^2/2) alpha.sigma with H0 = p^2/2m + m omega^2 q^2/2.
A unitary U with U (alpha.sigma) U^dagger = lambda sigma_3 splits the dynamics
into two oscillators of frequencies omega_pm = sqrt(omega^2 +- lambda/m).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate as sint
from scipy import special

from .phase_space import HybridField, PhaseSpaceGrid, ScalarField
from .kvh import interpolate_periodic, oscillator_backward_map

SIGMA = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)


class DegenerateCouplingError(ValueError):
    pass


class UnsupportedRegimeError(ValueError):
    pass


class UnresolvedGridError(ValueError):
    pass


@dataclass(frozen=True)
class ExactModelParams:
    m: float = 1.0
    omega: float = 1.0
    alpha: tuple = (0.95, 0.0, 0.0)
    beta: float = 1e5
    hbar: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.alpha) != 3:
            raise ValueError("alpha must have three components")
        for name in ("m", "omega", "beta", "hbar"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")

    @property
    def lam(self) -> float:
        return float(np.linalg.norm(self.alpha))

    @property
    def sigma_q(self) -> float:
        """Thermal width in q, 1/sqrt(beta m omega^2)."""
        return 1.0 / np.sqrt(self.beta * self.m * self.omega ** 2)

    @property
    def sigma_p(self) -> float:
        return np.sqrt(self.m / self.beta)

    def branch_frequencies(self) -> tuple[float, float]:
        return branch_frequencies(self)


def coupling_matrix(alpha: Sequence[float]) -> np.ndarray:
    return np.einsum("k,kab->ab", np.asarray(alpha, dtype=float), SIGMA)


def branch_frequencies(params: ExactModelParams) -> tuple[float, float]:
    shift = params.lam / params.m
    lo = params.omega ** 2 - shift
    if lo <= 0:
        raise UnsupportedRegimeError(
            f"omega^2 - lambda/m = {lo:.6g} <= 0: the slow branch is not oscillatory")
    return float(np.sqrt(params.omega ** 2 + shift)), float(np.sqrt(lo))


@dataclass(frozen=True)
class DiagonalizationResult:
    lam: float
    U: np.ndarray


def _canonical_row(v: np.ndarray) -> np.ndarray:
    k = int(np.flatnonzero(np.abs(v) > 1e-14)[0])
    return v * (abs(v[k]) / v[k])


def diagonalize_coupling(alpha: Sequence[float]) -> DiagonalizationResult:
    """U with U (alpha.sigma) U^dagger = lambda sigma_3, lambda = |alpha|.

    Row 0 is the conjugated +lambda eigenvector, row 1 the -lambda one; each
    row is rephased so its first nonzero entry is real positive.
    """
    a = np.asarray(alpha, dtype=float)
    lam = float(np.linalg.norm(a))
    if lam == 0.0:
        raise DegenerateCouplingError("alpha = 0: coupling is degenerate, use the uncoupled path")
    w, v = np.linalg.eigh(coupling_matrix(a))
    # eigh sorts ascending: column 1 is +lambda, column 0 is -lambda
    U = np.stack([_canonical_row(np.conj(v[:, 1])), _canonical_row(np.conj(v[:, 0]))])
    return DiagonalizationResult(lam, U)


def _branch_setup(params: ExactModelParams):
    """(U, (omega_+, omega_-)); the uncoupled case uses U = I and both frequencies omega."""
    if params.lam == 0.0:
        return np.eye(2, dtype=complex), (params.omega, params.omega)
    return diagonalize_coupling(params.alpha).U, branch_frequencies(params)


def branch_maps(params: ExactModelParams, t: float) -> list[np.ndarray]:
    """Backward characteristic matrices for the + and - branches."""
    _, freqs = _branch_setup(params)
    return [oscillator_backward_map(params.m, w, t) for w in freqs]


def model_hamiltonian(params: ExactModelParams):
    """The coupled Hamiltonian as a :class:`~koopman_hybrid.hybrid.HybridHamiltonian`."""
    from .hybrid import HybridHamiltonian
    from .kvh import HamiltonianTerm

    H0 = HamiltonianTerm.harmonic(params.m, params.omega)
    couplings = []
    if params.lam > 0:
        couplings.append((HamiltonianTerm.q_squared_half(), coupling_matrix(params.alpha)))
    return HybridHamiltonian(H0, couplings, n=2)


# ---------------------------------------------------------------------------
# thermal state

_U_SERIES = np.array([(-1) ** k * (k + 1) / factorial(k + 2) for k in range(30)])
_DU_SERIES = np.array([(-1) ** k * k * (k + 1) / factorial(k + 2) for k in range(1, 31)])


def thermal_u(s):
    """u(s) = (1 - (1 + s) e^{-s}) / s^2, with u(0) = 1/2."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = s < 1.0
    ss = s[small]
    out[small] = np.polynomial.polynomial.polyval(ss, _U_SERIES)
    sl = s[~small]
    out[~small] = (-np.expm1(-sl) - sl * np.exp(-sl)) / sl ** 2
    return out


def thermal_du(s):
    """u'(s) = (e^{-s} - 2u(s)) / s."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = s < 1.0
    out[small] = np.polynomial.polynomial.polyval(s[small], _DU_SERIES)
    sl = s[~small]
    out[~small] = (np.exp(-sl) - 2.0 * thermal_u(sl)) / sl
    return out


@dataclass(frozen=True)
class RadialTaper:
    """Analytic radial window: erfc step from 1 near radius r0 to 0 near r1 (radii in thermal widths).

    w(r) = erfc((r - rc) / delta) / 2 with rc = (r0 + r1)/2 and delta = (r1 - r0)/6, so
    1 - w(r0) = w(r1) = erfc(3)/2 ~ 1e-5.  An analytic edge keeps the spectrum of the
    windowed state Gaussian-decaying; compactly supported C-infinity steps converge far
    more slowly on the grid.
    """

    r0: float
    r1: float

    def __post_init__(self):
        if not 0 < self.r0 < self.r1:
            raise ValueError("taper needs 0 < r0 < r1")

    @property
    def center(self) -> float:
        return 0.5 * (self.r0 + self.r1)

    @property
    def delta(self) -> float:
        return (self.r1 - self.r0) / 6.0

    @property
    def s_max(self) -> float:
        """s beyond which the window is below 1e-40."""
        return (self.r1 + 10 * self.delta) ** 2 / 2

    def __call__(self, s):
        """(w(s), w'(s)) with s = r^2/2."""
        r = np.sqrt(2 * np.maximum(np.asarray(s, dtype=float), 0.0))
        x = (r - self.center) / self.delta
        w = 0.5 * special.erfc(x)
        dwdr = -np.exp(-x * x) / (np.sqrt(np.pi) * self.delta)
        # dr/ds = 1/r; the product vanishes to machine precision long before r = 0
        with np.errstate(divide="ignore", invalid="ignore"):
            dw = np.where(r > 0, dwdr / np.where(r > 0, r, 1.0), 0.0)
        return w, dw


class ThermalState:
    """Closed form of the thermal amplitude sqrt((omega beta/2pi) u(beta H0)) times a spinor.

    Its harmonic-gauge Clebsch density is the Boltzmann density
    (omega beta/2pi) exp(-beta H0).  An optional radial taper makes the state
    negligible near the box edge (for periodic-grid solvers); ``normalize`` rescales to
    unit norm when the taper removes part of the tail.
    """

    def __init__(self, params: ExactModelParams, spinor=(1.0, 0.0), taper: Optional[RadialTaper] = None,
                 normalize: bool = False):
        self.params = params
        self.spinor = np.asarray(spinor, dtype=complex)
        self.n = self.spinor.size
        self.taper = taper
        self.C = params.omega * params.beta / (2 * np.pi)
        self.scale = 1.0
        if normalize:
            self.scale = 1.0 / np.sqrt(self.radial_norm() * np.vdot(self.spinor, self.spinor).real)

    def radial_norm(self) -> float:
        """Integral of |amplitude|^2 over the plane (equals 1 without taper)."""
        if self.taper is None:
            return 1.0
        t = self.taper
        edges = [0.0, t.r0 ** 2 / 2, t.r1 ** 2 / 2, t.s_max]
        val = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            part, _ = sint.quad(lambda s: thermal_u(np.array([s]))[0] * t(np.array([s]))[0][0] ** 2,
                                a, b, limit=200, epsabs=0, epsrel=1e-13)
            val += part
        return val

    def s_of(self, q, p):
        P = self.params
        return P.beta * (np.asarray(p) ** 2 / (2 * P.m) + 0.5 * P.m * P.omega ** 2 * np.asarray(q) ** 2)

    def amplitude(self, s):
        """Scalar radial profile a(s), s = beta H0."""
        a = self.scale * np.sqrt(self.C * thermal_u(s))
        if self.taper is not None:
            a = a * self.taper(s)[0]
        return a

    def amplitude_ds(self, s):
        u = thermal_u(s)
        root = np.sqrt(self.C * u)
        da = self.C * thermal_du(s) / (2.0 * root)
        if self.taper is not None:
            w, dw = self.taper(s)
            da = w * da + dw * root
        return self.scale * da

    def values(self, q, p):
        a = self.amplitude(self.s_of(q, p))
        return self.spinor.reshape((-1,) + (1,) * a.ndim) * a

    def gradient(self, q, p):
        P = self.params
        q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
        da = self.amplitude_ds(self.s_of(q, p))
        g = np.stack([P.beta * P.m * P.omega ** 2 * q * da, P.beta * p / P.m * da])
        return g[:, None] * self.spinor.reshape((1, -1) + (1,) * q.ndim)

    def density(self, q, p):
        """Boltzmann density (untapered closed form)."""
        return self.C * np.exp(-self.s_of(q, p))


class GaussianPacket:
    """spinor * exp(-((q-q0)^2 + (p-p0)^2) / (4 width^2)) with an optional plane-wave phase.

    Unit-normalized in |.|^2 when ``spinor`` is a unit vector.
    """

    def __init__(self, q0=0.0, p0=0.0, width=1.0, spinor=(1.0, 0.0), kq=0.0, kp=0.0):
        self.q0, self.p0, self.width = float(q0), float(p0), float(width)
        self.kq, self.kp = float(kq), float(kp)
        self.spinor = np.asarray(spinor, dtype=complex)
        self.n = self.spinor.size
        self.norm = 1.0 / np.sqrt(2 * np.pi * self.width ** 2)

    def _scalar(self, q, p):
        dq, dp = np.asarray(q) - self.q0, np.asarray(p) - self.p0
        env = self.norm * np.exp(-(dq ** 2 + dp ** 2) / (4 * self.width ** 2))
        if self.kq or self.kp:
            env = env * np.exp(1j * (self.kq * dq + self.kp * dp))
        return env, dq, dp

    def values(self, q, p):
        f, _, _ = self._scalar(q, p)
        return self.spinor.reshape((-1,) + (1,) * np.ndim(f)) * f

    def gradient(self, q, p):
        f, dq, dp = self._scalar(*np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float)))
        c = 1.0 / (2 * self.width ** 2)
        g = np.stack([(-c * dq + 1j * self.kq) * f, (-c * dp + 1j * self.kp) * f])
        return g[:, None] * self.spinor.reshape((1, -1) + (1,) * f.ndim)


def check_resolution(params: ExactModelParams, grid: PhaseSpaceGrid, nodes_per_core: int = 16) -> None:
    """Require ``nodes_per_core`` nodes across the 4-sigma thermal core in each direction."""
    need_q = 4 * params.sigma_q / nodes_per_core
    need_p = 4 * params.sigma_p / nodes_per_core
    if grid.dq > need_q * (1 + 1e-12) or grid.dp > need_p * (1 + 1e-12):
        raise UnresolvedGridError(
            f"grid does not resolve the thermal width: need dq <= {need_q:.4g} and dp <= {need_p:.4g} "
            f"({nodes_per_core} nodes across 4 sigma), got dq = {grid.dq:.4g}, dp = {grid.dp:.4g}")


def default_grid_size(params: ExactModelParams, n: int = 256, width: float = 20.0):
    """(nq, np, lq, lp) with half-widths ``width`` thermal widths."""
    return n, n, width * params.sigma_q, width * params.sigma_p


def thermal_initial_state(params: ExactModelParams, grid: PhaseSpaceGrid,
                          taper: Optional[RadialTaper] = None, normalize: bool = False) -> HybridField:
    """The factorized thermal state sampled on ``grid`` (closed form attached)."""
    check_resolution(params, grid)
    return HybridField.from_analytic(grid, ThermalState(params, taper=taper, normalize=normalize))


# ---------------------------------------------------------------------------
# amplitude from a radial target density

class RadialAmplitude:
    """Zero-phase amplitude whose harmonic-gauge Clebsch density is rho(H0).

    |psi|^2 = F(H0) = H0^{-2} int_0^{H0} h rho(h) dh solves 2F + H0 F' = rho.
    """

    n = 1

    def __init__(self, profile: Callable, params: ExactModelParams, breakpoints: Sequence[float] = (),
                 order: int = 10):
        self.profile = profile
        self.params = params
        self.breakpoints = np.sort(np.asarray(breakpoints, dtype=float))
        self.gl = np.polynomial.legendre.leggauss(order)

    def h0(self, q, p):
        P = self.params
        return np.asarray(p) ** 2 / (2 * P.m) + 0.5 * P.m * P.omega ** 2 * np.asarray(q) ** 2

    def moment(self, h):
        """I(h) = int_0^h x rho(x) dx for an array of h, by Gauss-Legendre per interval."""
        h = np.asarray(h, dtype=float)
        flat = h.ravel()
        knots = np.unique(np.concatenate([[0.0], flat, self.breakpoints[self.breakpoints < flat.max(initial=0)]]))
        a, b = knots[:-1], knots[1:]
        x, w = self.gl
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * x[None, :]
        vals = pts * np.asarray(self.profile(pts), dtype=float)
        pieces = (vals * w[None, :]).sum(axis=1) * half
        cum = np.concatenate([[0.0], np.cumsum(pieces)])
        return cum[np.searchsorted(knots, flat)].reshape(h.shape)

    def intensity(self, h):
        h = np.asarray(h, dtype=float)
        rho0 = np.asarray(self.profile(np.zeros(1)), dtype=float)[0]
        out = np.full(h.shape, 0.5 * rho0)
        pos = h > 0
        out[pos] = self.moment(h[pos]) / h[pos] ** 2
        return out

    def values(self, q, p):
        return np.sqrt(np.maximum(self.intensity(self.h0(q, p)), 0.0))[None]

    def gradient(self, q, p):
        P = self.params
        q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
        h = self.h0(q, p)
        F = self.intensity(h)
        rho = np.asarray(self.profile(h), dtype=float)
        dF = np.zeros(h.shape)
        pos = h > 0
        dF[pos] = (rho[pos] - 2 * F[pos]) / h[pos]
        with np.errstate(divide="ignore", invalid="ignore"):
            dpsi = np.where(F > 0, dF / (2 * np.sqrt(np.where(F > 0, F, 1.0))), 0.0)
        return np.stack([P.m * P.omega ** 2 * q * dpsi, p / P.m * dpsi])[:, None]


def _probe_radial(target: Callable, params: ExactModelParams, grid: PhaseSpaceGrid) -> Callable:
    """Reduce a (q, p) target to a profile rho(H0), rejecting non-radial or negative targets."""
    P = params
    radii = np.linspace(0.0, 0.9, 10) * min(grid.lq * np.sqrt(P.m) * P.omega, grid.lp / np.sqrt(P.m))
    theta = np.linspace(0.0, 2 * np.pi, 13, endpoint=False)
    r, th = np.meshgrid(radii, theta, indexing="ij")
    # scaled coordinates: H0 = (Q^2 + P^2)/2 with Q = sqrt(m) omega q, P = p / sqrt(m)
    vals = np.asarray(target(r * np.cos(th) / (np.sqrt(P.m) * P.omega), r * np.sin(th) * np.sqrt(P.m)), float)
    spread = np.max(np.abs(vals - vals[:, :1]))
    if spread > 1e-9 * max(np.max(np.abs(vals)), 1e-300):
        raise ValueError("target density is not radial in the oscillator coordinates")

    def profile(h):
        h = np.asarray(h, dtype=float)
        q = np.sqrt(2 * np.maximum(h, 0.0) / (P.m * P.omega ** 2))
        return np.asarray(target(q, np.zeros_like(q)), dtype=float)

    return profile


def amplitude_from_density(target: Callable, params: ExactModelParams, grid: PhaseSpaceGrid,
                           breakpoints: Sequence[float] = ()) -> ScalarField:
    """Real zero-phase amplitude whose Clebsch density is the radial ``target(q, p)``.

    ``breakpoints`` lists H0 values where the target is not smooth.
    """
    Q, Pm = grid.mesh
    tv = np.asarray(target(Q, Pm), dtype=float)
    if np.any(tv < 0):
        raise ValueError("target density must be nonnegative")
    amp = RadialAmplitude(_probe_radial(target, params, grid), params, breakpoints)
    return ScalarField(grid, amp.values(Q, Pm)[0])


# ---------------------------------------------------------------------------
# exact hybrid solution

class ExactHybridState:
    """Upsilon(z, t) = U^dagger (y_+(R_+ z), y_-(R_- z)) with y = U Upsilon_0."""

    def __init__(self, params: ExactModelParams, base, t: float, grid: Optional[PhaseSpaceGrid] = None,
                 samples: Optional[np.ndarray] = None):
        self.params, self.base, self.t = params, base, float(t)
        self.U, self.freqs = _branch_setup(params)
        self.maps = [oscillator_backward_map(params.m, w, self.t) for w in self.freqs]
        self.n = 2
        self.grid = grid
        self.rotated = None if samples is None else np.einsum("ab,b...->a...", self.U, samples)

    def branch_values(self, q, p):
        out = []
        for a, M in enumerate(self.maps):
            qb, pb = M[0, 0] * q + M[0, 1] * p, M[1, 0] * q + M[1, 1] * p
            if self.base is not None:
                y = np.einsum("b,b...->...", self.U[a], self.base.values(qb, pb))
            else:
                y = interpolate_periodic(self.rotated[a], self.grid, qb, pb)
            out.append(y)
        return np.stack(out)

    def values(self, q, p):
        return np.einsum("ba,b...->a...", np.conj(self.U), self.branch_values(q, p))

    def gradient(self, q, p):
        if self.base is None:
            raise ValueError("gradient needs a closed-form initial state")
        gs = []
        for a, M in enumerate(self.maps):
            qb, pb = M[0, 0] * q + M[0, 1] * p, M[1, 0] * q + M[1, 1] * p
            g = np.einsum("b,kb...->k...", self.U[a], self.base.gradient(qb, pb))
            gs.append(np.stack([M[0, 0] * g[0] + M[1, 0] * g[1], M[0, 1] * g[0] + M[1, 1] * g[1]]))
        gs = np.stack(gs, axis=1)
        return np.einsum("ba,kb...->ka...", np.conj(self.U), gs)


def hybrid_exact(params: ExactModelParams, upsilon0: HybridField, t: float, z=None):
    """Exact hybrid wavefunction at time t.

    With ``z = (q, p)`` arrays the 2-component values at those points are
    returned; otherwise a HybridField on the grid of ``upsilon0``.  A closed
    form attached to ``upsilon0`` is used when present, else the samples are
    spline-interpolated at the backward-rotated points.
    """
    if upsilon0.n != 2:
        raise ValueError("the exact solution is for two-level systems")
    if params.lam > 0:
        branch_frequencies(params)
    base = upsilon0.analytic
    state = ExactHybridState(params, base, t, upsilon0.grid, None if base is not None else upsilon0.values)
    if z is not None:
        return state.values(np.asarray(z[0], float), np.asarray(z[1], float))
    Q, P = upsilon0.grid.mesh
    vals = state.values(Q, P)
    return HybridField(upsilon0.grid, vals, analytic=state if base is not None else None)


# ---------------------------------------------------------------------------
# exact AG solution

def ag_phase(params: ExactModelParams, q, p, t: float):
    """Off-diagonal phase of the exact AG solution (lambda = |alpha|)."""
    m, w, hb, lam = params.m, params.omega, params.hbar, params.lam
    q, p = np.asarray(q, float), np.asarray(p, float)
    h0 = p ** 2 / (2 * m) + 0.5 * m * w ** 2 * q ** 2
    pre = lam / (2 * m * hb * w ** 3)
    return pre * ((p ** 2 - (m * w * q) ** 2) / (2 * m) * np.sin(2 * w * t)
                  - w * (2 * h0 * t + p * q * (np.cos(2 * w * t) - 1.0)))


def thermal_density(params: ExactModelParams) -> Callable:
    """D0(q, p) = (omega beta / 2pi) exp(-beta H0) diag(1, 0), shape (2, 2, ...)."""
    st = ThermalState(params)

    def d0(q, p):
        rho = st.density(q, p)
        out = np.zeros((2, 2) + np.shape(rho), dtype=complex)
        out[0, 0] = rho
        return out

    return d0


def ag_exact(params: ExactModelParams, d0, t: float, z=None, grid: Optional[PhaseSpaceGrid] = None):
    """Exact AG density matrix field at time t.

    ``d0`` is a callable (q, p) -> (2, 2, ...) or a grid array (2, 2, nq, np)
    (then spline-interpolated).  Points are ``z = (q, p)`` or the grid nodes.
    """
    U, (wp, wm) = _branch_setup(params)
    if z is None:
        q, p = grid.mesh
    else:
        q, p = np.asarray(z[0], float), np.asarray(z[1], float)

    if callable(d0):
        def rotated(a, b, qb, pb):
            return np.einsum("i,ij...,j->...", U[a], d0(qb, pb), np.conj(U[b]))
    else:
        if grid is None:
            raise ValueError("grid-sampled d0 needs its grid")
        dr = np.einsum("ai,ij...,bj->ab...", U, d0, np.conj(U))

        def rotated(a, b, qb, pb):
            return interpolate_periodic(dr[a, b], grid, qb, pb)

    def at(freq, a, b):
        M = oscillator_backward_map(params.m, freq, t)
        return rotated(a, b, M[0, 0] * q + M[0, 1] * p, M[1, 0] * q + M[1, 1] * p)

    phase = np.exp(1j * ag_phase(params, q, p, t)) if params.lam > 0 else 1.0
    d = np.empty((2, 2) + np.shape(q), dtype=complex)
    d[0, 0] = at(wp, 0, 0)
    d[1, 1] = at(wm, 1, 1)
    d[0, 1] = phase * at(params.omega, 0, 1)
    d[1, 0] = np.conj(phase) * at(params.omega, 1, 0)
    return np.einsum("ia,ij...,jb->ab...", np.conj(U), d, U)


def ag_quantum_density(params: ExactModelParams, t: float) -> np.ndarray:
    """Quantum marginal of the exact AG solution from the thermal D0, in closed form.

    Diagonal blocks keep their weight (area-preserving flows); the coherence
    is a Gaussian integral of exp(-beta H0 + i phi) with phi quadratic in z.
    """
    U, _ = _branch_setup(params)
    c = U[:, 0]
    pops = np.abs(c) ** 2
    m, w, hb, lam, beta = params.m, params.omega, params.hbar, params.lam, params.beta
    pre = lam / (2 * m * hb * w ** 3)
    s2, c2 = np.sin(2 * w * t), np.cos(2 * w * t)
    # phi = z^T B z / 2
    Bqq = pre * (-(m * w ** 2) * s2 - 2 * w * t * m * w ** 2)
    Bpp = pre * (s2 / m - 2 * w * t / m)
    Bqp = pre * (-w * (c2 - 1.0))
    A = beta * np.diag([m * w ** 2, 1.0 / m]) - 1j * np.array([[Bqq, Bqp], [Bqp, Bpp]])
    ev = np.linalg.eigvals(A)
    gauss = 2 * np.pi / np.prod(np.sqrt(ev))
    coh = (w * beta / (2 * np.pi)) * gauss
    rho_u = np.array([[pops[0], c[0] * np.conj(c[1]) * coh],
                      [np.conj(c[0] * np.conj(c[1]) * coh), pops[1]]])
    return np.conj(U).T @ rho_u @ U


# ---------------------------------------------------------------------------
# quantum density of the exact hybrid solution by radial overlaps

def _scaled_map(params: ExactModelParams, freq: float, t: float) -> np.ndarray:
    k = freq / params.omega
    c, s = np.cos(freq * t), np.sin(freq * t)
    return np.array([[c, -s / k], [k * s, c]])


def angular_nodes(M: np.ndarray, base: int = 64, per_aspect: int = 48) -> int:
    """Trapezoid size for the angular average of a(y^2 |M e(theta)|^2).

    The integrand is analytic in a strip of half-width about s2/s1 (singular
    values of M), so the node count grows linearly with the aspect ratio.
    """
    sv = np.linalg.svd(M, compute_uv=False)
    n = base + per_aspect * sv[0] / sv[-1]
    return int(min(8192, 8 * np.ceil(n / 8)))


@lru_cache(maxsize=8)
def _unit_gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def radial_overlap(amplitude: Callable, M: np.ndarray, y_scale: float, n_r: int = 400,
                   n_theta: Optional[int] = None, radial_scale: float = 1.0) -> complex:
    """int a(s(w)) conj(a(s(M w))) dw for a radial profile a(s), s = y^2, w = y_scale * y.

    Polar quadrature: trapezoid in angle, Gauss-Legendre in x with y = c x/(1-x).
    ``n_theta=None`` sizes the angular rule from the aspect ratio of M.
    """
    if n_theta is None:
        n_theta = angular_nodes(M)
    x, wx = _unit_gauss_legendre(n_r)
    y = radial_scale * x / (1.0 - x)
    dy = radial_scale / (1.0 - x) ** 2
    a0 = amplitude(y ** 2)
    if np.array_equal(M, np.eye(2)):
        inner = np.conj(a0) * 2 * np.pi
    else:
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        e = np.stack([np.cos(th), np.sin(th)])
        ell2 = np.sum((M @ e) ** 2, axis=0)
        a1 = amplitude(y[:, None] ** 2 * ell2[None, :])
        inner = np.conj(a1).mean(axis=1) * 2 * np.pi
    return complex(np.sum(wx * dy * y * a0 * inner) * y_scale ** 2)


def exact_quantum_density(params: ExactModelParams, t: float, state: Optional[ThermalState] = None,
                          n_r: int = 400, n_theta: Optional[int] = None) -> np.ndarray:
    """rho_hat(t) = int Upsilon Upsilon^dagger for Upsilon_0 = a(beta H0) v, over the whole plane."""
    state = state or ThermalState(params)
    U, freqs = _branch_setup(params)
    c = U @ state.spinor
    maps = [_scaled_map(params, w, t) for w in freqs]
    # scaled coordinates: beta H0 = beta omega |w|^2 / 2 = y^2
    y_scale = np.sqrt(2.0 / (params.beta * params.omega))
    O = np.empty((2, 2), dtype=complex)
    for a in range(2):
        O[a, a] = radial_overlap(state.amplitude, np.eye(2), y_scale, n_r, n_theta)
    O[0, 1] = radial_overlap(state.amplitude, maps[1] @ np.linalg.inv(maps[0]), y_scale, n_r, n_theta)
    O[1, 0] = np.conj(O[0, 1])
    rho_u = np.outer(c, np.conj(c)) * O
    return np.conj(U).T @ rho_u @ U
