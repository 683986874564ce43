"""Classical Koopman-van Hove dynamics of a phase-space wavefunction.

The generator is the covariant Liouvillian

    L_H psi = H psi - grad H . Z+ psi = i hbar {H, psi} + phi_H psi,

and the wavefunction evolves by i hbar d_t psi = L_H psi.  The density it
transports is the Clebsch density rho = |psi|^2 + div(psi* Z+ psi).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.linalg import expm

from .gauge import GaugeKind, GaugePotential, phase_array, z_plus_arrays
from .phase_space import HybridField, PhaseSpaceGrid, ScalarField, d_p, d_q, div, quad

Field = Union[ScalarField, HybridField]


class CFLError(ValueError):
    pass


class HamiltonianError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Hamiltonian terms

@dataclass(frozen=True, eq=False)
class HamiltonianTerm:
    """Real phase-space function with analytic derivatives.

    ``value(q, p)``, ``gradient(q, p) -> (H_q, H_p)`` and optionally
    ``hessian(q, p) -> (H_qq, H_qp, H_pp)``.  ``quadratic_form`` is the
    symmetric 2x2 matrix Q when H = z.Q.z/2 exactly.
    """

    value: Callable
    gradient: Callable
    hessian: Optional[Callable] = None
    quadratic_form: Optional[np.ndarray] = None
    name: str = "H"
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.check:
            _spot_check_gradient(self)

    @property
    def quadratic_homogeneous(self) -> bool:
        return self.quadratic_form is not None

    @property
    def oscillator(self) -> Optional[tuple[float, float]]:
        """(m, omega) when H = p^2/2m + m omega^2 q^2/2 with m, omega > 0."""
        Q = self.quadratic_form
        if Q is None or Q[0, 1] != 0.0 or Q[0, 0] <= 0.0 or Q[1, 1] <= 0.0:
            return None
        m = 1.0 / Q[1, 1]
        return m, float(np.sqrt(Q[0, 0] / m))

    def on_grid(self, grid: PhaseSpaceGrid):
        q, p = grid.mesh
        v = np.broadcast_to(np.asarray(self.value(q, p), dtype=float), grid.shape)
        gq, gp = self.gradient(q, p)
        g = np.stack([np.broadcast_to(np.asarray(gq, dtype=float), grid.shape),
                      np.broadcast_to(np.asarray(gp, dtype=float), grid.shape)])
        return v, g

    # constructors ---------------------------------------------------------

    @classmethod
    def harmonic(cls, m: float = 1.0, omega: float = 1.0) -> "HamiltonianTerm":
        """H0 = p^2/2m + m omega^2 q^2/2."""
        k = m * omega ** 2
        return cls(value=lambda q, p: p ** 2 / (2 * m) + 0.5 * k * q ** 2,
                   gradient=lambda q, p: (k * q + 0 * p, p / m + 0 * q),
                   hessian=lambda q, p: (k + 0 * q, 0 * q, 1 / m + 0 * q),
                   quadratic_form=np.diag([k, 1.0 / m]), name="harmonic")

    @classmethod
    def constant(cls, c: float) -> "HamiltonianTerm":
        zero = lambda q, p: 0.0 * (q + p)
        return cls(value=lambda q, p: c + 0.0 * (q + p), gradient=lambda q, p: (zero(q, p), zero(q, p)),
                   hessian=lambda q, p: (zero(q, p),) * 3, name=f"const({c})")

    @classmethod
    def polynomial(cls, coeffs: Mapping[tuple[int, int], float], name: str = "poly") -> "HamiltonianTerm":
        """sum of c * q^i p^j for ((i, j), c) in ``coeffs``."""
        items = [((int(i), int(j)), float(c)) for (i, j), c in coeffs.items() if c != 0.0]

        def mono(x, k):
            return x ** k if k > 0 else np.ones_like(x)

        def value(q, p):
            q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
            out = np.zeros(q.shape)
            for (i, j), c in items:
                out = out + c * mono(q, i) * mono(p, j)
            return out

        def gradient(q, p):
            q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
            gq, gp = np.zeros(q.shape), np.zeros(q.shape)
            for (i, j), c in items:
                if i:
                    gq = gq + c * i * mono(q, i - 1) * mono(p, j)
                if j:
                    gp = gp + c * j * mono(q, i) * mono(p, j - 1)
            return gq, gp

        def hessian(q, p):
            q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
            hqq, hqp, hpp = (np.zeros(q.shape) for _ in range(3))
            for (i, j), c in items:
                if i > 1:
                    hqq = hqq + c * i * (i - 1) * mono(q, i - 2) * mono(p, j)
                if i and j:
                    hqp = hqp + c * i * j * mono(q, i - 1) * mono(p, j - 1)
                if j > 1:
                    hpp = hpp + c * j * (j - 1) * mono(q, i) * mono(p, j - 2)
            return hqq, hqp, hpp

        form = None
        if items and all(i + j == 2 for (i, j), _ in items):
            c = {ij: v for ij, v in items}
            form = np.array([[2 * c.get((2, 0), 0.0), c.get((1, 1), 0.0)],
                             [c.get((1, 1), 0.0), 2 * c.get((0, 2), 0.0)]])
        return cls(value=value, gradient=gradient, hessian=hessian,
                   quadratic_form=form, name=name)

    @classmethod
    def q_squared_half(cls) -> "HamiltonianTerm":
        return cls.polynomial({(2, 0): 0.5}, name="q^2/2")


def _spot_check_gradient(H: HamiltonianTerm, h: float = 1e-5) -> None:
    pts = np.array([[0.31, -0.17], [-0.23, 0.41], [0.05, 0.07], [-0.6, -0.35]])
    q, p = pts[:, 0], pts[:, 1]
    gq, gp = H.gradient(q, p)
    fq = (np.asarray(H.value(q + h, p)) - np.asarray(H.value(q - h, p))) / (2 * h)
    fp = (np.asarray(H.value(q, p + h)) - np.asarray(H.value(q, p - h))) / (2 * h)
    for an, fd in ((gq, fq), (gp, fp)):
        an = np.broadcast_to(np.asarray(an, float), fd.shape)
        scale = np.maximum(1.0, np.abs(an))
        if np.any(np.abs(an - fd) > 1e-6 * scale):
            raise HamiltonianError(f"gradient of {H.name} disagrees with finite differences")


def linear_combination(terms: Sequence[HamiltonianTerm], weights: Sequence[float],
                       name: str = "combo") -> HamiltonianTerm:
    """sum_k w_k H_k, keeping analytic derivatives."""
    terms, weights = list(terms), [float(w) for w in weights]

    def value(q, p):
        return sum(w * np.asarray(t.value(q, p), float) for t, w in zip(terms, weights))

    def gradient(q, p):
        gs = [t.gradient(q, p) for t in terms]
        return (sum(w * np.asarray(g[0], float) for g, w in zip(gs, weights)),
                sum(w * np.asarray(g[1], float) for g, w in zip(gs, weights)))

    hessian = None
    if all(t.hessian is not None for t in terms):
        def hessian(q, p):
            hs = [t.hessian(q, p) for t in terms]
            return tuple(sum(w * np.asarray(h[k], float) for h, w in zip(hs, weights)) for k in range(3))

    form = None
    live = [(t, w) for t, w in zip(terms, weights) if w != 0.0]
    if live and all(t.quadratic_form is not None for t, _ in live):
        form = sum(w * t.quadratic_form for t, w in live)
    return HamiltonianTerm(value, gradient, hessian, quadratic_form=form, name=name, check=False)


def bracket_term(H: HamiltonianTerm, K: HamiltonianTerm) -> HamiltonianTerm:
    """The function {H, K} with its gradient (needs both Hessians)."""
    if H.hessian is None or K.hessian is None:
        raise HamiltonianError("bracket_term needs analytic Hessians")

    def value(q, p):
        hq, hp = H.gradient(q, p)
        kq, kp = K.gradient(q, p)
        return hq * kp - hp * kq

    def gradient(q, p):
        hq, hp = H.gradient(q, p)
        kq, kp = K.gradient(q, p)
        hqq, hqp, hpp = H.hessian(q, p)
        kqq, kqp, kpp = K.hessian(q, p)
        return (hqq * kp + hq * kqp - hqp * kq - hp * kqq,
                hqp * kp + hq * kpp - hpp * kq - hp * kqp)

    return HamiltonianTerm(value, gradient, None, name=f"{{{H.name},{K.name}}}", check=False)


# ---------------------------------------------------------------------------
# helpers shared with the hybrid module

def values_of(psi: Field) -> np.ndarray:
    return psi.values


def gradient_of(psi: Field, derivatives: str = "auto") -> np.ndarray:
    """Stacked (d_q, d_p) of the samples; analytic when a closed form is attached."""
    analytic = getattr(psi, "analytic", None)
    if derivatives not in ("auto", "analytic", "spectral"):
        raise ValueError(f"unknown derivative mode {derivatives!r}")
    if analytic is not None and derivatives in ("auto", "analytic"):
        q, p = psi.grid.mesh
        g = np.asarray(analytic.gradient(q, p), dtype=complex)
        return g if psi.values.ndim == 3 else g[:, 0]
    if derivatives == "analytic":
        raise ValueError("analytic derivatives requested but the field has no closed form")
    return np.stack([d_q(psi.values, psi.grid), d_p(psi.values, psi.grid)])


def liouvillian_arrays(hv, hg, aq, ap, psi, dpsi, hbar: float, form: str = "bracket"):
    """L_H psi on arrays.  ``hv``/``hg`` are H and its gradient on the nodes."""
    if form == "direct":
        z = z_plus_arrays(psi, dpsi, aq, ap, hbar)
        return hv * psi - (hg[0] * z[0] + hg[1] * z[1])
    if form != "bracket":
        raise ValueError(f"unknown form {form!r}")
    phi = hv + hg[0] * ap - hg[1] * aq
    return 1j * hbar * (hg[0] * dpsi[1] - hg[1] * dpsi[0]) + phi * psi


def _wrap(like: Field, values: np.ndarray) -> Field:
    if isinstance(like, ScalarField):
        return ScalarField(like.grid, values)
    return HybridField(like.grid, values)


# ---------------------------------------------------------------------------
# operations

def apply_covariant_liouvillian(H: HamiltonianTerm, g: GaugePotential, psi: Field,
                                hbar: float = 1.0, form: str = "bracket",
                                derivatives: str = "spectral") -> Field:
    """H psi - grad H . Z+ psi.

    ``form='bracket'`` evaluates i hbar {H, psi} + phi_H psi, ``form='direct'``
    applies Z+ literally; both agree to rounding.
    """
    grid = psi.grid
    q, p = grid.mesh
    hv, hg = H.on_grid(grid)
    aq, ap = g(q, p)
    dpsi = gradient_of(psi, derivatives)
    return _wrap(psi, liouvillian_arrays(hv, hg, aq, ap, psi.values, dpsi, hbar, form))


def clebsch_arrays(psi, dpsi, g: GaugePotential, q, p, hbar: float, form: str,
                   grid: Optional[PhaseSpaceGrid], spectral: bool):
    """Clebsch density of a single component, before taking the real part."""
    aq, ap = g(q, p)
    jq, jp = ap, -aq
    if form == "divergence":
        z = z_plus_arrays(psi, dpsi, aq, ap, hbar)
        if spectral:
            vq, vp = np.conj(psi) * z[0], np.conj(psi) * z[1]
            return np.abs(psi) ** 2 + div(vq, vp, grid)
        # div(psi* Z+psi) = grad psi* . Z+psi + psi* div(Z+psi),
        # div(Z+psi) = -div(JA) psi - JA . grad psi
        divja = g.curl(q, p)   # div JA = d_q A_p - d_p A_q
        dz = -divja * psi - (jq * dpsi[0] + jp * dpsi[1])
        return np.abs(psi) ** 2 + np.conj(dpsi[0]) * z[0] + np.conj(dpsi[1]) * z[1] + np.conj(psi) * dz
    if form == "expanded":
        f = np.abs(psi) ** 2
        cj = np.conj(dpsi)
        br = cj[0] * dpsi[1] - cj[1] * dpsi[0]          # {psi*, psi}
        if spectral:
            div_jaf = div(jq * f, jp * f, grid)
        else:
            gf = 2.0 * np.real(np.conj(psi) * dpsi)
            div_jaf = g.curl(q, p) * f + jq * gf[0] + jp * gf[1]
        return f - div_jaf + hbar * br.imag
    raise ValueError(f"unknown form {form!r}")


def clebsch_density(psi: Field, g: GaugePotential, hbar: float = 1.0, form: str = "divergence",
                    derivatives: str = "auto") -> ScalarField:
    """rho = |psi|^2 + div(psi* Z+ psi), summed over components for hybrid fields.

    ``form='expanded'`` uses |psi|^2 - div(JA |psi|^2) + hbar Im{psi*, psi}.
    With ``derivatives='auto'`` a closed form attached to the field supplies
    exact gradients and the divergence is expanded by the product rule.
    """
    grid = psi.grid
    q, p = grid.mesh
    dpsi = gradient_of(psi, derivatives)
    spectral = not (getattr(psi, "analytic", None) is not None and derivatives in ("auto", "analytic"))
    vals = psi.values
    if vals.ndim == 2:
        out = clebsch_arrays(vals, dpsi, g, q, p, hbar, form, grid, spectral)
    else:
        out = sum(clebsch_arrays(vals[a], dpsi[:, a], g, q, p, hbar, form, grid, spectral)
                  for a in range(vals.shape[0]))
    return ScalarField(grid, np.real(out))


def inner(a: np.ndarray, b: np.ndarray, grid: PhaseSpaceGrid) -> complex:
    """<a, b> = sum over components of the integral of conj(a) b."""
    return complex(np.sum(quad(np.conj(a) * b, grid)))


def kvh_energy(psi: Field, H: HamiltonianTerm, g: GaugePotential, hbar: float = 1.0,
               derivatives: str = "spectral") -> float:
    """h = <psi, L_H psi>; the imaginary part is returned to the caller as a check."""
    lpsi = apply_covariant_liouvillian(H, g, psi, hbar, derivatives=derivatives)
    return inner(psi.values, lpsi.values, psi.grid).real


def energy_from_density(rho: ScalarField, H: HamiltonianTerm) -> float:
    hv, _ = H.on_grid(rho.grid)
    return float(np.real(quad(hv * rho.values, rho.grid)))


# ---------------------------------------------------------------------------
# time stepping

def rk4(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + (0.5 * dt) * k1)
    k3 = f(y + (0.5 * dt) * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def cfl_bound(vmax: float, phimax: float, grid: PhaseSpaceGrid, hbar: float,
              safety: float = 0.5) -> float:
    bound = np.inf
    if vmax > 0:
        bound = safety * min(grid.dq, grid.dp) / vmax
    if phimax > 0:
        bound = min(bound, safety * 2.0 * np.sqrt(2.0) * hbar / phimax)
    return float(bound)


class KvHStepper:
    """Method-of-lines RK4 for d_t psi = {H, psi} - (i/hbar) phi_H psi.

    Derivative and phase arrays are evaluated once.  When the phase vanishes
    identically (homogeneous quadratic H in the harmonic gauge) real states
    stay real and are stepped with real transforms.
    """

    def __init__(self, H: HamiltonianTerm, g: GaugePotential, grid: PhaseSpaceGrid,
                 hbar: float = 1.0, cfl_safety: float = 0.5):
        self.grid, self.hbar = grid, float(hbar)
        q, p = grid.mesh
        hv, hg = H.on_grid(grid)
        self.hq, self.hp = hg[0], hg[1]
        if H.quadratic_homogeneous and g.kind is GaugeKind.HARMONIC:
            self.phi = None
        else:
            phi = phase_array(hv, hg, g, q, p)
            self.phi = None if not np.any(phi) else phi
        vmax = float(np.max(np.hypot(self.hq, self.hp)))
        phimax = 0.0 if self.phi is None else float(np.max(np.abs(self.phi)))
        self.dt_max = cfl_bound(vmax, phimax, grid, self.hbar, cfl_safety)

    def rhs(self, y: np.ndarray) -> np.ndarray:
        out = self.hq * d_p(y, self.grid) - self.hp * d_q(y, self.grid)
        if self.phi is not None:
            out = out - (1j / self.hbar) * (self.phi * y)
        return out

    def check_dt(self, dt: float) -> None:
        if dt < 0:
            raise CFLError("dt must be non-negative")
        if dt > self.dt_max:
            raise CFLError(f"dt={dt:.6g} exceeds the CFL bound {self.dt_max:.6g}")

    def step(self, y: np.ndarray, dt: float) -> np.ndarray:
        self.check_dt(dt)
        if dt == 0:
            return y.copy()
        if self.phi is not None and np.isrealobj(y):
            y = y.astype(complex)
        return rk4(self.rhs, y, dt)

    def run(self, y: np.ndarray, dt: float, nsteps: int, callback=None, every: int = 1):
        self.check_dt(dt)
        if self.phi is not None and np.isrealobj(y):
            y = y.astype(complex)
        for k in range(1, nsteps + 1):
            y = rk4(self.rhs, y, dt)
            if callback is not None and k % every == 0:
                callback(k, y)
        return y


def step_rk4(H: HamiltonianTerm, g: GaugePotential, psi: Field, dt: float, hbar: float = 1.0,
             cfl_safety: float = 0.5) -> Field:
    """One classical RK4 step of i hbar d_t psi = L_H psi."""
    stepper = KvHStepper(H, g, psi.grid, hbar, cfl_safety)
    vals = psi.values
    if isinstance(psi, HybridField):
        out = np.stack([stepper.step(v, dt) for v in vals])
        return HybridField(psi.grid, out.astype(complex))
    return ScalarField(psi.grid, stepper.step(vals, dt))


# ---------------------------------------------------------------------------
# backward characteristics for quadratic Hamiltonians

def oscillator_backward_map(m: float, omega: float, t: float) -> np.ndarray:
    """Matrix sending z to its position a time t earlier under p^2/2m + m omega^2 q^2/2."""
    c, s = np.cos(omega * t), np.sin(omega * t)
    return np.array([[c, -s / (m * omega)], [m * omega * s, c]])


@dataclass(frozen=True, eq=False)
class LinearPullback:
    """Closed form psi(M z) built from another closed form (chain rule gradient)."""

    base: object
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.base.n

    def _args(self, q, p):
        M = self.matrix
        return M[0, 0] * q + M[0, 1] * p, M[1, 0] * q + M[1, 1] * p

    def values(self, q, p):
        return self.base.values(*self._args(q, p))

    def gradient(self, q, p):
        gq, gp = self.base.gradient(*self._args(q, p))
        M = self.matrix
        return np.stack([M[0, 0] * gq + M[1, 0] * gp, M[0, 1] * gq + M[1, 1] * gp])


def interpolate_periodic(values: np.ndarray, grid: PhaseSpaceGrid, q, p, order: int = 3) -> np.ndarray:
    """Cubic-spline sample of a periodic grid field at arbitrary points."""
    coords = np.stack([(np.asarray(q) + grid.lq) / grid.dq, (np.asarray(p) + grid.lp) / grid.dp])

    def one(v):
        return ndimage.map_coordinates(v, coords, order=order, mode="grid-wrap")

    if np.iscomplexobj(values):
        return one(values.real) + 1j * one(values.imag)
    return one(values)


def pullback(psi: Field, matrix: np.ndarray) -> Field:
    """psi(M z) on the same grid: exact for closed forms, spline-sampled otherwise."""
    grid = psi.grid
    analytic = getattr(psi, "analytic", None)
    if analytic is not None:
        return HybridField.from_analytic(grid, LinearPullback(analytic, np.asarray(matrix, float)))
    q, p = grid.mesh
    qb = matrix[0, 0] * q + matrix[0, 1] * p
    pb = matrix[1, 0] * q + matrix[1, 1] * p
    # points carried out of the box are not represented; the field is taken to vanish there
    inside = (np.abs(qb) <= grid.lq) & (np.abs(pb) <= grid.lp)
    vals = psi.values
    if vals.ndim == 2:
        return ScalarField(grid, np.where(inside, interpolate_periodic(vals, grid, qb, pb), 0.0))
    return HybridField(grid, np.stack([np.where(inside, interpolate_periodic(v, grid, qb, pb), 0.0)
                                       for v in vals]))


def quadratic_backward_map(H: HamiltonianTerm, t: float) -> np.ndarray:
    """Matrix of the time -t flow of a homogeneous quadratic H = z.Q.z/2."""
    osc = H.oscillator
    if osc is not None:
        return oscillator_backward_map(osc[0], osc[1], t)
    jq = np.array([[0.0, 1.0], [-1.0, 0.0]]) @ H.quadratic_form
    return expm(-t * jq)


def propagate_characteristics(H: HamiltonianTerm, g: GaugePotential, psi: Field, t: float,
                              hbar: float = 1.0) -> Field:
    """Exact KvH flow for a homogeneous quadratic Hamiltonian in the harmonic gauge.

    The phase term vanishes there, so psi(z, t) = psi0(z carried back by t).
    """
    if H.quadratic_form is None:
        raise HamiltonianError("propagate_characteristics needs a homogeneous quadratic H")
    if g.kind is not GaugeKind.HARMONIC:
        raise HamiltonianError("propagate_characteristics needs the harmonic gauge")
    if t == 0:
        return psi
    return pullback(psi, quadratic_backward_map(H, t))


# ---------------------------------------------------------------------------
# polar form

@dataclass(frozen=True)
class PolarFields:
    density: np.ndarray
    phase: np.ndarray
    mask: np.ndarray


def polar_fields(psi: Field, threshold: float = 1e-8, hbar: float = 1.0) -> PolarFields:
    """D = |psi|^2 and S = hbar arg(psi) (principal branch) on the supported region.

    Outside the mask the phase is set to 0.
    """
    vals = psi.values if isinstance(psi, ScalarField) else psi.values[0]
    D = np.abs(vals) ** 2
    mask = D > threshold * D.max() if D.max() > 0 else np.zeros(D.shape, bool)
    S = np.where(mask, hbar * np.angle(vals), 0.0)
    return PolarFields(D, S, mask)


def phase_gradient(psi: Field, hbar: float = 1.0, derivatives: str = "auto") -> np.ndarray:
    """grad S = hbar Im(psi* grad psi)/|psi|^2, free of branch jumps (nan where psi = 0)."""
    vals = psi.values if isinstance(psi, ScalarField) else psi.values[0]
    dpsi = gradient_of(psi, derivatives)
    if dpsi.ndim == 4:
        dpsi = dpsi[:, 0]
    d = np.abs(vals) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        return hbar * np.imag(np.conj(vals) * dpsi) / d


def jump_mask(S: np.ndarray, hbar: float = 1.0, width: int = 2) -> np.ndarray:
    """True away from branch jumps of S (nodes within ``width`` cells of a jump are dropped)."""
    jumps = np.zeros(S.shape, bool)
    for axis in (0, 1):
        d = np.abs(np.diff(S, axis=axis)) > np.pi * hbar
        pad = [(0, 0), (0, 0)]
        pad[axis] = (0, 1)
        jumps |= np.pad(d, pad)
        pad[axis] = (1, 0)
        jumps |= np.pad(d, pad)
    if width > 1:
        jumps = ndimage.binary_dilation(jumps, iterations=width - 1)
    return ~jumps
