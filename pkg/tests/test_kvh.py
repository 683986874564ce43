import numpy as np
import pytest
from scipy import ndimage, optimize
from hypothesis import given, settings, strategies as st

from koopman_hybrid.exact import ExactModelParams, GaussianPacket, ThermalState
from koopman_hybrid.gauge import harmonic, liouville
from koopman_hybrid.kvh import (CFLError, HamiltonianError, HamiltonianTerm, KvHStepper, apply_covariant_liouvillian,
                                bracket_term, clebsch_arrays, clebsch_density, inner, jump_mask, kvh_energy,
                                polar_fields, propagate_characteristics, rk4, step_rk4)
from koopman_hybrid.phase_space import HybridField, ScalarField, d_p, d_q, make_grid, quad

from conftest import packet_field, random_packet, scalar

GAUGES = [liouville(), harmonic()]


def random_polynomial(rng, degree, scale=1.0):
    coeffs = {(i, j): scale * rng.normal() for i in range(degree + 1) for j in range(degree + 1 - i)}
    return HamiltonianTerm.polynomial(coeffs)


def analytic_rotation(packet, t):
    """Packet carried by the unit oscillator flow for time t (harmonic gauge: no phase)."""
    c, s = np.cos(t), np.sin(t)

    class Rotated:
        n = packet.n

        def values(self, q, p):
            return packet.values(c * q - s * p, s * q + c * p)

        def gradient(self, q, p):
            gq, gp = packet.gradient(c * q - s * p, s * q + c * p)
            return np.stack([c * gq + s * gp, -s * gq + c * gp])

    return Rotated()


# --- covariant Liouvillian ----------------------------------------------------

@pytest.mark.parametrize("g", GAUGES, ids=["liouville", "harmonic"])
def test_liouvillian_two_forms_agree(g, grid128):
    rng = np.random.default_rng(3)
    for _ in range(5):
        psi = scalar(random_packet(rng, grid128))
        H = random_polynomial(rng, 3)
        a = apply_covariant_liouvillian(H, g, psi, form="bracket").values
        b = apply_covariant_liouvillian(H, g, psi, form="direct").values
        assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.max(np.abs(a)))


def test_liouvillian_of_constant(grid64):
    psi = scalar(packet_field(grid64, 0.1, 0.2, 0.1, kq=2.0))
    out = apply_covariant_liouvillian(HamiltonianTerm.constant(1.7), harmonic(), psi).values
    assert np.max(np.abs(out - 1.7 * psi.values)) <= 1e-14


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["liouville", "harmonic"]))
def test_liouvillian_hermitian(seed, gname):
    grid = make_grid(128, 128, 1.0, 1.0)
    g = liouville() if gname == "liouville" else harmonic()
    rng = np.random.default_rng(seed)
    a, b = (scalar(random_packet(rng, grid)) for _ in range(2))
    H = random_polynomial(rng, 3)
    la = apply_covariant_liouvillian(H, g, a).values
    lb = apply_covariant_liouvillian(H, g, b).values
    assert abs(inner(a.values, lb, grid) - inner(la, b.values, grid)) <= 1e-10


@pytest.mark.parametrize("g", GAUGES, ids=["liouville", "harmonic"])
def test_lie_homomorphism(g, grid128):
    # [L_H, L_K] = i hbar L_{H,K}
    rng = np.random.default_rng(11)
    hbar = 0.8
    for _ in range(5):
        psi = scalar(random_packet(rng, grid128))
        H, K = random_polynomial(rng, 2), random_polynomial(rng, 2)
        HK = bracket_term(H, K)

        def L(F, f):
            return apply_covariant_liouvillian(F, g, f, hbar)

        lhs = L(H, L(K, psi)).values - L(K, L(H, psi)).values
        rhs = 1j * hbar * L(HK, psi).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-8 * max(1.0, np.max(np.abs(lhs)))


# --- Clebsch density ----------------------------------------------------------

def test_clebsch_density_of_zero(grid64):
    z = ScalarField(grid64, np.zeros(grid64.shape, complex))
    assert not np.any(clebsch_density(z, harmonic()).values)


@pytest.mark.parametrize("g", GAUGES, ids=["liouville", "harmonic"])
@pytest.mark.parametrize("derivatives", ["spectral", "analytic"])
def test_clebsch_two_forms_and_normalization(g, derivatives, grid128):
    rng = np.random.default_rng(5)
    for _ in range(4):
        psi = random_packet(rng, grid128)
        r1 = clebsch_density(psi, g, 0.9, form="divergence", derivatives=derivatives).values
        r2 = clebsch_density(psi, g, 0.9, form="expanded", derivatives=derivatives).values
        assert np.max(np.abs(r1 - r2)) <= 1e-10 * np.max(np.abs(r1))
        norm = quad(np.abs(psi.values[0]) ** 2, grid128)
        assert abs(quad(r1, grid128) - norm) <= 1e-10


def test_clebsch_analytic_and_spectral_agree(grid128):
    psi = packet_field(grid128, 0.1, -0.05, 0.06, kq=3.0, kp=-2.0)
    a = clebsch_density(psi, harmonic(), derivatives="analytic").values
    b = clebsch_density(psi, harmonic(), derivatives="spectral").values
    assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(a))


def test_thermal_state_density_is_boltzmann():
    P = ExactModelParams(1.0, 1.0, (0.0, 0.0, 0.0), 1e5)
    grid = make_grid(256, 256, 20 * P.sigma_q, 20 * P.sigma_p)
    st_ = ThermalState(P, spinor=(1.0,))
    psi = HybridField.from_analytic(grid, st_)
    rho = clebsch_density(psi, harmonic()).values
    q, p = grid.mesh
    ref = st_.density(q, p)
    mask = ref > 1e-6 * ref.max()
    assert np.max(np.abs(rho - ref)[mask]) / ref.max() <= 1e-8


def test_radial_real_state_density_formula():
    # real zero-phase radial psi in the harmonic gauge: rho = 2|psi|^2 + r/2 d|psi|^2/dr
    grid = make_grid(128, 128, 1.0, 1.0)
    q, p = grid.mesh
    r = np.hypot(q, p)
    f = lambda r: np.exp(-r ** 2 / 0.02) * (1 + 3 * r ** 2)
    psi = ScalarField(grid, np.sqrt(f(r)).astype(complex))
    rho = clebsch_density(psi, harmonic()).values
    h = 1e-5
    dfdr = (f(r + h) - f(r - h)) / (2 * h)        # 1D finite-difference oracle
    ref = 2 * f(r) + 0.5 * r * dfdr
    assert np.max(np.abs(rho - ref)) <= 1e-6 * np.max(np.abs(ref))


@pytest.mark.parametrize("g", GAUGES, ids=["liouville", "harmonic"])
def test_momentum_map_identity(g, grid128):
    # int H rho = Re <psi, L_H psi> for random polynomial H of degree <= 3
    rng = np.random.default_rng(2024)
    for _ in range(20):
        psi = scalar(random_packet(rng, grid128))
        H = random_polynomial(rng, int(rng.integers(0, 4)))
        hv, _ = H.on_grid(grid128)
        lhs = quad(hv * clebsch_density(psi, g).values, grid128)
        rhs = inner(psi.values, apply_covariant_liouvillian(H, g, psi).values, grid128).real
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


# --- energy -------------------------------------------------------------------

def test_energy_of_thermal_state():
    P = ExactModelParams(1.0, 1.0, (0.0, 0.0, 0.0), 1e5)
    grid = make_grid(256, 256, 20 * P.sigma_q, 20 * P.sigma_p)
    psi = HybridField.from_analytic(grid, ThermalState(P, spinor=(1.0,)))
    # the thermal amplitude decays like 1/r; the density form avoids the seam in L_H psi
    H0 = HamiltonianTerm.harmonic()
    hv, _ = H0.on_grid(grid)
    h = quad(hv * clebsch_density(psi, harmonic()).values, grid)
    assert h == pytest.approx(1e-5, rel=1e-3)


def test_energy_of_unit_hamiltonian(grid128):
    psi = scalar(packet_field(grid128, 0.1, 0.0, 0.06, kq=2.0))
    assert kvh_energy(psi, HamiltonianTerm.constant(1.0), harmonic()) == pytest.approx(1.0, abs=1e-12)


def test_energy_is_real_and_matches_density(grid128):
    rng = np.random.default_rng(9)
    psi = scalar(random_packet(rng, grid128))
    H = random_polynomial(rng, 3)
    lpsi = apply_covariant_liouvillian(H, liouville(), psi).values
    e = inner(psi.values, lpsi, grid128)
    assert abs(e.imag) <= 1e-12 * max(1.0, abs(e))
    hv, _ = H.on_grid(grid128)
    assert abs(kvh_energy(psi, H, liouville()) - quad(hv * clebsch_density(psi, liouville()).values, grid128)) <= 1e-10


def test_energy_conserved_by_rk4():
    grid = make_grid(128, 128, 2.0, 2.0)
    H = HamiltonianTerm.polynomial({(0, 2): 0.5, (2, 0): 0.5, (4, 0): 0.1})
    g = liouville()
    psi = ScalarField(grid, packet_field(grid, 0.3, 0.0, 0.1, kp=2.0).values[0])
    e0 = kvh_energy(psi, H, g)
    stepper = KvHStepper(H, g, grid)
    y = stepper.run(psi.values, 1e-3, 1000)
    assert abs(kvh_energy(ScalarField(grid, y), H, g) - e0) <= 1e-8


# --- time stepping ------------------------------------------------------------

def test_rk4_zero_step_is_identity(grid64):
    psi = scalar(packet_field(grid64, 0.1, 0.0, 0.1))
    assert np.array_equal(step_rk4(HamiltonianTerm.harmonic(), harmonic(), psi, 0.0).values, psi.values)


def test_rk4_cfl_violation(grid64):
    psi = scalar(packet_field(grid64, 0.1, 0.0, 0.1))
    with pytest.raises(CFLError, match="CFL bound"):
        step_rk4(HamiltonianTerm.harmonic(), harmonic(), psi, 1.0)


def test_rk4_full_period_returns():
    grid = make_grid(128, 128, 1.0, 1.0)
    psi0 = packet_field(grid, 0.3, 0.1, 0.08).values[0].real
    stepper = KvHStepper(HamiltonianTerm.harmonic(), harmonic(), grid)
    n = int(round(2 * np.pi / 1e-3))
    y = stepper.run(psi0, 2 * np.pi / n, n)
    assert np.sqrt(quad(np.abs(y - psi0) ** 2, grid)) <= 1e-6


def test_rk4_fourth_order():
    grid = make_grid(128, 128, 2.0, 2.0)
    pk = GaussianPacket(0.5, 0.0, 0.1, (1.0,))
    psi0 = HybridField.from_analytic(grid, pk).values[0].real
    q, p = grid.mesh
    exact = analytic_rotation(pk, 1.0).values(q, p)[0]
    stepper = KvHStepper(HamiltonianTerm.harmonic(), harmonic(), grid)
    errs = []
    for n in (250, 500, 1000):
        y = stepper.run(psi0, 1.0 / n, n)
        errs.append(np.sqrt(quad(np.abs(y - exact) ** 2, grid)))
    for a, b in zip(errs[:-1], errs[1:]):
        assert a / b == pytest.approx(16.0, rel=0.1)


def test_characteristics_identity_and_period():
    grid = make_grid(128, 128, 1.0, 1.0)
    H = HamiltonianTerm.harmonic(1.0, 2.0)
    sampled = ScalarField(grid, packet_field(grid, 0.3, -0.1, 0.08, kq=2.0).values[0])
    assert propagate_characteristics(H, harmonic(), sampled, 0.0) is sampled
    back = propagate_characteristics(H, harmonic(), sampled, 2 * np.pi / 2.0)
    assert np.max(np.abs(back.values - sampled.values)) <= 1e-8


def test_characteristics_match_rk4():
    grid = make_grid(128, 128, 1.0, 1.0)
    H = HamiltonianTerm.harmonic()
    psi = packet_field(grid, 0.3, 0.1, 0.08, kq=3.0)
    exact = propagate_characteristics(H, harmonic(), psi, 1.0).values[0]
    y = KvHStepper(H, harmonic(), grid).run(psi.values[0], 1e-3, 1000)
    assert np.sqrt(quad(np.abs(y - exact) ** 2, grid)) <= 1e-5
    # spline path on samples agrees with the closed form
    spl = propagate_characteristics(H, harmonic(), ScalarField(grid, psi.values[0]), 1.0).values
    assert np.sqrt(quad(np.abs(spl - exact) ** 2, grid)) <= 1e-3


def test_characteristics_preserve_norm():
    grid = make_grid(128, 128, 1.0, 1.0)
    psi = packet_field(grid, 0.2, 0.1, 0.08, kq=3.0)
    out = propagate_characteristics(HamiltonianTerm.harmonic(), harmonic(), psi, 2.3)
    assert abs(quad(np.abs(out.values) ** 2, grid).sum() - 1.0) <= 1e-10


def test_characteristics_reject_non_quadratic(grid64):
    psi = scalar(packet_field(grid64))
    with pytest.raises(HamiltonianError):
        propagate_characteristics(HamiltonianTerm.polynomial({(4, 0): 1.0}), harmonic(), psi, 1.0)
    with pytest.raises(HamiltonianError):
        propagate_characteristics(HamiltonianTerm.harmonic(), liouville(), psi, 1.0)


def _continuous_min(packet, g, start):
    """Minimum of the closed-form Clebsch density of ``packet`` near ``start``."""
    def rho(z):
        q, p = np.array([z[0]]), np.array([z[1]])
        v, d = packet.values(q, p)[0], packet.gradient(q, p)[:, 0]
        return float(np.real(clebsch_arrays(v, d, g, q, p, 1.0, "expanded", None, False))[0])

    return optimize.minimize(rho, start, method="Nelder-Mead",
                             options={"xatol": 1e-10, "fatol": 1e-12}).fun


def test_sign_preservation_under_kvh_flow():
    # nodal minima may move between nodes; the bound is the continuous minimum at t = 0
    grid = make_grid(128, 128, 2.0, 2.0)
    H = HamiltonianTerm.polynomial({(0, 2): 0.5, (2, 0): 0.5, (4, 0): 0.2})
    g = liouville()
    pk = GaussianPacket(0.4, 0.0, 0.12, (1.0,), kp=1.0)
    psi = HybridField.from_analytic(grid, pk)
    m0 = clebsch_density(psi, g).values
    j = np.unravel_index(np.argmin(m0), m0.shape)
    floor = _continuous_min(pk, g, grid.node(*j))
    assert floor <= m0.min()
    stepper = KvHStepper(H, g, grid)
    y = psi.values[0]
    worst = m0.min()
    for _ in range(4):
        y = stepper.run(y, 1e-3, 500)
        worst = min(worst, clebsch_density(ScalarField(grid, y), g).values.min())
    assert worst >= floor - 1e-6 * m0.max()


def test_liouville_consistency_of_density():
    # centred difference of rho matches {H, rho}
    grid = make_grid(128, 128, 2.0, 2.0)
    H = HamiltonianTerm.polynomial({(0, 2): 0.5, (2, 0): 0.5, (4, 0): 0.2})
    g = liouville()
    psi = packet_field(grid, 0.4, 0.0, 0.12, kp=1.0).values[0]
    stepper = KvHStepper(H, g, grid)
    res = []
    for dt in (1e-3, 5e-4):
        fw = stepper.run(psi, dt, 1)
        bw = _backward(stepper, psi, dt)
        rho_f = clebsch_density(ScalarField(grid, fw), g).values
        rho_b = clebsch_density(ScalarField(grid, bw), g).values
        rho = clebsch_density(ScalarField(grid, psi), g).values
        hq, hp = H.gradient(*grid.mesh)
        br = hq * d_p(rho, grid) - hp * d_q(rho, grid)
        res.append(np.max(np.abs((rho_f - rho_b) / (2 * dt) - br)))
    assert res[0] / res[1] == pytest.approx(4.0, rel=0.15)


def _backward(stepper, y, dt):
    return rk4(stepper.rhs, y.astype(complex), -dt)


# --- polar form ---------------------------------------------------------------

def test_polar_fields_examples(grid128):
    real = ScalarField(grid128, np.abs(packet_field(grid128, 0.1, 0.0, 0.1).values[0]))
    pf = polar_fields(real)
    assert not np.any(pf.phase)
    assert np.array_equal(pf.density, np.abs(real.values) ** 2)
    q, p = grid128.mesh
    hbar = 0.05
    psi = ScalarField(grid128, real.values * np.exp(1j * q * p / hbar))
    pf = polar_fields(psi, 1e-6, hbar)
    diff = np.angle(np.exp(1j * (pf.phase - q * p) / hbar))
    assert np.max(np.abs(diff[pf.mask])) <= 1e-12
    assert np.array_equal(pf.density, np.abs(psi.values) ** 2)


def test_phase_equation_in_liouville_gauge():
    # d_t S + {S, H} = L with L = p dH/dp - H on the supported region
    grid = make_grid(256, 256, 1.0, 1.0)
    H = HamiltonianTerm.polynomial({(0, 2): 0.5, (2, 0): 0.5, (4, 0): 0.3})
    g = liouville()
    psi = packet_field(grid, 0.2, -0.1, 0.08, kq=5.0, kp=-3.0).values[0]
    stepper = KvHStepper(H, g, grid)
    dt = 1e-4
    fw, bw = stepper.run(psi, dt, 1), _backward(stepper, psi, dt)
    pf = polar_fields(ScalarField(grid, psi), 1e-4)
    S_f = polar_fields(ScalarField(grid, fw), 1e-4).phase
    S_b = polar_fields(ScalarField(grid, bw), 1e-4).phase
    dS = np.angle(np.exp(1j * (S_f - S_b))) / (2 * dt)
    S = pf.phase
    # drop nodes whose stencil touches the unsupported region or a branch jump
    inner_mask = ndimage.binary_erosion(pf.mask, iterations=2)
    ok = inner_mask & jump_mask(S)
    Sq = np.zeros_like(S)
    Sp = np.zeros_like(S)
    Sq[1:-1] = (S[2:] - S[:-2]) / (2 * grid.dq)
    Sp[:, 1:-1] = (S[:, 2:] - S[:, :-2]) / (2 * grid.dp)
    q, p = grid.mesh
    hq, hp = H.gradient(q, p)
    lag = p * hp - H.value(q, p)
    res = dS + (Sq * hp - Sp * hq) - lag
    assert np.max(np.abs(res[ok])) <= 1e-3 * np.max(np.abs(lag[ok]) + np.abs(dS[ok]))
