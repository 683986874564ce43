import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.special import erfc

from koopman_hybrid.exact import (SIGMA, DegenerateCouplingError, ExactModelParams, GaussianPacket, RadialAmplitude,
                                  RadialTaper, ThermalState, UnresolvedGridError, UnsupportedRegimeError,
                                  _probe_radial, ag_exact, ag_phase, ag_quantum_density, amplitude_from_density,
                                  branch_frequencies, coupling_matrix, diagonalize_coupling, exact_quantum_density,
                                  hybrid_exact, radial_overlap, thermal_density, thermal_initial_state, thermal_u)
from koopman_hybrid.gauge import harmonic
from koopman_hybrid.hybrid import classical_density, quantum_density
from koopman_hybrid.kvh import clebsch_density
from koopman_hybrid.phase_space import HybridField, ScalarField, make_grid, quad


def fig_grid(P, width=20.0, n=256):
    return make_grid(n, n, width * P.sigma_q, width * P.sigma_p)


# --- coupling diagonalization -------------------------------------------------

def test_diagonalize_examples():
    d = diagonalize_coupling((0, 0, 2))
    assert d.lam == 2.0 and np.allclose(d.U, np.eye(2), atol=1e-15)
    d = diagonalize_coupling((0.95, 0, 0))
    assert d.lam == pytest.approx(0.95, abs=1e-15)
    assert np.max(np.abs(d.U - np.array([[1, 1], [1, -1]]) / np.sqrt(2))) <= 1e-12
    with pytest.raises(DegenerateCouplingError):
        diagonalize_coupling((0, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3).filter(lambda a: np.linalg.norm(a) > 1e-3))
def test_diagonalization_properties(alpha):
    d = diagonalize_coupling(alpha)
    U = d.U
    assert d.lam == pytest.approx(np.linalg.norm(alpha), rel=1e-14)
    assert np.max(np.abs(U @ U.conj().T - np.eye(2))) <= 1e-12
    assert np.max(np.abs(U @ coupling_matrix(alpha) @ U.conj().T - d.lam * SIGMA[2])) <= 1e-12 * max(1, d.lam)
    for row in U:
        k = np.flatnonzero(np.abs(row) > 1e-14)[0]
        assert abs(row[k].imag) <= 1e-15 and row[k].real > 0


def test_branch_frequencies():
    wp, wm = branch_frequencies(ExactModelParams(alpha=(0.95, 0, 0)))
    assert wp == pytest.approx(1.39642400, abs=1e-8)
    assert wm == pytest.approx(0.22360680, abs=1e-8)
    with pytest.raises(UnsupportedRegimeError):
        branch_frequencies(ExactModelParams(alpha=(1.2, 0, 0)))


def test_params_validation():
    for bad in ({"beta": 0.0}, {"m": -1.0}, {"hbar": 0.0}):
        with pytest.raises(ValueError):
            ExactModelParams(**bad)


# --- exact hybrid solution ----------------------------------------------------

def _packet_grid():
    return make_grid(128, 128, 2.0, 2.0)


def test_hybrid_exact_at_zero_time():
    P = ExactModelParams(alpha=(0.3, -0.2, 0.5), beta=1.0)
    grid = _packet_grid()
    u0 = HybridField.from_analytic(grid, GaussianPacket(0.3, 0.1, 0.15, (0.6, 0.8j), kq=1.0))
    assert np.max(np.abs(hybrid_exact(P, u0, 0.0).values - u0.values)) <= 1e-15
    samples = HybridField(grid, u0.values)
    assert np.max(np.abs(hybrid_exact(P, samples, 0.0).values - u0.values)) <= 1e-12


def test_slow_branch_recurrence():
    P = ExactModelParams(alpha=(0.95, 0, 0), beta=1.0)
    U = diagonalize_coupling(P.alpha).U
    spinor = np.conj(U).T @ np.array([0.0, 1.0])          # only the slow branch is populated
    base = GaussianPacket(0.3, -0.2, 0.2, spinor, kq=2.0)
    u0 = HybridField.from_analytic(_packet_grid(), base)
    T = 2 * np.pi / branch_frequencies(P)[1]
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, (2, 50))
    out = hybrid_exact(P, u0, T, z=z)
    assert np.max(np.abs(out - base.values(*z))) <= 1e-12


def test_hybrid_exact_conserves_norm():
    P = ExactModelParams(alpha=(0.5, 0.2, 0.1), beta=1.0)
    grid = make_grid(128, 128, 3.0, 3.0)
    u0 = HybridField.from_analytic(grid, GaussianPacket(0.4, 0.0, 0.15, (0.6, 0.8)))
    n0 = quad(np.sum(np.abs(u0.values) ** 2, axis=0), grid)
    for t in (0.7, 3.1, 8.0):
        u = hybrid_exact(P, u0, t)
        assert abs(quad(np.sum(np.abs(u.values) ** 2, axis=0), grid) - n0) <= 1e-9


def test_uncoupled_thermal_state_is_stationary():
    P = ExactModelParams(alpha=(0, 0, 0))
    grid = fig_grid(P)
    u0 = thermal_initial_state(P, grid)
    for t in (1.3, 5.0, 9.9):
        assert np.max(np.abs(hybrid_exact(P, u0, t).values - u0.values)) <= 1e-10 * np.max(np.abs(u0.values))


def test_hybrid_exact_rejects_unsupported_regime():
    P = ExactModelParams(alpha=(2.0, 0, 0), beta=1.0)
    u0 = HybridField.from_analytic(_packet_grid(), GaussianPacket(0, 0, 0.2, (1.0, 0.0)))
    with pytest.raises(UnsupportedRegimeError):
        hybrid_exact(P, u0, 1.0)


def test_classical_density_is_branch_sum():
    # rho = rho_+ + rho_- with the branch Clebsch densities of the rotated components
    P = ExactModelParams(alpha=(0.95, 0, 0))
    grid = fig_grid(P)
    u = hybrid_exact(P, thermal_initial_state(P, grid), 2.4)
    U = diagonalize_coupling(P.alpha).U
    y = np.einsum("ab,b...->a...", U, u.values)
    parts = [clebsch_density(ScalarField(grid, y[a]), harmonic(), derivatives="spectral").values for a in range(2)]
    rho = classical_density(HybridField(grid, u.values), harmonic(), derivatives="spectral").values
    assert np.max(np.abs(rho - parts[0] - parts[1])) <= 1e-9 * np.max(rho)


# --- thermal state ------------------------------------------------------------

def test_thermal_state_values():
    P = ExactModelParams(omega=1.3, beta=2e3)
    st_ = ThermalState(P)
    v = st_.values(np.zeros(1), np.zeros(1))
    assert abs(v[0, 0]) ** 2 == pytest.approx(P.omega * P.beta / (4 * np.pi), rel=1e-14)
    assert st_.density(0.0, 0.0) == pytest.approx(P.omega * P.beta / (2 * np.pi), rel=1e-14)
    assert thermal_u(np.array([0.0]))[0] == 0.5
    # the series and closed-form branches meet smoothly at s = 1
    s = np.array([1 - 1e-12, 1.0, 1 + 1e-12])
    assert np.ptp(thermal_u(s)) <= 1e-12


def test_thermal_initial_state_on_grid(fig1_params):
    grid = fig_grid(fig1_params)
    u0 = thermal_initial_state(fig1_params, grid)
    rho = quantum_density(u0)
    assert np.max(np.abs(rho / np.trace(rho).real - np.diag([1.0, 0.0]))) <= 1e-14
    q, p = grid.mesh
    dens = classical_density(u0, harmonic()).values
    ref = ThermalState(fig1_params).density(q, p)
    mask = ref > 1e-6 * ref.max()
    assert np.max(np.abs(dens - ref)[mask]) / ref.max() <= 1e-8


def test_thermal_initial_state_needs_resolution(fig1_params):
    coarse = fig_grid(fig1_params, n=64)
    with pytest.raises(UnresolvedGridError, match="nodes across 4 sigma"):
        thermal_initial_state(fig1_params, coarse)


def test_tapered_state_is_normalized_and_compact():
    P = ExactModelParams()
    st_ = ThermalState(P, taper=RadialTaper(6.0, 9.5), normalize=True)
    grid = fig_grid(P)
    u = HybridField.from_analytic(grid, st_)
    assert quad(np.sum(np.abs(u.values) ** 2, axis=0), grid) == pytest.approx(1.0, abs=1e-10)
    q, p = grid.mesh
    r = np.hypot(q / P.sigma_q, p / P.sigma_p)
    peak = np.max(np.abs(u.values))
    assert np.max(np.abs(u.values[:, r > 9.5])) <= 1e-6 * peak
    assert np.max(np.abs(u.values[:, r > 12.0])) <= 1e-20 * peak


def test_taper_window_values():
    t = RadialTaper(6.0, 9.5)
    w, _ = t(np.array([0.0, 18.0, 0.5 * 7.75 ** 2, 0.5 * 9.5 ** 2]))
    assert w[0] == 1.0 and w[2] == 0.5
    assert 1 - w[1] == pytest.approx(0.5 * erfc(3.0), rel=1e-12)
    assert w[3] == pytest.approx(0.5 * erfc(3.0), rel=1e-12)
    # derivative against a centered difference
    s = np.linspace(5.0, 60.0, 40)
    h = 1e-5
    fd = (t(s + h)[0] - t(s - h)[0]) / (2 * h)
    assert np.max(np.abs(t(s)[1] - fd)) <= 1e-8


# --- amplitude from a radial density ----------------------------------------

def test_amplitude_from_boltzmann_target():
    P = ExactModelParams(omega=1.0, beta=50.0)
    grid = fig_grid(P, n=128)
    target = ThermalState(P).density
    amp = amplitude_from_density(target, P, grid)
    ref = ThermalState(P, spinor=(1.0,)).values(*grid.mesh)[0].real
    assert np.max(np.abs(amp.values - ref) / ref) <= 1e-10


def test_amplitude_from_zero_target():
    P = ExactModelParams(beta=50.0)
    grid = fig_grid(P, n=64)
    amp = amplitude_from_density(lambda q, p: 0 * q, P, grid)
    assert not np.any(amp.values)


def test_amplitude_from_uniform_disc_matches_ode_solver():
    P = ExactModelParams(omega=1.0, beta=50.0)
    grid = fig_grid(P, n=64)
    E0 = 0.05

    def target(q, p):
        h = 0.5 * (q ** 2 + p ** 2)
        return np.where(h <= E0, 1.0, 0.0)

    amp = amplitude_from_density(target, P, grid, breakpoints=[E0])
    # s u' + 2u = rho, integrated numerically from the regular point u(0) = rho(0)/2
    h_eval = np.linspace(1e-4, 0.2, 200)
    sol = solve_ivp(lambda h, u: (np.where(h <= E0, 1.0, 0.0) - 2 * u) / h, (1e-4, 0.2), [0.5],
                    t_eval=h_eval, rtol=1e-12, atol=1e-14, max_step=1e-3)
    q = np.sqrt(2 * h_eval)
    ra = RadialAmplitude(_probe_radial(target, P, grid), P, [E0])
    assert np.max(np.abs(ra.values(q, 0 * q)[0] ** 2 - sol.y[0])) <= 1e-9
    assert amp.values.max() == pytest.approx(np.sqrt(0.5), rel=1e-12)


def test_amplitude_rejects_bad_targets():
    P = ExactModelParams(beta=50.0)
    grid = fig_grid(P, n=64)
    with pytest.raises(ValueError, match="nonnegative"):
        amplitude_from_density(lambda q, p: -np.exp(-q ** 2 - p ** 2), P, grid)
    with pytest.raises(ValueError, match="not radial"):
        amplitude_from_density(lambda q, p: np.exp(-q ** 2 - 3 * p ** 2), P, grid)


# --- exact AG solution --------------------------------------------------------

def test_ag_exact_at_zero_time(fig1_params):
    grid = fig_grid(fig1_params, n=64)
    d0 = thermal_density(fig1_params)
    out = ag_exact(fig1_params, d0, 0.0, grid=grid)
    assert np.max(np.abs(out - d0(*grid.mesh))) <= 1e-10 * np.max(np.abs(out))


def test_ag_phase_examples():
    P = ExactModelParams(alpha=(0.95, 0, 0))
    for t in (0.0, 1.0, 7.7):
        assert ag_phase(P, 0.0, 0.0, t) == 0.0
    assert ag_phase(P, 1.0, 0.0, np.pi) == pytest.approx(-1.49225651, abs=1e-8)
    assert ag_phase(P, 1.0, 0.0, np.pi) == pytest.approx(-0.95 * np.pi / 2, rel=1e-14)


def test_ag_exact_hermitian_and_trace_conserving(fig1_params):
    grid = fig_grid(fig1_params, width=40.0)
    d0 = thermal_density(fig1_params)
    for t in (2.4, 8.8):
        D = ag_exact(fig1_params, d0, t, grid=grid)
        assert np.max(np.abs(D - np.conj(np.swapaxes(D, 0, 1)))) <= 1e-12 * np.max(np.abs(D))
        assert abs(quad(np.trace(D).real, grid) - 1.0) <= 1e-9


def test_ag_quantum_density_matches_quadrature(fig1_params):
    grid = fig_grid(fig1_params, width=40.0, n=512)
    d0 = thermal_density(fig1_params)
    for t in (0.0, 1.5, 5.7):
        D = ag_exact(fig1_params, d0, t, grid=grid)
        num = quad(D, grid)
        assert np.max(np.abs(num - ag_quantum_density(fig1_params, t))) <= 1e-8


# --- quantum density by radial overlaps ---------------------------------------

def test_exact_quantum_density_matches_grid_quadrature(fig1_params):
    # the untapered amplitude has 1/s tails that no finite box holds, so its default rule is
    # checked against a finer radial rule instead
    untapered = ThermalState(fig1_params)
    fine = exact_quantum_density(fig1_params, 3.3, untapered, n_r=1600)
    assert np.max(np.abs(exact_quantum_density(fig1_params, 3.3, untapered) - fine)) <= 1e-11

    # whole-plane overlap integral against grid quadrature of the tapered solution
    taper = RadialTaper(6.0, 9.5)
    st_ = ThermalState(fig1_params, taper=taper, normalize=True)
    grid = fig_grid(fig1_params, width=40.0, n=512)
    base = HybridField.from_analytic(grid, st_)
    for t in (0.5, 2.4):
        u = hybrid_exact(fig1_params, base, t)
        num = quantum_density(u)
        # the taper is only finitely smooth, so the radial rule needs more nodes than the default
        ref = exact_quantum_density(fig1_params, t, st_, n_r=1600)
        assert np.max(np.abs(num - ref)) <= 1e-9


def test_radial_overlap_angular_rule_converged(fig1_params):
    st_ = ThermalState(fig1_params)
    M = np.array([[np.cos(1.0), -np.sin(1.0) / 4.0], [4.0 * np.sin(1.0), np.cos(1.0)]])
    y = np.sqrt(2.0)
    auto = radial_overlap(st_.amplitude, M, y)
    ref = radial_overlap(st_.amplitude, M, y, n_theta=4096)
    assert abs(auto - ref) <= 1e-13
