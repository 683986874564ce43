"""Batch experiment runner: ``khs run <config>`` and ``khs verify <config>``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config, resolved
from .exact import (ExactModelParams, RadialTaper, ThermalState, UnresolvedGridError, ag_exact,
                    ag_quantum_density, check_resolution, exact_quantum_density, hybrid_exact,
                    model_hamiltonian, thermal_density)
from .gauge import from_name, harmonic, regauge
from .hybrid import (HybridDensityField, HybridStepper, bloch_vector, branch_propagate, hybrid_density,
                     purity, quantum_density)
from .kvh import propagate_characteristics
from .phase_space import HybridField, make_grid, quad, write_snapshot
from . import svg

log = logging.getLogger("koopman_hybrid")

COLUMNS = ("t", "norm", "energy", "purity", "n_x", "n_y", "n_z", "rho_min", "rho_integral")
TOLERANCES = {
    # (norm drift, energy drift)
    "closed_form": (1e-9, 1e-8),
    "rk4": (1e-5, 1e-5),
}
PSD_TOL = 1e-10


class InvariantBreach(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# observables CSV

def format_value(x: float) -> str:
    # adding 0.0 folds negative zero into zero
    return f"{float(x) + 0.0:.14e}"


def emit_observables(series: Sequence[Sequence[float]], path) -> Path:
    """Header plus one line per row; 15 significant digits, LF endings."""
    if len(series) == 0:
        raise ValueError("observable series is empty")
    lines = [",".join(COLUMNS)]
    for row in series:
        if len(row) != len(COLUMNS):
            raise ValueError(f"row has {len(row)} values, expected {len(COLUMNS)}")
        lines.append(",".join(format_value(x) for x in row))
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_observables(path) -> tuple[list[str], list[list[str]]]:
    """(header, rows as decimal strings); '#' comment lines are skipped."""
    lines = [ln for ln in Path(path).read_text().split("\n") if ln and not ln.startswith("#")]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def provenance_line(cfg: ExperimentConfig) -> str:
    return f"# koopman-hybrid-sim v{__version__} config-hash={cfg.config_hash()}"


def _prepend(path: Path, line: str) -> None:
    body = path.read_text()
    with open(path, "w", newline="\n") as fh:
        fh.write(line + "\n" + body)


# ---------------------------------------------------------------------------
# model setup

@dataclass
class Setup:
    cfg: ExperimentConfig
    params: ExactModelParams
    grid: object
    gauge: object
    H: object
    state0: ThermalState
    upsilon0: HybridField

    @property
    def closed_form(self) -> bool:
        return self.cfg.solver != "rk4"


def build(cfg: ExperimentConfig) -> Setup:
    params = ExactModelParams(cfg.m, cfg.omega, cfg.alpha, cfg.beta, cfg.hbar)
    grid = make_grid(cfg.nq, cfg.np, cfg.lq, cfg.lp)
    check_resolution(params, grid)
    g = from_name(cfg.gauge)
    taper = RadialTaper(*cfg.taper) if isinstance(cfg.taper, tuple) else None
    state0 = ThermalState(params, taper=taper, normalize=taper is not None)
    u0 = HybridField.from_analytic(grid, state0)
    if g.kind != harmonic().kind:
        u0 = regauge(u0, harmonic(), g, params.hbar)
    return Setup(cfg, params, grid, g, model_hamiltonian(params), state0, u0)


def _closed_form_state(s: Setup, t: float) -> HybridField:
    """Closed-form solution at t, expressed in the configured gauge."""
    base = HybridField.from_analytic(s.grid, s.state0)
    if s.cfg.solver == "exact":
        out = hybrid_exact(s.params, base, t)
    elif s.H.is_scalar:
        out = propagate_characteristics(s.H.scalar, harmonic(), base, t, s.params.hbar)
    else:
        out = branch_propagate(s.H, base, t, s.params.hbar, g=harmonic())
    if s.gauge.kind != harmonic().kind:
        out = regauge(out, harmonic(), s.gauge, s.params.hbar)
    return out


def observables_row(s: Setup, t: float, ups: HybridField, rho_hat: Optional[np.ndarray] = None):
    """One CSV row plus the density field (for snapshots and plots)."""
    D = hybrid_density(ups, s.gauge, s.params.hbar)
    return _row_from_density(s, t, D, rho_hat if rho_hat is not None else quantum_density(ups)), D


def _row_from_density(s: Setup, t: float, D: HybridDensityField, rho_hat: np.ndarray):
    q, p = s.grid.mesh
    rho = D.trace().values
    energy = float(np.real(quad(np.einsum("ab...,ba...->...", s.H.matrix(q, p), D.values), s.grid)))
    norm = float(np.real(np.trace(rho_hat)))
    rn = rho_hat / norm
    n = bloch_vector(rn)
    return [t, norm, energy, purity(rn), n[0], n[1], n[2], float(rho.min()), float(quad(rho, s.grid))]


# ---------------------------------------------------------------------------
# experiment drivers; each returns (rows, snapshots {t: (values, density)}, extra)

def _sample_times(cfg: ExperimentConfig) -> np.ndarray:
    step = cfg.dt * cfg.sample_every
    n = int(round(cfg.t_final / step))
    return step * np.arange(n + 1)


def _snapshot_due(cfg: ExperimentConfig, t: float, step: float) -> bool:
    return any(abs(t - ts) < 0.5 * step for ts in cfg.snapshot_times)


def run_closed_form(s: Setup, on_sample: Optional[Callable] = None):
    cfg = s.cfg
    times = _sample_times(cfg)
    step = cfg.dt * cfg.sample_every
    rows, snaps = [], {}
    for t in times:
        ups = _closed_form_state(s, t)
        rho_hat = exact_quantum_density(s.params, t, s.state0)
        row, D = observables_row(s, t, ups, rho_hat)
        rows.append(row)
        if on_sample is not None:
            on_sample(t, ups)
        if _snapshot_due(cfg, t, step):
            snaps[float(t)] = (ups.values, D)
    # snapshot times that fall between samples are evaluated directly
    for ts in cfg.snapshot_times:
        if ts <= cfg.t_final and not any(abs(ts - k) < 0.5 * step for k in snaps):
            ups = _closed_form_state(s, ts)
            snaps[float(ts)] = (ups.values, hybrid_density(ups, s.gauge, s.params.hbar))
    return rows, snaps


def run_rk4(s: Setup, on_sample: Optional[Callable] = None):
    cfg = s.cfg
    stepper = HybridStepper(s.H, s.gauge, s.grid, s.params.hbar)
    nsteps = int(round(cfg.t_final / cfg.dt))
    snap_steps = {int(round(ts / cfg.dt)): ts for ts in cfg.snapshot_times if ts <= cfg.t_final}
    y = s.upsilon0.values
    y = y.real.copy() if stepper.real_ok and not np.any(y.imag) else y.copy()
    rows, snaps = [], {}

    def record(k, y):
        ups = HybridField(s.grid, y.astype(complex))
        t = k * cfg.dt
        if k % cfg.sample_every == 0:
            row, D = observables_row(s, t, ups)
            rows.append(row)
            if on_sample is not None:
                on_sample(t, ups)
        if k in snap_steps:
            snaps[float(snap_steps[k])] = (ups.values, hybrid_density(ups, s.gauge, s.params.hbar))

    record(0, y)
    stepper.check_dt(cfg.dt)
    for k in range(1, nsteps + 1):
        y = stepper.step(y, cfg.dt)
        record(k, y)
    return rows, snaps


def run_fig2(s: Setup):
    """AG evolution from the factorized thermal density (closed form)."""
    cfg = s.cfg
    d0 = thermal_density(s.params)
    times = _sample_times(cfg)
    step = cfg.dt * cfg.sample_every
    rows, snaps = [], {}
    for t in times:
        D = HybridDensityField(s.grid, ag_exact(s.params, d0, t, grid=s.grid))
        rho_hat = ag_quantum_density(s.params, t)
        rows.append(_row_from_density(s, t, D, rho_hat))
        if _snapshot_due(cfg, t, step):
            snaps[float(t)] = (None, D)
    return rows, snaps


def run_stationarity(s: Setup):
    ref = s.upsilon0.values
    dev = []

    def on_sample(t, ups):
        diff = ups.values - ref
        dev.append((t, float(np.sqrt(np.real(quad(np.sum(np.abs(diff) ** 2, axis=0), s.grid)))),
                    float(np.max(np.abs(diff)))))

    rows, snaps = (run_rk4 if s.cfg.solver == "rk4" else run_closed_form)(s, on_sample)
    return rows, snaps, dev


def run_convergence(s: Setup):
    """RK4 at dt and dt/2 against the closed-form solution at t_final."""
    cfg = s.cfg
    exact_vals = hybrid_exact(s.params, HybridField.from_analytic(s.grid, s.state0), cfg.t_final).values
    if s.gauge.kind != harmonic().kind:
        exact_vals = regauge(HybridField(s.grid, exact_vals), harmonic(), s.gauge, s.params.hbar).values
    out = []
    rows = snaps = None
    for dt in (cfg.dt, cfg.dt / 2):
        sub = Setup(_with(cfg, dt=dt, snapshot_times=() if rows is not None else cfg.snapshot_times),
                    s.params, s.grid, s.gauge, s.H, s.state0, s.upsilon0)
        sub.cfg = _with(sub.cfg, sample_every=max(1, int(round(cfg.dt * cfg.sample_every / dt))))
        last = {}
        r, sn = run_rk4(sub, lambda t, ups: last.__setitem__("u", ups))
        if rows is None:
            rows, snaps = r, sn
        err = float(np.sqrt(np.real(quad(np.sum(np.abs(last["u"].values - exact_vals) ** 2, axis=0), s.grid))))
        out.append((dt, err))
    return rows, snaps, out


def _time_tag(t: float) -> str:
    return f"t{t:010.4f}".replace(".", "p")


def _with(cfg, **kw):
    from dataclasses import replace
    return replace(cfg, **kw)


# ---------------------------------------------------------------------------
# invariant checks

def check_invariants(s: Setup, rows) -> list[str]:
    arr = np.asarray(rows)
    norm_tol, energy_tol = TOLERANCES["closed_form" if s.closed_form else "rk4"]
    problems = []
    if s.cfg.experiment == "fig2":
        # the AG flow conserves trace and energy; its purity is free to decay
        norm_tol, energy_tol = 1e-9, 1e-8
    nd = float(np.max(np.abs(arr[:, 1] - arr[0, 1])))
    ed = float(np.max(np.abs(arr[:, 2] - arr[0, 2])))
    if nd > norm_tol:
        problems.append(f"norm drift {nd:.3e} exceeds {norm_tol:.0e}")
    if ed > energy_tol:
        problems.append(f"energy drift {ed:.3e} exceeds {energy_tol:.0e}")
    if s.cfg.experiment != "fig2":
        # 2x2 eigenvalues from trace and purity: (1 +- |n|)/2 times the trace
        nvec = np.linalg.norm(arr[:, 4:7], axis=1)
        lam_min = float(np.min(arr[:, 1] * (1 - nvec) / 2))
        if lam_min < -PSD_TOL:
            problems.append(f"quantum density has eigenvalue {lam_min:.3e} < -{PSD_TOL:.0e}")
    return problems


# ---------------------------------------------------------------------------
# orchestration

def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None, quiet: bool = False) -> int:
    cfg = resolved(cfg)
    if output_dir is not None:
        cfg = _with(cfg, output_dir=output_dir)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = build(cfg)
    extra = None
    if cfg.experiment == "fig2":
        rows, snaps = run_fig2(s)
    elif cfg.experiment == "stationarity":
        rows, snaps, extra = run_stationarity(s)
    elif cfg.experiment == "convergence":
        rows, snaps, extra = run_convergence(s)
    elif cfg.solver == "rk4":
        rows, snaps = run_rk4(s)
    else:
        rows, snaps = run_closed_form(s)

    path = emit_observables(rows, out / "observables.csv")
    _prepend(path, provenance_line(cfg))
    if cfg.experiment == "stationarity":
        lines = ["t,l2_deviation,max_deviation"] + [",".join(format_value(x) for x in r) for r in extra]
        (out / "stationarity.csv").write_text("\n".join(lines) + "\n")
    if cfg.experiment == "convergence":
        lines = ["dt,l2_error"] + [",".join(format_value(x) for x in r) for r in extra]
        (out / "convergence.csv").write_text("\n".join(lines) + "\n")
        if not quiet:
            print(f"error ratio under dt halving: {extra[0][1] / extra[1][1]:.4f}")
    if cfg.emit_snapshots:
        sd = out / "snapshots"
        sd.mkdir(exist_ok=True)
        for t, (vals, D) in sorted(snaps.items()):
            tag = _time_tag(t)
            if vals is not None:
                write_snapshot(sd / f"upsilon_{tag}", vals, s.grid, t)
            write_snapshot(sd / f"density_{tag}", D.values.reshape((-1,) + s.grid.shape), s.grid, t)
    if cfg.emit_svg:
        arr = np.asarray(rows)
        svg.line_plot(arr[:, 0], arr[:, 3], out / "purity.svg", "purity", "t", "Tr rho^2")
        svg.line_plot(arr[:, 5], arr[:, 6], out / "bloch_yz.svg", "Bloch trajectory", "n_y", "n_z")
        for t, (_, D) in sorted(snaps.items()):
            svg.heatmap(D.trace().values, out / f"density_{_time_tag(t)}.svg", f"classical density t={t:g}")

    problems = check_invariants(s, rows)
    if cfg.experiment == "stationarity":
        bound = 1e-6 if s.closed_form else 1e-5
        worst = max(r[1] for r in extra)
        if worst > bound:
            problems.append(f"stationarity deviation {worst:.3e} exceeds {bound:.0e}")
    for msg in problems:
        print(f"khs: invariant breach: {msg}", file=sys.stderr)
    if not quiet:
        print(f"wrote {len(rows)} rows to {path}")
    return 2 if problems else 0


# ---------------------------------------------------------------------------
# verify

def verify(cfg: ExperimentConfig, out=None) -> int:
    """Invariant suite for the configured model at desk scale; prints a table."""
    from .verification import run_checks
    out = out or sys.stdout
    cfg = resolved(cfg)
    results = run_checks(build(cfg))
    width = max(len(r.name) for r in results)
    print(f"{'check'.ljust(width)}  {'value':>12}  {'tolerance':>10}  result", file=out)
    for r in results:
        print(f"{r.name.ljust(width)}  {r.value:12.3e}  {r.tolerance:10.1e}  {'PASS' if r.passed else 'FAIL'}",
              file=out)
    return 0 if all(r.passed for r in results) else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="khs", description="Hybrid classical-quantum phase-space simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--quiet", action="store_true")
    v = sub.add_parser("verify", help="run the invariant suite for a configuration")
    v.add_argument("config")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    try:
        cfg = parse_config(args.config)
        if args.command == "run":
            return run_experiment(cfg, args.output_dir, args.quiet)
        return verify(cfg)
    except (ConfigError, UnresolvedGridError) as exc:
        print(f"khs: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
