"""Uniform periodic (q, p) grids, complex fields and spectral calculus.

All derivatives are Fourier-spectral on the periodic box
``[-lq, lq) x [-lp, lp)``; fields are expected to be negligible at the
boundary.  Arrays are row-major with q as the outer axis, and every kernel
accepts stacked arrays whose last two axes are the grid axes.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import scipy.fft as sfft

log = logging.getLogger(__name__)

BOUNDARY_WARN_RATIO = 1e-10


def fft_workers() -> int:
    """Kernel parallelism, capped by the ``KHS_THREADS`` environment variable."""
    try:
        return max(1, int(os.environ.get("KHS_THREADS", "1")))
    except ValueError:
        return 1


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseSpaceGrid:
    nq: int
    np: int
    lq: float
    lp: float

    @property
    def dq(self) -> float:
        return 2.0 * self.lq / self.nq

    @property
    def dp(self) -> float:
        return 2.0 * self.lp / self.np

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nq, self.np)

    @property
    def cell_area(self) -> float:
        return self.dq * self.dp

    @cached_property
    def q(self) -> np.ndarray:
        return -self.lq + np.arange(self.nq) * self.dq

    @cached_property
    def p(self) -> np.ndarray:
        return -self.lp + np.arange(self.np) * self.dp

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        Q, P = np.meshgrid(self.q, self.p, indexing="ij")
        Q.setflags(write=False)
        P.setflags(write=False)
        return Q, P

    @cached_property
    def kq(self) -> np.ndarray:
        return _wavenumbers(self.nq, self.dq)

    @cached_property
    def kp(self) -> np.ndarray:
        return _wavenumbers(self.np, self.dp)

    def node(self, j: int, k: int) -> tuple[float, float]:
        return (-self.lq + j * self.dq, -self.lp + k * self.dp)


def _wavenumbers(n: int, h: float) -> np.ndarray:
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
    # Nyquist coefficient is dropped so real fields keep real derivatives.
    k[n // 2] = 0.0
    return k


def make_grid(nq: int, np_: int, lq: float, lp: float) -> PhaseSpaceGrid:
    """Build a grid; sizes must be even and at least 8, half-widths positive."""
    for name, n in (("nq", nq), ("np", np_)):
        if int(n) != n or n < 8 or n % 2:
            raise ValueError(f"{name} must be an even integer >= 8, got {n}")
    for name, v in (("lq", lq), ("lp", lp)):
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive, got {v}")
    return PhaseSpaceGrid(int(nq), int(np_), float(lq), float(lp))


class AnalyticState(Protocol):
    """Closed-form wavefunction with analytic first derivatives.

    ``values(q, p)`` returns shape ``(n, *q.shape)``, ``gradient(q, p)``
    returns ``(2, n, *q.shape)`` ordered (d/dq, d/dp).
    """

    n: int

    def values(self, q: np.ndarray, p: np.ndarray) -> np.ndarray: ...

    def gradient(self, q: np.ndarray, p: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: PhaseSpaceGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite values")


@dataclass(frozen=True, eq=False)
class VectorField:
    q: ScalarField
    p: ScalarField

    def __post_init__(self):
        if self.q.grid != self.p.grid:
            raise GridMismatchError("vector components live on different grids")

    @property
    def grid(self) -> PhaseSpaceGrid:
        return self.q.grid


@dataclass(frozen=True, eq=False)
class HybridField:
    """n-component wavefunction sampled on a grid (n = 1 is the classical case).

    ``analytic`` optionally carries the closed form the samples came from;
    density and diagnostic routines then use its exact gradient instead of
    spectral differentiation.
    """

    grid: PhaseSpaceGrid
    values: np.ndarray
    analytic: Optional[AnalyticState] = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"hybrid field must have shape (n, {self.grid.nq}, {self.grid.np}), "
                             f"got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_scalar(cls, f: ScalarField) -> "HybridField":
        return cls(f.grid, f.values[None].astype(complex))

    @classmethod
    def from_analytic(cls, grid: PhaseSpaceGrid, state: AnalyticState) -> "HybridField":
        Q, P = grid.mesh
        return cls(grid, np.asarray(state.values(Q, P), dtype=complex), analytic=state)

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[i])


def require_same_grid(*grids: PhaseSpaceGrid) -> PhaseSpaceGrid:
    g0 = grids[0]
    for g in grids[1:]:
        if g != g0:
            raise GridMismatchError(f"grid mismatch: {g0} vs {g}")
    return g0


# ---------------------------------------------------------------------------
# array kernels (last two axes are (q, p))

def d_q(values: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    return _diff(values, grid.kq, axis=-2)


def d_p(values: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    return _diff(values, grid.kp, axis=-1)


def _diff(values: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    w = fft_workers()
    n = k.size
    shape = [1] * values.ndim
    if np.isrealobj(values):
        kr = k[: n // 2 + 1]
        shape[axis] = kr.size
        spec = sfft.rfft(values, axis=axis, workers=w)
        return sfft.irfft(1j * kr.reshape(shape) * spec, n=n, axis=axis, workers=w)
    shape[axis] = n
    spec = sfft.fft(values, axis=axis, workers=w)
    return sfft.ifft(1j * k.reshape(shape) * spec, axis=axis, workers=w)


def grad(values: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    """Spectral gradient, stacked as ``(2, *values.shape)``."""
    return np.stack([d_q(values, grid), d_p(values, grid)])


def div(vq: np.ndarray, vp: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    return d_q(vq, grid) + d_p(vp, grid)


def bracket_from_gradients(gf: np.ndarray, gg: np.ndarray) -> np.ndarray:
    """{f, g} = f_q g_p - f_p g_q from stacked gradients."""
    return gf[0] * gg[1] - gf[1] * gg[0]


def dealias(values: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    """2/3-rule truncation in both grid directions."""
    w = fft_workers()
    spec = sfft.fft2(values, axes=(-2, -1), workers=w)
    mq = np.abs(np.fft.fftfreq(grid.nq) * grid.nq) > grid.nq / 3
    mp = np.abs(np.fft.fftfreq(grid.np) * grid.np) > grid.np / 3
    spec[..., mq, :] = 0.0
    spec[..., :, mp] = 0.0
    out = sfft.ifft2(spec, axes=(-2, -1), workers=w)
    return out.real if np.isrealobj(values) else out


def quad(values: np.ndarray, grid: PhaseSpaceGrid) -> np.ndarray:
    """Riemann sum over the last two axes (numpy pairwise reduction)."""
    v = np.ascontiguousarray(values)
    flat = v.reshape(v.shape[:-2] + (-1,))
    return flat.sum(axis=-1) * grid.cell_area


def boundary_ratio(values: np.ndarray) -> float:
    a = np.abs(values)
    peak = a.max()
    if peak == 0:
        return 0.0
    ring = max(a[..., 0, :].max(), a[..., -1, :].max(), a[..., :, 0].max(), a[..., :, -1].max())
    return float(ring / peak)


def check_boundary(values: np.ndarray, what: str = "field") -> None:
    r = boundary_ratio(values)
    if r > BOUNDARY_WARN_RATIO:
        warnings.warn(f"{what} is not negligible on the boundary ring "
                      f"(max ratio {r:.2e}); periodic derivatives will see a seam",
                      RuntimeWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# field-level operations

def spectral_gradient(f: ScalarField) -> VectorField:
    g = f.grid
    return VectorField(ScalarField(g, d_q(f.values, g)), ScalarField(g, d_p(f.values, g)))


def divergence(v: VectorField) -> ScalarField:
    g = require_same_grid(v.q.grid, v.p.grid)
    return ScalarField(g, div(v.q.values, v.p.values, g))


def poisson_bracket(f: ScalarField, g: ScalarField, dealias_products: bool = False) -> ScalarField:
    grid = require_same_grid(f.grid, g.grid)
    out = bracket_from_gradients(grad(f.values, grid), grad(g.values, grid))
    if dealias_products:
        out = dealias(out, grid)
    return ScalarField(grid, out)


def product(f: ScalarField, g: ScalarField, dealias_products: bool = False) -> ScalarField:
    grid = require_same_grid(f.grid, g.grid)
    out = f.values * g.values
    if dealias_products:
        out = dealias(out, grid)
    return ScalarField(grid, out)


def integrate(f: ScalarField) -> complex:
    return complex(quad(f.values, f.grid))


def symplectic_j(a, b):
    """J(a, b) = (b, -a)."""
    return b, -a


# ---------------------------------------------------------------------------
# snapshot files: raw little-endian float64 planes + JSON sidecar

def write_snapshot(stem: str | os.PathLike, values: np.ndarray, grid: PhaseSpaceGrid,
                   time: float) -> tuple[Path, Path]:
    """Write ``stem.bin`` and ``stem.json``.

    Planes are ordered per component: real plane, then imaginary plane.
    """
    v = np.asarray(values)
    if v.shape == grid.shape:
        v = v[None]
    if v.shape[1:] != grid.shape:
        raise ValueError("snapshot values do not match the grid")
    stem = Path(stem)
    planes = np.empty((v.shape[0], 2) + grid.shape, dtype="<f8")
    planes[:, 0] = v.real
    planes[:, 1] = v.imag if np.iscomplexobj(v) else 0.0
    bin_path = stem.with_suffix(".bin")
    json_path = stem.with_suffix(".json")
    bin_path.write_bytes(planes.tobytes(order="C"))
    meta = {"nq": grid.nq, "np": grid.np, "lq": grid.lq, "lp": grid.lp,
            "components": int(v.shape[0]), "time": float(time)}
    json_path.write_text(json.dumps(meta, sort_keys=True) + "\n")
    return bin_path, json_path


def read_snapshot(stem: str | os.PathLike) -> tuple[np.ndarray, PhaseSpaceGrid, float]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    grid = make_grid(meta["nq"], meta["np"], meta["lq"], meta["lp"])
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    planes = raw.reshape((meta["components"], 2) + grid.shape)
    return planes[:, 0] + 1j * planes[:, 1], grid, float(meta["time"])
