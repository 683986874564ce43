"""Shared fixtures and the acceptance-criterion recorder."""
from __future__ import annotations

import numpy as np
import pytest

from koopman_hybrid.exact import ExactModelParams, GaussianPacket
from koopman_hybrid.phase_space import HybridField, ScalarField, make_grid

# criterion number -> (passed, detail); filled by the acceptance suite
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(num: int, passed: bool, detail: str) -> None:
    prev = CRITERIA.get(num)
    if prev is not None:
        passed = passed and prev[0]
        detail = prev[1] + "; " + detail
    CRITERIA[num] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        ok, detail = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def packet_field(grid, q0=0.0, p0=0.0, width=0.1, spinor=(1.0,), kq=0.0, kp=0.0) -> HybridField:
    return HybridField.from_analytic(grid, GaussianPacket(q0, p0, width, spinor, kq, kp))


def random_packet(rng, grid, n=1, spread=0.15, width=(0.05, 0.07), kmax=4.0) -> HybridField:
    """Band-limited decaying Gaussian packet with a random spinor and momentum."""
    spinor = rng.normal(size=n) + 1j * rng.normal(size=n)
    spinor /= np.linalg.norm(spinor)
    return packet_field(grid, rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                        rng.uniform(*width), spinor, rng.uniform(-kmax, kmax), rng.uniform(-kmax, kmax))


def scalar(field: HybridField) -> ScalarField:
    return ScalarField(field.grid, field.values[0])


@pytest.fixture(scope="session")
def grid64():
    return make_grid(64, 64, 1.0, 1.0)


@pytest.fixture(scope="session")
def grid128():
    return make_grid(128, 128, 1.0, 1.0)


@pytest.fixture(scope="session")
def fig1_params():
    return ExactModelParams(1.0, 1.0, (0.95, 0.0, 0.0), 1e5, 1.0)
