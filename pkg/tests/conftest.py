from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from exciter.model import ConstantExponential, ConstantLognormal, ModelSpec
from exciter.moments import stability_report
from exciter.simulate import SimConfig, simulate_path

DATA = Path(__file__).parent / "data"

# Metzler drift keeps lambda >= lambda0, so the thinning floor never binds and
# the moment equations hold exactly for the simulated process.
MC_SPEC = ModelSpec([0.8, 1.0], [[-1.0, 0.1], [0.05, -0.9]], [[0.3, 0.1], [0.3, 0.2]],
                    (ConstantExponential(1.0), ConstantLognormal(-0.5, 0.5)))
MC_PATHS = 10_000


@dataclass
class MonteCarlo:
    spec: ModelSpec
    grid: np.ndarray
    lam: np.ndarray  # (paths, grid, d)
    t_star: float


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def mc_spec():
    return MC_SPEC


@pytest.fixture(scope="session")
def monte_carlo():
    """Intensity of 10^4 independent paths at t = 1, 5, 20, t*, t* + 1, t* + 3 with t* = 20/|gamma_max|."""
    t_star = 20.0 / abs(stability_report(MC_SPEC).gamma_max)
    grid = np.array([1.0, 5.0, 20.0, t_star, t_star + 1.0, t_star + 3.0])
    cfg = SimConfig(seed=20240101, record_grid=tuple(grid))
    lam = np.array([simulate_path(MC_SPEC, grid[-1], cfg, stream=i).checkpoint_lambda
                    for i in range(MC_PATHS)])
    return MonteCarlo(MC_SPEC, grid, lam, t_star)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
