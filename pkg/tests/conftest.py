from __future__ import annotations

import numpy as np
import pytest

from bcdmhe import NoiseConfig, RobotParams, TimingConfig, make_scenario, run_simulation
from bcdmhe.scenarios import ScenarioParams


def central_difference(fun, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        jac[:, i] = (np.asarray(fun(x + e)).ravel() - np.asarray(fun(x - e)).ravel()) / (2 * step)
    return jac


def make_log(kind: str = "circle", frames: int = 60, noise: NoiseConfig | None = None,
             params: ScenarioParams | None = None, timing: TimingConfig | None = None, seed: int = 0):
    timing = timing or TimingConfig()
    robot = RobotParams()
    control, env = make_scenario(kind, params, robot, timing)
    noise = NoiseConfig.paper_defaults(timing.delta_vis, seed=seed) if noise is None else noise
    return run_simulation(control, robot, timing, noise, env, frames)


@pytest.fixture(scope="session")
def circle_log():
    return make_log("circle", 60, seed=3)


@pytest.fixture(scope="session")
def noiseless_circle_log():
    return make_log("circle", 60, NoiseConfig.zero())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one ``ACCEPTANCE <n> PASS|FAIL: detail`` line per criterion."""

    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
