from __future__ import annotations

import numpy as np
import pytest

from bcdmhe import ConfigError, NlsProblem, ResidualBlock, SolverConfig, check_jacobians, solve
from bcdmhe.geometry import bearings, rotation_matrix
from bcdmhe.window import bearing_block

GN = SolverConfig(max_iterations=1, initial_damping=0.0)


def linear_problem(a: np.ndarray, b: np.ndarray, w: np.ndarray | None = None, name: str = "linear") -> NlsProblem:
    w = np.eye(a.shape[0]) if w is None else w
    return NlsProblem(a.shape[1], [ResidualBlock(lambda s: a @ s - b, lambda s: a, np.arange(a.shape[1]), w, name)])


def assert_monotone(report) -> None:
    costs = np.asarray(report.accepted_costs)
    assert np.all(np.diff(costs) <= 0.0)
    assert report.cost <= report.initial_cost


def ray_intersection(p1, d1, p2, d2) -> np.ndarray:
    """Intersect two lines ``p + t d`` in the plane."""
    t = np.linalg.solve(np.column_stack([d1, -d2]), p2 - p1)
    return p1 + t[0] * d1


def test_linear_one_step(rng):
    for n in (1, 5, 20, 50):
        a = rng.standard_normal((n + 10, n))
        b = rng.standard_normal(n + 10)
        report = solve(linear_problem(a, b), rng.standard_normal(n), GN)
        assert report.iterations == 1
        np.testing.assert_allclose(report.solution, np.linalg.solve(a.T @ a, a.T @ b), atol=1e-8)
        assert_monotone(report)


def test_fixed_point_returns_immediately():
    a = np.array([[2.0, 0.0], [0.0, 3.0]])
    report = solve(linear_problem(a, np.array([2.0, 3.0])), np.array([1.0, 1.0]))
    assert report.converged and report.iterations == 0
    np.testing.assert_array_equal(report.solution, [1.0, 1.0])


def test_two_landmark_triangulation():
    poses = np.array([[0.0, 0.0, 0.2], [1.0, -0.5, 1.0]])
    truth = np.array([[2.0, 1.5], [-0.5, 2.5]])
    ys, cols, fixed = [], [], []
    for j in range(2):
        for p in poses:
            ys.append(bearings(p[None], truth[j][None])[0])
            cols.append(2 * j)
            fixed.append(p)
    block = bearing_block(np.array(ys), np.broadcast_to(np.eye(2), (4, 2, 2)), 4, fixed_poses=np.array(fixed),
                          landmark_cols=np.array(cols))
    report = solve(NlsProblem(4, [block]), truth.ravel() + np.array([0.3, -0.2, 0.2, 0.25]),
                   SolverConfig(max_iterations=50))
    for j in range(2):
        dirs = [rotation_matrix(p[2]) @ bearings(p[None], truth[j][None])[0] for p in poses]
        oracle = ray_intersection(poses[0, :2], dirs[0], poses[1, :2], dirs[1])
        np.testing.assert_allclose(report.solution[2 * j:2 * j + 2], oracle, atol=1e-6)
    assert_monotone(report)


def test_check_jacobians_detects_corruption(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal(4)
    good = linear_problem(a, b)
    # central differences are exact on linear maps, so a coarse step isolates roundoff
    assert check_jacobians(good, rng.standard_normal(3), step=0.1, tol=1e-10) == []
    bad_a = a.copy()
    bad_a[1, 2] += 0.1
    bad = NlsProblem(3, [good.blocks[0], ResidualBlock(lambda s: a @ s - b, lambda s: bad_a, np.arange(3),
                                                       np.eye(4), "corrupted")])
    assert check_jacobians(bad, rng.standard_normal(3)) == ["corrupted"]


def test_nonlinear_costs_monotone_and_scale_invariant(rng):
    # Rosenbrock-like residuals
    def res(s):
        return np.array([10 * (s[1] - s[0] ** 2), 1 - s[0]])

    def jac(s):
        return np.array([[-20 * s[0], 10.0], [-1.0, 0.0]])

    cfg = SolverConfig(max_iterations=200, gradient_tolerance=1e-12, step_tolerance=0.0)
    sols = []
    for c in (1.0, 7.5):
        problem = NlsProblem(2, [ResidualBlock(res, jac, np.arange(2), c * np.eye(2))])
        report = solve(problem, np.array([-1.2, 1.0]), cfg)
        assert_monotone(report)
        sols.append(report.solution)
    np.testing.assert_allclose(sols[0], [1.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(sols[0], sols[1], atol=1e-6)


def test_deterministic(rng):
    a = rng.standard_normal((6, 3))
    b = rng.standard_normal(6)
    x0 = rng.standard_normal(3)
    r1 = solve(linear_problem(a, b), x0)
    r2 = solve(linear_problem(a, b), x0)
    assert np.array_equal(r1.solution, r2.solution) and r1.cost == r2.cost and r1.iterations == r2.iterations


def test_stacked_weights_match_dense(rng):
    a = rng.standard_normal((4, 2))
    b = rng.standard_normal(4)
    w1 = np.array([[2.0, 0.3], [0.3, 1.0]])
    w2 = np.array([[1.0, -0.2], [-0.2, 0.5]])
    dense = NlsProblem(2, [ResidualBlock(lambda s: a @ s - b, lambda s: a, np.arange(2),
                                         np.block([[w1, np.zeros((2, 2))], [np.zeros((2, 2)), w2]]))])
    stacked = NlsProblem(2, [ResidualBlock(lambda s: a @ s - b, lambda s: a, np.arange(2), np.stack([w1, w2]))])
    v = rng.standard_normal(2)
    assert dense.cost(v) == pytest.approx(stacked.cost(v), rel=1e-12)
    r = a @ v - b
    assert dense.cost(v) == pytest.approx(r[:2] @ w1 @ r[:2] + r[2:] @ w2 @ r[2:], rel=1e-12)


def test_input_validation():
    a = np.eye(2)
    with pytest.raises(ConfigError):
        solve(linear_problem(a, np.zeros(2)), np.array([np.nan, 0.0]))
    with pytest.raises(ConfigError):
        solve(linear_problem(a, np.zeros(2)), np.zeros(3))
    with pytest.raises(ConfigError):
        NlsProblem(1, [ResidualBlock(lambda s: s, lambda s: a, np.arange(2), a)])
    with pytest.raises(ConfigError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ConfigError):
        SolverConfig(initial_damping=-1.0)
