from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import block_diag

from bcdmhe import (BearingScan, BlockArrivalCost, ConfigError, EstimatorConfig, MeasurementWindow, NoiseConfig,
                    RobotParams, SolverConfig, TimingConfig, bcd_correct_landmarks, bcd_correct_state, bcd_predict,
                    joint_predict, run_algorithm1, solve_landmark_subproblem, solve_state_subproblem)
from bcdmhe.batch import JointArrivalCost, batch_cost
from bcdmhe.bcd import solve_landmark_batch
from bcdmhe.geometry import bearings, rotation_matrix

from conftest import central_difference, make_log

ROBOT = RobotParams()
TIMING = TimingConfig()
WEIGHTS = NoiseConfig.paper_defaults()
R = 0.001 * np.eye(2)


def window_for(poses: np.ndarray, landmark: np.ndarray, gates: np.ndarray) -> MeasurementWindow:
    n = poses.shape[0]
    b = np.zeros((n, 1, 2))
    b[gates, 0] = bearings(poses[gates], np.repeat(landmark[None], gates.sum(), axis=0))
    return MeasurementWindow(0, np.diff(poses, axis=0), gates[:, None].copy(), b)


def world_ray(pose: np.ndarray, landmark: np.ndarray) -> np.ndarray:
    return rotation_matrix(pose[2]) @ bearings(pose[None], landmark[None])[0]


def test_two_ray_triangulation():
    poses = np.array([[0.0, 0.0, 0.3], [0.8, 0.4, 1.1]])
    truth = np.array([2.0, 2.0])
    window = window_for(poses, truth, np.array([True, True]))
    res = solve_landmark_subproblem(0, poses, window, truth + [0.4, -0.3], 1e6 * np.eye(2), R,
                                    SolverConfig(max_iterations=50))
    d1, d2 = world_ray(poses[0], truth), world_ray(poses[1], truth)
    t = np.linalg.solve(np.column_stack([d1, -d2]), poses[1, :2] - poses[0, :2])
    np.testing.assert_allclose(res.estimate, poses[0, :2] + t[0] * d1, atol=1e-6)
    assert res.j == 0


def test_single_bearing_lands_on_the_ray():
    poses = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.2]])
    truth = np.array([1.5, 1.0])
    window = window_for(poses, truth, np.array([False, True]))
    res = solve_landmark_subproblem(0, poses, window, np.array([1.0, 1.5]), 0.25 * np.eye(2), 1e-8 * np.eye(2),
                                    SolverConfig(max_iterations=100))
    d = world_ray(poses[1], truth)
    rel = res.estimate - poses[1, :2]
    assert abs(rel[0] * d[1] - rel[1] * d[0]) < 1e-6
    assert rel @ d > 0


def test_landmark_requires_last_frame_sighting():
    poses = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
    window = window_for(poses, np.array([1.0, 1.0]), np.array([True, False]))
    with pytest.raises(ConfigError):
        solve_landmark_subproblem(0, poses, window, np.ones(2), np.eye(2), R)


def test_landmark_sensitivity_is_continuous(rng):
    log = make_log("circle", 15, NoiseConfig.paper_defaults(scale=0.1, seed=2))
    window = MeasurementWindow.from_log(log, 4, 14)
    j = int(np.flatnonzero(window.gates.all(axis=0))[0])
    traj = log.true_poses[4:15]
    cfg = SolverConfig(max_iterations=50, gradient_tolerance=1e-14, step_tolerance=0.0)
    base = solve_landmark_subproblem(j, traj, window, log.landmarks[j], 0.25 * np.eye(2), R, cfg).estimate
    ratios = []
    for scale in (1e-3, 1e-4):
        for _ in range(50):
            delta = rng.standard_normal(traj.shape) * scale
            moved = solve_landmark_subproblem(j, traj + delta, window, log.landmarks[j], 0.25 * np.eye(2), R,
                                              cfg).estimate
            ratios.append(np.linalg.norm(moved - base) / np.linalg.norm(delta))
    c = max(ratios)
    assert np.isfinite(c) and c < 1e3  # regression guard: Lipschitz-like response


def test_state_subproblem_at_truth():
    log = make_log("circle", 25, NoiseConfig.zero())
    window = MeasurementWindow.from_log(log, 10, 20)
    traj, report = solve_state_subproblem(log.landmarks, window, log.true_poses[10], 1e-6 * np.eye(3), WEIGHTS)
    np.testing.assert_allclose(traj, log.true_poses[10:21], atol=1e-8)
    assert report.cost < 1e-12


def test_state_subproblem_without_bearings_is_dead_reckoning(rng):
    u = rng.normal(0, 0.05, (10, 3))
    window = MeasurementWindow(0, u, np.zeros((11, 4), dtype=bool), np.zeros((11, 4, 2)))
    prior = rng.uniform(-1, 1, 3)
    traj, _ = solve_state_subproblem(rng.uniform(-3, 3, (4, 2)), window, prior, 1e-4 * np.eye(3), WEIGHTS,
                                     initial_trajectory=np.tile(prior, (11, 1)))
    np.testing.assert_allclose(traj, np.vstack([prior, prior + np.cumsum(u, axis=0)]), atol=1e-8)


def test_two_sweeps_reach_a_fixed_point():
    log = make_log("circle", 31, NoiseConfig.paper_defaults(scale=0.1, seed=9))
    start, end = 20, 30
    window = MeasurementWindow.from_log(log, start, end)
    rng = np.random.default_rng(1)
    prior_lms = log.landmarks + rng.normal(0, 0.05, log.landmarks.shape)
    lm_cov = np.broadcast_to(0.05 ** 2 * np.eye(2), (log.num_landmarks, 2, 2)).copy()
    pose_cov = 1e-4 * np.eye(3)
    prior_pose = log.true_poses[start]
    traj = np.vstack([prior_pose, prior_pose + np.cumsum(window.inertial, axis=0)])
    lms = prior_lms.copy()
    seen = np.flatnonzero(window.gates[-1])
    arrival = JointArrivalCost.from_blocks(prior_pose, prior_lms, pose_cov, lm_cov)

    def cost():
        return batch_cost(window, arrival, WEIGHTS, traj, lms)

    costs = [cost()]
    for _ in range(3):
        for j in seen:
            lms[j] = solve_landmark_subproblem(j, traj, window, prior_lms[j], lm_cov[j], R, initial=lms[j]).estimate
        traj, _ = solve_state_subproblem(lms, window, prior_pose, pose_cov, WEIGHTS, initial_trajectory=traj)
        costs.append(cost())
    assert np.all(np.diff(costs) <= 1e-9 * costs[0])
    assert abs(costs[3] - costs[2]) < 0.01 * costs[2]


def test_bcd_predict_matches_joint_block(rng):
    pose = rng.uniform(-1, 1, 3)
    p_zz = np.cov(rng.standard_normal((3, 20))) * 1e-3
    lm_cov = np.stack([np.cov(rng.standard_normal((2, 10))) for _ in range(3)])
    odo = rng.uniform(-5, 5, (10, 2))
    z, p, lm_out = bcd_predict(pose, odo, p_zz, lm_cov, WEIGHTS.q_odo, ROBOT, TIMING)
    assert np.array_equal(lm_out, lm_cov)
    xi = np.concatenate([pose, rng.uniform(-3, 3, 6)])
    xi_plus, joint = joint_predict(xi, odo, block_diag(p_zz, *lm_cov), WEIGHTS.q_odo, ROBOT, TIMING)
    np.testing.assert_allclose(p, joint[:3, :3], atol=1e-15)
    np.testing.assert_array_equal(z, xi_plus[:3])
    _, p0, _ = bcd_predict(pose, np.zeros((10, 2)), p_zz, lm_cov, np.zeros((2, 2)), ROBOT, TIMING)
    np.testing.assert_allclose(p0, p_zz, atol=1e-18)


def frame(rng, j: int = 4, p_seen: float = 0.6):
    pose = rng.uniform(-1, 1, 3)
    ang = rng.uniform(0, 2 * np.pi, j)
    lms = pose[:2] + rng.uniform(0.5, 3.0, j)[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    gates = rng.random(j) < p_seen
    b = np.zeros((j, 2))
    b[gates] = bearings(np.repeat(pose[None], gates.sum(), axis=0), lms[gates])
    return pose, lms, BearingScan(0, gates, b)


def random_spd(rng, n: int, scale: float) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + 0.1 * np.eye(n))


def test_correct_landmarks_rules(rng):
    r_blocks = WEIGHTS.r_blocks(4)
    for _ in range(20):
        pose, lms, scan = frame(rng)
        p_zz = random_spd(rng, 3, 1e-4)
        lm_cov = np.stack([random_spd(rng, 2, 0.01) for _ in range(4)])
        out = bcd_correct_landmarks(pose, lms, p_zz, lm_cov, scan, r_blocks)
        unseen = ~scan.gates
        assert np.array_equal(out[unseen], lm_cov[unseen])
        for j in scan.seen:
            assert np.linalg.eigvalsh(lm_cov[j] - out[j]).min() >= -1e-12


def test_correct_landmarks_without_pose_uncertainty_is_textbook_ekf(rng):
    pose, lms, _ = frame(rng, j=1)
    scan = BearingScan(0, np.array([True]), bearings(pose[None], lms))
    p = random_spd(rng, 2, 0.01)
    out = bcd_correct_landmarks(pose, lms, np.zeros((3, 3)), p[None], scan, R[None])
    h = central_difference(lambda l: bearings(pose[None], l[None])[0], lms[0])
    oracle = np.linalg.inv(np.linalg.inv(p) + h.T @ np.linalg.inv(R) @ h)
    np.testing.assert_allclose(out[0], oracle, atol=1e-8)


def test_pose_uncertainty_inflation_is_monotone(rng):
    pose, lms, _ = frame(rng, j=1)
    scan = BearingScan(0, np.array([True]), bearings(pose[None], lms))
    p = random_spd(rng, 2, 0.01)
    p_zz = random_spd(rng, 3, 1e-4)
    reductions = [np.trace(p - bcd_correct_landmarks(pose, lms, s * p_zz, p[None], scan, R[None])[0])
                  for s in (1, 10, 100)]
    assert reductions[0] >= reductions[1] >= reductions[2] > 0


def test_correct_state_rules(rng):
    r_blocks = WEIGHTS.r_blocks(4)
    pose, lms, scan = frame(rng, p_seen=0.0)
    p_zz = random_spd(rng, 3, 1e-3)
    out, _ = bcd_correct_state(pose, lms, p_zz, np.zeros((4, 2, 2)), scan, r_blocks)
    assert np.array_equal(out, p_zz)
    # known map: standard pose-only EKF update
    pose, lms, scan = frame(rng, p_seen=1.0)
    out, _ = bcd_correct_state(pose, lms, p_zz, np.zeros((4, 2, 2)), scan, r_blocks)
    h = central_difference(lambda z: bearings(np.repeat(z[None], 4, axis=0), lms).ravel(), pose)
    oracle = np.linalg.inv(np.linalg.inv(p_zz) + h.T @ np.linalg.inv(block_diag(*r_blocks)) @ h)
    np.testing.assert_allclose(out, oracle, atol=1e-8)


def test_correct_state_random_sweep(rng):
    r_blocks = WEIGHTS.r_blocks(4)
    for _ in range(1000):
        pose, lms, scan = frame(rng)
        p_zz = random_spd(rng, 3, 10 ** rng.uniform(-6, -1))
        lm_cov = np.stack([random_spd(rng, 2, 10 ** rng.uniform(-6, 0)) for _ in range(4)])
        out, min_eig = bcd_correct_state(pose, lms, p_zz, lm_cov, scan, r_blocks)
        assert np.abs(out - out.T).max() < 1e-12
        assert min_eig >= -1e-10
        assert np.linalg.eigvalsh(out).min() >= -1e-12


def test_landmark_batch_is_order_independent(rng):
    log = make_log("circle", 12, seed=6)
    window = MeasurementWindow.from_log(log, 1, 11)
    seen = np.flatnonzero(window.gates[-1])
    priors = log.landmarks + rng.normal(0, 0.1, log.landmarks.shape)
    covs = np.broadcast_to(0.04 * np.eye(2), (log.num_landmarks, 2, 2))
    r_blocks = WEIGHTS.r_blocks(log.num_landmarks)
    traj = log.true_poses[1:12]
    est, _ = solve_landmark_batch(seen, traj, window, priors[seen], covs[seen], r_blocks[seen])
    perm = rng.permutation(seen.size)
    est_p, _ = solve_landmark_batch(seen[perm], traj, window, priors[seen][perm], covs[seen][perm],
                                    r_blocks[seen][perm])
    np.testing.assert_allclose(est_p, est[perm], atol=1e-12)
    for i, j in enumerate(seen):
        single = solve_landmark_subproblem(j, traj, window, priors[j], covs[j], r_blocks[j]).estimate
        np.testing.assert_allclose(est[i], single, atol=1e-12)


def test_arrival_cost_shape_check():
    with pytest.raises(ConfigError):
        BlockArrivalCost(np.zeros(3), np.zeros((2, 2)), np.eye(3), np.zeros((3, 2, 2)))


@pytest.fixture(scope="module")
def corridor_run():
    log = make_log("straight", 80, seed=11)
    return log, run_algorithm1(log, EstimatorConfig(record_costs=True))


def test_unseen_landmarks_freeze(corridor_run):
    log, hist = corridor_run
    for k in range(1, log.num_frames):
        unseen = ~log.gates[k]
        assert np.array_equal(hist.landmarks[k, unseen], hist.landmarks[k - 1, unseen], equal_nan=True)
        assert np.array_equal(hist.landmark_cov[k, unseen], hist.landmark_cov[k - 1, unseen])
    never = ~log.gates.any(axis=0)
    assert never.any()
    assert np.isnan(hist.landmarks[-1, never]).all()


def test_window_bootstrap(corridor_run):
    log, hist = corridor_run
    n = log.timing.horizon
    np.testing.assert_array_equal(hist.window_frames[:n], np.arange(1, n + 1))
    assert np.all(hist.window_frames[n:] == n + 1)


def test_single_sweep_descent(corridor_run):
    log, hist = corridor_run
    assert len(hist.costs) == log.num_frames - log.timing.horizon
    for _, c_lm, c_z in hist.costs:
        assert c_z <= c_lm * (1 + 1e-12)


def test_covariance_blocks_stay_psd(corridor_run):
    _, hist = corridor_run
    assert np.abs(hist.pose_cov - np.swapaxes(hist.pose_cov, 1, 2)).max() < 1e-10
    assert np.linalg.eigvalsh(hist.pose_cov).min() >= -1e-10
    assert np.linalg.eigvalsh(hist.landmark_cov).min() >= -1e-10
    assert hist.min_eig_before_floor >= -1e-10


def test_noiseless_with_true_map_stays_on_truth():
    log = make_log("circle", 40, NoiseConfig.zero())
    hist = run_algorithm1(log, EstimatorConfig(init_mode="prior"), initial_map=log.landmarks)
    assert np.hypot(*(hist.poses[:, :2] - log.true_poses[:, :2]).T).max() < 1e-6
    assert np.abs(hist.landmarks - log.landmarks).max() < 1e-6


@pytest.mark.parametrize("backend", ["sequential", "threads"])
def test_backends_agree(backend):
    log = make_log("circle", 40, seed=5)
    ref = run_algorithm1(log, EstimatorConfig())
    other = run_algorithm1(log, EstimatorConfig(landmark_backend=backend, workers=4))
    np.testing.assert_allclose(other.poses, ref.poses, atol=1e-12, rtol=0)
    np.testing.assert_allclose(other.landmarks, ref.landmarks, atol=1e-12, rtol=0)


def test_estimator_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig(init_mode="magic")
    with pytest.raises(ConfigError):
        EstimatorConfig(weights=NoiseConfig.zero())
    with pytest.raises(ConfigError):
        EstimatorConfig(sweeps=0)
    log = make_log("circle", 5, seed=0)
    with pytest.raises(ConfigError):
        run_algorithm1(log, EstimatorConfig(init_mode="prior"))
