"""Reference estimator: joint (pose trajectory + map) MHE with a joint EKF arrival cost."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import block_diag

from .dynamics import RobotParams, TimingConfig, propagate_pose_covariance
from .errors import BcdMheError, ConfigError
from .estimator import EstimateHistory, EstimatorConfig, backproject, init_range, initial_map_state
from .geometry import bearing_jacobians_batch
from .nls import NlsProblem, SolveReport, SolverConfig, solve
from .simulator import BearingScan, NoiseConfig, SimulationLog
from .window import (MeasurementWindow, bearing_block, dynamics_block, information, prior_block, sightings,
                     solve_psd, symmetrize)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointArrivalCost:
    """Prior pose, prior map ``(J, 2)`` and joint ``(3+2J)`` covariance at the window start.

    Landmarks whose prior entry is NaN are not yet initialized and are left out
    of the window problem.
    """

    pose: np.ndarray
    landmarks: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        j = np.shape(self.landmarks)[0]
        if np.shape(self.cov) != (3 + 2 * j, 3 + 2 * j):
            raise ConfigError("joint covariance must be (3+2J) x (3+2J)")
        if np.abs(self.cov - self.cov.T).max() >= 1e-10:
            raise ConfigError("joint covariance is not symmetric")

    @classmethod
    def from_blocks(cls, pose: np.ndarray, landmarks: np.ndarray, pose_cov: np.ndarray,
                    landmark_cov: np.ndarray) -> JointArrivalCost:
        return cls(np.asarray(pose, dtype=float), np.asarray(landmarks, dtype=float),
                   block_diag(pose_cov, *landmark_cov))


@dataclass
class WindowEstimate:
    """Window solution: trajectory ``(N+1, 3)``, map ``(J, 2)`` and disturbances ``(N, 3)``."""

    trajectory: np.ndarray
    landmarks: np.ndarray
    disturbances: np.ndarray
    report: SolveReport | None = None


def _landmark_dims(active: np.ndarray) -> np.ndarray:
    return (3 + 2 * active[:, None] + np.arange(2)).ravel()


def build_batch_problem(window: MeasurementWindow, arrival: JointArrivalCost, weights: NoiseConfig,
                        active: np.ndarray) -> NlsProblem:
    """Window cost over ``(zeta_{start..end}, p_active)`` with disturbances substituted out."""
    n_poses = window.length + 1
    n_state = 3 * n_poses
    dim = n_state + 2 * active.size
    num_landmarks = arrival.landmarks.shape[0]

    lm_cols = n_state + 2 * np.arange(active.size)
    prior_cols = np.concatenate([np.arange(3), (lm_cols[:, None] + np.arange(2)).ravel()])
    cov_dims = np.concatenate([np.arange(3), _landmark_dims(active)])
    mean = np.concatenate([arrival.pose, arrival.landmarks[active].ravel()])
    blocks = [prior_block(prior_cols, mean, arrival.cov[np.ix_(cov_dims, cov_dims)], "arrival")]
    if window.length:
        blocks.append(dynamics_block(n_poses, window.inertial, information(weights.q_in)))

    ls, js = sightings(window)
    if ls.size:
        slot = np.full(num_landmarks, -1)
        slot[active] = np.arange(active.size)
        if np.any(slot[js] < 0):
            raise ConfigError("a sighted landmark is not part of the window problem")
        r_info = information(weights.r_blocks(num_landmarks))[js]
        blocks.append(bearing_block(window.bearings[ls, js], r_info, dim, pose_cols=3 * ls,
                                    landmark_cols=lm_cols[slot[js]]))
    return NlsProblem(dim, blocks)


def batch_cost(window: MeasurementWindow, arrival: JointArrivalCost, weights: NoiseConfig,
               trajectory: np.ndarray, landmarks: np.ndarray) -> float:
    """Joint window cost evaluated at a given trajectory and map."""
    active = np.flatnonzero(np.all(np.isfinite(arrival.landmarks), axis=1))
    problem = build_batch_problem(window, arrival, weights, active)
    v = np.concatenate([np.asarray(trajectory, dtype=float).ravel(), np.asarray(landmarks)[active].ravel()])
    return problem.cost(v)


def solve_batch(window: MeasurementWindow, arrival: JointArrivalCost, weights: NoiseConfig,
                config: SolverConfig | None = None, initial_trajectory: np.ndarray | None = None,
                initial_landmarks: np.ndarray | None = None) -> WindowEstimate:
    """Minimize the joint window cost; landmarks with NaN priors are excluded and stay NaN.

    Without an initial guess, the trajectory starts from the prior pose chained
    with the inertial displacements and the map from the prior map.
    """
    active = np.flatnonzero(np.all(np.isfinite(arrival.landmarks), axis=1))
    problem = build_batch_problem(window, arrival, weights, active)
    if initial_trajectory is None:
        initial_trajectory = np.vstack([arrival.pose, arrival.pose + np.cumsum(window.inertial, axis=0)])
    if initial_landmarks is None:
        initial_landmarks = arrival.landmarks
    x0 = np.concatenate([np.asarray(initial_trajectory, dtype=float).ravel(),
                         np.asarray(initial_landmarks, dtype=float)[active].ravel()])
    report = solve(problem, x0, config or SolverConfig(max_iterations=25))
    n_state = 3 * (window.length + 1)
    traj = report.solution[:n_state].reshape(-1, 3)
    lms = np.array(arrival.landmarks, dtype=float)
    lms[active] = report.solution[n_state:].reshape(-1, 2)
    dist = traj[1:] - traj[:-1] - window.inertial
    return WindowEstimate(traj, lms, dist, report)


def joint_predict(estimate: np.ndarray, odometry: np.ndarray, cov: np.ndarray, q_odo: np.ndarray,
                  params: RobotParams, timing: TimingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Propagate the joint state and covariance over the given odometry substeps.

    Landmarks are static, so only the pose rows/columns of the covariance change;
    this equals ``F P F^T + G Q G^T`` with ``F = diag(F_z, I)``.
    """
    xi = np.asarray(estimate, dtype=float)
    cov = np.asarray(cov, dtype=float)
    z, p_zz, p_zl = propagate_pose_covariance(xi[:3], cov[:3, :3], odometry, q_odo, params, timing.delta_odo,
                                              cross=cov[:3, 3:])
    out = cov.copy()
    out[:3, :3] = p_zz
    out[:3, 3:] = p_zl
    out[3:, :3] = p_zl.T
    xi_plus = xi.copy()
    xi_plus[:3] = z
    return xi_plus, out


def joint_correct(xi_plus: np.ndarray, cov_plus: np.ndarray, scan: BearingScan, r_blocks: np.ndarray) -> np.ndarray:
    """EKF covariance update ``P - K H P`` using only the gated-in landmark rows."""
    seen = scan.seen
    if seen.size == 0:
        return cov_plus.copy()
    xi_plus = np.asarray(xi_plus, dtype=float)
    lms = xi_plus[3:].reshape(-1, 2)[seen]
    h_z, h_l = bearing_jacobians_batch(np.repeat(xi_plus[None, :3], seen.size, axis=0), lms)
    n = seen.size
    h = np.zeros((2 * n, cov_plus.shape[0]))
    h[:, :3] = h_z.reshape(2 * n, 3)
    rows = np.arange(2 * n).reshape(n, 2, 1)
    h[rows, (3 + 2 * seen)[:, None, None] + np.arange(2)] = h_l
    ph = cov_plus @ h.T
    s = h @ ph + block_diag(*r_blocks[seen])
    gain = solve_psd(symmetrize(s), ph.T).T
    return symmetrize(cov_plus - gain @ h @ cov_plus)


def run_batch(log_data: SimulationLog, config: EstimatorConfig | None = None,
              initial_map: np.ndarray | None = None,
              on_covariance: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> EstimateHistory:
    """Run the joint MHE over a whole log, one window per vision frame.

    ``on_covariance(k, predicted, corrected)`` is called with the joint
    covariances of every frame ``k >= 1``, mainly for diagnostics.
    """
    config = config or EstimatorConfig()
    timing, robot = log_data.timing, log_data.robot
    horizon = timing.horizon
    j_count = log_data.num_landmarks
    weights = config.weights
    r_blocks = weights.r_blocks(j_count)
    hist = EstimateHistory.empty("batch", log_data.times, j_count)

    lms, lm_cov, initialized = initial_map_state(config, j_count, log_data.sensing_range, initial_map)
    init_value = lms.copy()
    init_frame = np.where(initialized, 0, np.iinfo(np.int64).max)
    distance = init_range(config, log_data.sensing_range)

    z = log_data.true_poses[0].copy()
    cov = block_diag(config.pose_sigma0 ** 2 * np.eye(3), *lm_cov)
    covs: deque[np.ndarray] = deque(maxlen=horizon + 1)

    def initialize(k: int, pose: np.ndarray) -> None:
        for j in np.flatnonzero(log_data.gates[k] & ~initialized):
            init_value[j] = backproject(pose, log_data.bearings[k, j], distance)
            lms[j] = init_value[j]
            initialized[j] = True
            init_frame[j] = k

    def store(k: int) -> None:
        hist.poses[k] = z
        hist.landmarks[k] = lms
        hist.pose_cov[k] = cov[:3, :3]
        idx = 3 + 2 * np.arange(j_count)
        hist.landmark_cov[k, :, 0, 0] = cov[idx, idx]
        hist.landmark_cov[k, :, 0, 1] = cov[idx, idx + 1]
        hist.landmark_cov[k, :, 1, 0] = cov[idx + 1, idx]
        hist.landmark_cov[k, :, 1, 1] = cov[idx + 1, idx + 1]
        covs.append(cov)

    initialize(0, z)
    store(0)
    previous: WindowEstimate | None = None
    for k in range(1, log_data.num_frames):
        xi = np.concatenate([z, np.nan_to_num(lms).ravel()])
        xi_plus, cov_plus = joint_predict(xi, log_data.odometry[k - 1], cov, weights.q_odo, robot, timing)
        initialize(k, xi_plus[:3])
        xi_plus[3:] = np.nan_to_num(lms).ravel()
        cov = joint_correct(xi_plus, cov_plus, log_data.scan(k), r_blocks)
        if on_covariance is not None:
            on_covariance(k, cov_plus, cov)

        start = max(0, k - horizon)
        window = MeasurementWindow.from_log(log_data, start, k)
        prior_lms = np.where((init_frame <= start)[:, None], hist.landmarks[start], init_value)
        arrival = JointArrivalCost(hist.poses[start], prior_lms, _cov_at(covs, k, start))
        if previous is None:
            guess = np.vstack([hist.poses[start:k], hist.poses[k - 1] + log_data.inertial[k - 1]])
        else:
            shift = len(previous.trajectory) - (k - start)
            guess = np.vstack([previous.trajectory[shift:], previous.trajectory[-1] + log_data.inertial[k - 1]])
        try:
            est = solve_batch(window, arrival, weights, config.batch_solver, guess,
                              np.where(np.isfinite(lms), lms, prior_lms))
        except BcdMheError as exc:
            log.warning("batch window at frame %d failed: %s", k, exc)
            hist.failures += 1
            z = guess[-1]
            previous = None
        else:
            z = est.trajectory[-1]
            active = np.isfinite(est.landmarks[:, 0])
            lms[active] = est.landmarks[active]
            previous = est
        hist.window_frames[k] = k - start + 1
        store(k)
    return hist


def _cov_at(covs: deque, k: int, frame: int) -> np.ndarray:
    """Stored joint covariance of ``frame``; ``covs`` ends at frame ``k - 1``."""
    return covs[len(covs) - (k - frame)]
