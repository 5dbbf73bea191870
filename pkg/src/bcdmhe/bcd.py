"""Block-coordinate MHE for bearing-only SLAM.

Each frame alternates between per-landmark problems (trajectory held fixed) and
one pose-trajectory problem (map held fixed). The arrival cost keeps one 3x3
pose block and one 2x2 block per landmark; cross-block uncertainty enters the
correction step as inflation of the innovation covariance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import RobotParams, TimingConfig, propagate_pose_covariance
from .errors import BcdMheError, ConfigError, NumericalFailure
from .estimator import EstimateHistory, EstimatorConfig, backproject, init_range, initial_map_state
from .geometry import bearing_jacobians_batch, bearings
from .nls import NlsProblem, SolveReport, SolverConfig, solve
from .simulator import BearingScan, NoiseConfig, SimulationLog
from .window import (MeasurementWindow, bearing_block, dynamics_block, information, prior_block, sightings,
                     solve_psd, symmetrize)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockArrivalCost:
    pose: np.ndarray
    landmarks: np.ndarray
    pose_cov: np.ndarray
    landmark_cov: np.ndarray

    def __post_init__(self) -> None:
        if np.shape(self.pose_cov) != (3, 3) or np.shape(self.landmark_cov) != (len(self.landmarks), 2, 2):
            raise ConfigError("block arrival cost needs a 3x3 pose block and J 2x2 landmark blocks")


@dataclass
class LandmarkSubproblemResult:
    j: int
    estimate: np.ndarray
    report: SolveReport


def solve_landmark_subproblem(j: int, trajectory: np.ndarray, window: MeasurementWindow, prior: np.ndarray,
                              prior_cov: np.ndarray, r_block: np.ndarray, config: SolverConfig | None = None,
                              initial: np.ndarray | None = None) -> LandmarkSubproblemResult:
    """Re-estimate landmark ``j`` against a fixed trajectory over the window.

    Minimizes the prior term plus the bearing residuals of every frame of the
    window in which ``j`` is gated in.
    """
    if not window.gates[-1, j]:
        raise ConfigError(f"landmark {j} is not seen in the last frame of the window")
    trajectory = np.asarray(trajectory, dtype=float)
    ls = np.flatnonzero(window.gates[:, j])
    n = ls.size
    blocks = [
        prior_block(np.arange(2), prior, prior_cov, "landmark-prior"),
        bearing_block(window.bearings[ls, j], np.broadcast_to(information(r_block), (n, 2, 2)), 2,
                      fixed_poses=trajectory[ls], landmark_cols=np.zeros(n, dtype=int)),
    ]
    x0 = np.asarray(prior if initial is None else initial, dtype=float)
    report = solve(NlsProblem(2, blocks), x0, config or SolverConfig(max_iterations=10))
    return LandmarkSubproblemResult(j, report.solution, report)


def build_state_problem(landmarks: np.ndarray, window: MeasurementWindow, prior_pose: np.ndarray,
                        pose_cov: np.ndarray, weights: NoiseConfig, landmark_cov: np.ndarray | None = None,
                        trajectory: np.ndarray | None = None) -> NlsProblem:
    """Trajectory-only window cost with the map fixed.

    With ``landmark_cov`` (and the ``trajectory`` to linearize at) each bearing
    is weighted by ``(R_j + H_l P_jj H_l^T)^{-1}`` instead of ``R_j^{-1}``, the same
    landmark-uncertainty inflation the pose-block correction uses.
    """
    num_landmarks = landmarks.shape[0]
    n_poses = window.length + 1
    dim = 3 * n_poses
    blocks = [prior_block(np.arange(3), prior_pose, pose_cov, "pose-prior")]
    if window.length:
        blocks.append(dynamics_block(n_poses, window.inertial, information(weights.q_in)))
    known = np.flatnonzero(np.all(np.isfinite(landmarks), axis=1))
    ls, js = sightings(window, known)
    if ls.size:
        r = weights.r_blocks(num_landmarks)[js]
        if landmark_cov is not None:
            _, h_l = bearing_jacobians_batch(np.asarray(trajectory, dtype=float)[ls], landmarks[js])
            r = r + h_l @ landmark_cov[js] @ np.swapaxes(h_l, 1, 2)
        blocks.append(bearing_block(window.bearings[ls, js], information(r), dim, pose_cols=3 * ls,
                                    fixed_landmarks=landmarks[js]))
    return NlsProblem(dim, blocks)


def solve_state_subproblem(landmarks: np.ndarray, window: MeasurementWindow, prior_pose: np.ndarray,
                           pose_cov: np.ndarray, weights: NoiseConfig, config: SolverConfig | None = None,
                           initial_trajectory: np.ndarray | None = None, landmark_cov: np.ndarray | None = None
                           ) -> tuple[np.ndarray, SolveReport]:
    """Re-estimate the window trajectory ``(N+1, 3)`` against a fixed map.

    Landmarks with NaN estimates contribute no residuals. See
    :func:`build_state_problem` for ``landmark_cov``.
    """
    if initial_trajectory is None:
        initial_trajectory = np.vstack([prior_pose, prior_pose + np.cumsum(window.inertial, axis=0)])
    problem = build_state_problem(np.asarray(landmarks, dtype=float), window, prior_pose, pose_cov, weights,
                                  landmark_cov, initial_trajectory)
    report = solve(problem, np.asarray(initial_trajectory, dtype=float).ravel(),
                   config or SolverConfig(max_iterations=15))
    return report.solution.reshape(-1, 3), report


def bcd_predict(pose: np.ndarray, odometry: np.ndarray, pose_cov: np.ndarray, landmark_cov: np.ndarray,
                q_odo: np.ndarray, params: RobotParams, timing: TimingConfig
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Propagate pose and pose block over the odometry substeps; landmark blocks pass through."""
    z, p_zz, _ = propagate_pose_covariance(pose, pose_cov, odometry, q_odo, params, timing.delta_odo)
    return z, p_zz, landmark_cov


def _frame_jacobians(pose: np.ndarray, landmarks: np.ndarray, seen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return bearing_jacobians_batch(np.repeat(np.asarray(pose, dtype=float)[None], seen.size, axis=0),
                                   landmarks[seen])


def bcd_correct_landmarks(pose_plus: np.ndarray, landmarks: np.ndarray, pose_cov_plus: np.ndarray,
                          landmark_cov: np.ndarray, scan: BearingScan, r_blocks: np.ndarray) -> np.ndarray:
    """Per-landmark EKF update with the pose uncertainty folded into the innovation.

    ``K_j = P_j H_j^T (H_j P_j H_j^T + R_j + H_z P_zz H_z^T)^{-1}``,
    ``P_j <- P_j - K_j H_j P_j`` for every gated-in landmark; other blocks are
    returned untouched.
    """
    out = np.array(landmark_cov, dtype=float)
    seen = scan.seen
    if seen.size == 0:
        return out
    h_z, h_l = _frame_jacobians(pose_plus, landmarks, seen)
    p = out[seen]
    ph = p @ np.swapaxes(h_l, 1, 2)
    s = h_l @ ph + r_blocks[seen] + h_z @ pose_cov_plus @ np.swapaxes(h_z, 1, 2)
    try:
        gain = np.swapaxes(np.linalg.solve(symmetrize(s), np.swapaxes(ph, 1, 2)), 1, 2)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular landmark innovation matrix") from exc
    out[seen] = symmetrize(p - gain @ h_l @ p)
    return out


def bcd_correct_state(pose_plus: np.ndarray, landmarks: np.ndarray, pose_cov_plus: np.ndarray,
                      landmark_cov: np.ndarray, scan: BearingScan, r_blocks: np.ndarray
                      ) -> tuple[np.ndarray, float]:
    """Pose-block EKF update with landmark uncertainty folded into the innovation.

    Returns the corrected, symmetrized pose block and its smallest eigenvalue
    before negative eigenvalues are floored at zero.
    """
    seen = scan.seen
    if seen.size == 0:
        return np.array(pose_cov_plus, dtype=float), float(np.linalg.eigvalsh(pose_cov_plus).min())
    n = seen.size
    h_z, h_l = _frame_jacobians(pose_plus, landmarks, seen)
    h = h_z.reshape(2 * n, 3)
    s = h @ pose_cov_plus @ h.T
    inflation = r_blocks[seen] + h_l @ landmark_cov[seen] @ np.swapaxes(h_l, 1, 2)
    for i in range(n):
        s[2 * i:2 * i + 2, 2 * i:2 * i + 2] += inflation[i]
    ph = pose_cov_plus @ h.T
    gain = solve_psd(symmetrize(s), ph.T).T
    p = symmetrize(pose_cov_plus - gain @ h @ pose_cov_plus)
    vals, vecs = np.linalg.eigh(p)
    if vals.min() < 0:
        p = symmetrize((vecs * np.clip(vals, 0.0, None)) @ vecs.T)
    return p, float(vals.min())


def solve_landmark_batch(js: np.ndarray, trajectory: np.ndarray, window: MeasurementWindow, priors: np.ndarray,
                         prior_covs: np.ndarray, r_blocks: np.ndarray, config: SolverConfig | None = None,
                         initial: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve the subproblems of landmarks ``js`` together, vectorized over landmarks.

    Runs the same damped Gauss-Newton rule as :func:`nls.solve` on every
    landmark independently; returns ``(estimates (B, 2), iterations (B,))``.
    """
    config = config or SolverConfig(max_iterations=10)
    js = np.asarray(js, dtype=int)
    nb = js.size
    trajectory = np.asarray(trajectory, dtype=float)
    if nb == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    if not np.all(window.gates[-1, js]):
        raise ConfigError("every landmark of the batch must be seen in the last frame of the window")
    mask = window.gates[:, js].T                      # (B, L)
    bi, li = np.nonzero(mask)
    y = window.bearings[li, js[bi]]
    poses = trajectory[li]
    u_prior = np.swapaxes(np.linalg.cholesky(information(prior_covs)), 1, 2)
    u_r = np.swapaxes(np.linalg.cholesky(information(r_blocks)), 1, 2)[bi]
    priors = np.asarray(priors, dtype=float)

    def residuals(p):
        e_p = np.einsum("bij,bj->bi", u_prior, p - priors)
        e_b = np.einsum("nij,nj->ni", u_r, y - bearings(poses, p[bi]))
        c = np.einsum("bi,bi->b", e_p, e_p)
        np.add.at(c, bi, np.einsum("ni,ni->n", e_b, e_b))
        return c, e_p, e_b

    def normal_equations(p, e_p, e_b):
        _, h_l = bearing_jacobians_batch(poses, p[bi])
        a = -u_r @ h_l
        hess = np.swapaxes(u_prior, 1, 2) @ u_prior
        grad = np.einsum("bji,bj->bi", u_prior, e_p)
        np.add.at(hess, bi, np.swapaxes(a, 1, 2) @ a)
        np.add.at(grad, bi, np.einsum("nji,nj->ni", a, e_b))
        return hess, grad

    p = np.array(priors if initial is None else initial, dtype=float)
    cost, e_p, e_b = residuals(p)
    hess, grad = normal_equations(p, e_p, e_b)
    lam = np.full(nb, config.initial_damping)
    iters = np.zeros(nb, dtype=int)
    active = np.ones(nb, dtype=bool)
    eye = np.eye(2)
    while True:
        gnorm = np.abs(grad).max(axis=1)
        active &= gnorm >= config.gradient_tolerance
        active &= iters < config.max_iterations
        if not active.any():
            break
        iters[active] += 1
        diag = np.diagonal(hess, axis1=1, axis2=2)
        damping = np.maximum(diag, 1e-12 * np.maximum(1.0, diag.max(axis=1, keepdims=True)))
        lhs = hess + lam[:, None, None] * (eye * damping[:, None, :])
        step = np.zeros((nb, 2))
        step[active] = np.linalg.solve(lhs[active], -grad[active][..., None])[..., 0]
        ok = active & np.all(np.isfinite(step), axis=1)
        trial = np.where(ok[:, None], p + step, p)
        t_cost, t_ep, t_eb = residuals(trial)
        accept = ok & (t_cost < cost)
        if accept.any():
            small = np.linalg.norm(step, axis=1) <= config.step_tolerance * (
                np.linalg.norm(p, axis=1) + config.step_tolerance)
            p = np.where(accept[:, None], trial, p)
            cost = np.where(accept, t_cost, cost)
            e_p = np.where(accept[:, None], t_ep, e_p)
            e_b = np.where(accept[bi][:, None], t_eb, e_b)
            new_hess, new_grad = normal_equations(p, e_p, e_b)
            hess = np.where(accept[:, None, None], new_hess, hess)
            grad = np.where(accept[:, None], new_grad, grad)
            lam = np.where(accept, lam * config.damping_down, lam)
            active &= ~(accept & small)
        reject = active & ~accept
        lam = np.where(reject, np.maximum(lam * config.damping_up, 1e-9), lam)
        active &= ~(reject & (lam > 1e12))
    return p, iters


def _joint_cost(window, prior_pose, prior_landmarks, pose_cov, landmark_cov, weights, trajectory, landmarks):
    from .batch import JointArrivalCost, batch_cost
    known = np.all(np.isfinite(prior_landmarks), axis=1)
    arrival = JointArrivalCost.from_blocks(prior_pose, np.where(known[:, None], prior_landmarks, np.nan),
                                           pose_cov, landmark_cov)
    return batch_cost(window, arrival, weights, trajectory, landmarks)


def run_algorithm1(log_data: SimulationLog, config: EstimatorConfig | None = None,
                   initial_map: np.ndarray | None = None) -> EstimateHistory:
    """Block-coordinate MHE over a whole log.

    Frame ``k`` runs: predict the pose and pose block from frame ``k-1``;
    initialize newly seen landmarks; solve every seen landmark's subproblem (a
    parallel map); correct the seen landmark blocks; for ``k >= N`` solve the
    trajectory subproblem; correct the pose block. Before the horizon fills the
    pose comes from odometry dead reckoning and landmark windows start at 0.
    """
    config = config or EstimatorConfig()
    timing, robot = log_data.timing, log_data.robot
    horizon = timing.horizon
    j_count = log_data.num_landmarks
    weights = config.weights
    r_blocks = weights.r_blocks(j_count)
    hist = EstimateHistory.empty("bcd", log_data.times, j_count)

    lms, lm_cov, initialized = initial_map_state(config, j_count, log_data.sensing_range, initial_map)
    init_value = lms.copy()
    init_frame = np.where(initialized, 0, np.iinfo(np.int64).max)
    distance = init_range(config, log_data.sensing_range)
    z = log_data.true_poses[0].copy()
    p_zz = config.pose_sigma0 ** 2 * np.eye(3)
    prev_prediction = z.copy()
    executor = ThreadPoolExecutor(config.workers) if config.landmark_backend == "threads" else None

    def store(k: int) -> None:
        hist.poses[k] = z
        hist.landmarks[k] = lms
        hist.pose_cov[k] = p_zz
        hist.landmark_cov[k] = lm_cov

    for j in np.flatnonzero(log_data.gates[0] & ~initialized):
        init_value[j] = lms[j] = backproject(z, log_data.bearings[0, j], distance)
        initialized[j], init_frame[j] = True, 0
    store(0)
    hist.window_frames[0] = 1

    try:
        for k in range(1, log_data.num_frames):
            z_plus, p_plus, _ = bcd_predict(hist.poses[k - 1], log_data.odometry[k - 1], p_zz, lm_cov,
                                            weights.q_odo, robot, timing)
            scan = log_data.scan(k)
            seen = scan.seen
            for j in seen[~initialized[seen]]:
                init_value[j] = lms[j] = backproject(z_plus, scan.bearings[j], distance)
                initialized[j], init_frame[j] = True, k
            lin_landmarks = lms.copy()

            start = max(0, k - horizon)
            window = MeasurementWindow.from_log(log_data, start, k)
            terminal = z_plus if config.terminal_pose_source == "predicted" or k == 1 else prev_prediction
            trajectory = np.vstack([hist.poses[start:k], terminal])
            prior_lms = np.where((init_frame <= start)[:, None], hist.landmarks[start], init_value)
            prior_cov = hist.landmark_cov[start]
            hist.window_frames[k] = window.length + 1

            sweeps = config.sweeps if k >= horizon else 1
            for sweep in range(sweeps):
                estimates = landmark_pass(config, executor, seen, trajectory, window, prior_lms, prior_cov,
                                          r_blocks, lms)
                for j, est in zip(seen, estimates):
                    if est is None:
                        hist.failures += 1
                    else:
                        lms[j] = est
                if sweep == 0:
                    lm_cov = bcd_correct_landmarks(z_plus, lin_landmarks, p_plus, lm_cov, scan, r_blocks)
                if k < horizon:
                    break
                if config.record_costs and sweep == 0:
                    c_lm = _joint_cost(window, hist.poses[start], prior_lms, hist.pose_cov[start], prior_cov,
                                       weights, trajectory, lms)
                try:
                    trajectory, _ = solve_state_subproblem(
                        lms, window, hist.poses[start], hist.pose_cov[start], weights, config.state_solver,
                        trajectory, lm_cov if config.state_weighting == "inflated" else None)
                except BcdMheError as exc:
                    log.warning("state subproblem at frame %d failed: %s", k, exc)
                    hist.failures += 1
                if config.record_costs and sweep == 0:
                    c_z = _joint_cost(window, hist.poses[start], prior_lms, hist.pose_cov[start], prior_cov,
                                      weights, trajectory, lms)
                    hist.costs.append((k, c_lm, c_z))

            p_zz, min_eig = bcd_correct_state(z_plus, lms, p_plus, lm_cov, scan, r_blocks)
            hist.min_eig_before_floor = min(hist.min_eig_before_floor, min_eig)
            z = trajectory[-1].copy() if k >= horizon else z_plus
            prev_prediction = z_plus
            store(k)
    finally:
        if executor is not None:
            executor.shutdown()
    return hist


def landmark_pass(config: EstimatorConfig, executor, seen: np.ndarray, trajectory: np.ndarray,
                  window: MeasurementWindow, prior_lms: np.ndarray, prior_cov: np.ndarray, r_blocks: np.ndarray,
                  current: np.ndarray) -> list[np.ndarray | None]:
    """Solve every seen landmark's subproblem; results come back in ``seen`` order.

    All backends run the same per-landmark kernel: ``vectorized`` solves all
    landmarks in one call, ``sequential`` and ``threads`` map it over single
    landmarks, so the three agree bit for bit. A landmark whose kernel run
    fails is retried with the generic solver and yields ``None`` if that fails too.
    """

    def kernel(js: np.ndarray) -> list[np.ndarray]:
        est, _ = solve_landmark_batch(js, trajectory, window, prior_lms[js], prior_cov[js], r_blocks[js],
                                      config.landmark_solver, current[js])
        return list(est)

    def fallback(j: int) -> np.ndarray | None:
        try:
            return solve_landmark_subproblem(j, trajectory, window, prior_lms[j], prior_cov[j], r_blocks[j],
                                             config.landmark_solver, current[j]).estimate
        except BcdMheError as exc:
            log.warning("landmark %d subproblem failed: %s", j, exc)
            return None

    def task(j: int) -> np.ndarray | None:
        try:
            return kernel(np.array([j]))[0]
        except BcdMheError as exc:
            log.warning("landmark %d kernel failed (%s); retrying with the generic solver", j, exc)
            return fallback(j)

    if config.landmark_backend == "vectorized":
        try:
            return kernel(seen)
        except BcdMheError as exc:
            log.warning("vectorized landmark pass failed (%s); retrying landmark by landmark", exc)
            return [task(j) for j in seen]
    if executor is None:
        return [task(j) for j in seen]
    return list(executor.map(task, seen))


run_bcd = run_algorithm1
