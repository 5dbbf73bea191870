"""Configuration, output history and helpers shared by all estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import f_dis
from .errors import ConfigError
from .nls import SolverConfig
from .simulator import NoiseConfig, SimulationLog

INIT_MODES = ("backproject", "prior")
TERMINAL_POSE_SOURCES = ("predicted", "previous")
LANDMARK_BACKENDS = ("vectorized", "sequential", "threads")
STATE_WEIGHTINGS = ("measurement", "inflated")


@dataclass
class EstimatorConfig:
    """Knobs of the MHE estimators.

    ``init_mode="backproject"`` places a landmark on its first measured ray at
    ``init_range`` (default: half the sensing range) with covariance
    ``init_sigma**2 I`` (default sigma: the sensing range). ``"prior"`` starts every
    landmark from a supplied map with covariance ``prior_sigma**2 I``.
    """

    weights: NoiseConfig = field(default_factory=NoiseConfig.paper_defaults)
    landmark_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=10))
    state_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=15))
    batch_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=25))
    init_mode: str = "backproject"
    init_range: float | None = None
    init_sigma: float | None = None
    prior_sigma: float = 0.1
    pose_sigma0: float = 1e-3
    sweeps: int = 1
    terminal_pose_source: str = "predicted"
    workers: int = 1
    landmark_backend: str = "vectorized"
    state_weighting: str = "measurement"
    record_costs: bool = False

    def __post_init__(self) -> None:
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")
        if self.terminal_pose_source not in TERMINAL_POSE_SOURCES:
            raise ConfigError(f"terminal_pose_source must be one of {TERMINAL_POSE_SOURCES}")
        if self.landmark_backend not in LANDMARK_BACKENDS:
            raise ConfigError(f"landmark_backend must be one of {LANDMARK_BACKENDS}")
        if self.state_weighting not in STATE_WEIGHTINGS:
            raise ConfigError(f"state_weighting must be one of {STATE_WEIGHTINGS}")
        if self.sweeps < 1 or self.workers < 1:
            raise ConfigError("sweeps and workers must be >= 1")
        if self.pose_sigma0 <= 0 or self.prior_sigma <= 0:
            raise ConfigError("initial standard deviations must be positive")
        if not self.weights.is_positive_definite():
            raise ConfigError("estimator weights need positive definite covariances")


@dataclass
class EstimateHistory:
    """Per-frame estimates; landmarks not yet initialized are NaN."""

    estimator: str
    times: np.ndarray
    poses: np.ndarray
    landmarks: np.ndarray
    pose_cov: np.ndarray
    landmark_cov: np.ndarray
    failures: int = 0
    window_frames: np.ndarray | None = None
    costs: list[tuple[int, float, float]] = field(default_factory=list)
    min_eig_before_floor: float = np.inf

    @property
    def num_frames(self) -> int:
        return self.poses.shape[0]

    @classmethod
    def empty(cls, estimator: str, times: np.ndarray, num_landmarks: int) -> EstimateHistory:
        k = times.shape[0]
        return cls(
            estimator,
            np.asarray(times, dtype=float),
            np.full((k, 3), np.nan),
            np.full((k, num_landmarks, 2), np.nan),
            np.full((k, 3, 3), np.nan),
            np.full((k, num_landmarks, 2, 2), np.nan),
            window_frames=np.zeros(k, dtype=int),
        )


def init_range(config: EstimatorConfig, sensing_range: float) -> float:
    return 0.5 * sensing_range if config.init_range is None else config.init_range


def init_sigma(config: EstimatorConfig, sensing_range: float) -> float:
    return sensing_range if config.init_sigma is None else config.init_sigma


def backproject(pose: np.ndarray, bearing: np.ndarray, distance: float) -> np.ndarray:
    """Point at ``distance`` along the (renormalized) measured bearing from ``pose``."""
    b = np.asarray(bearing, dtype=float)
    b = b / np.linalg.norm(b)
    c, s = np.cos(pose[2]), np.sin(pose[2])
    return pose[:2] + distance * np.array([c * b[0] - s * b[1], s * b[0] + c * b[1]])


def initial_map_state(config: EstimatorConfig, num_landmarks: int, sensing_range: float,
                      initial_map: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Starting ``(landmarks (J,2), covariances (J,2,2), initialized mask)``."""
    if config.init_mode == "prior":
        if initial_map is None or np.shape(initial_map) != (num_landmarks, 2):
            raise ConfigError("prior init mode needs an initial map of shape (J, 2)")
        cov = np.broadcast_to(config.prior_sigma ** 2 * np.eye(2), (num_landmarks, 2, 2)).copy()
        return np.array(initial_map, dtype=float), cov, np.ones(num_landmarks, dtype=bool)
    sigma = init_sigma(config, sensing_range)
    cov = np.broadcast_to(sigma ** 2 * np.eye(2), (num_landmarks, 2, 2)).copy()
    return np.full((num_landmarks, 2), np.nan), cov, np.zeros(num_landmarks, dtype=bool)


def dead_reckoning(log: SimulationLog, source: str = "odometry") -> EstimateHistory:
    """Pose-only baseline that never consumes bearings.

    ``inertial`` chains ``z_{k+1} = z_k + u_k``; ``odometry`` integrates the wheel
    rates through the exact unicycle flow.
    """
    if source not in ("inertial", "odometry"):
        raise ConfigError("dead-reckoning source must be 'inertial' or 'odometry'")
    hist = EstimateHistory.empty("dead-reckoning", log.times, log.num_landmarks)
    z = log.true_poses[0].copy()
    hist.poses[0] = z
    for k in range(1, log.num_frames):
        if source == "inertial":
            z = z + log.inertial[k - 1]
        else:
            z = f_dis(z, log.odometry[k - 1], log.robot, log.timing)
        hist.poses[k] = z
    return hist
