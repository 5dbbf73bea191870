"""Ground-truth trajectories and noisy sensor streams.

Frames are indexed ``k = 0..K-1``. Odometry samples ``omega_{k,i}`` and inertial
displacements ``u_k`` exist for ``k = 0..K-2`` (they describe the motion from
frame ``k`` to ``k+1``); bearing scans exist for every frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotParams, TimingConfig, integrate_exact
from .errors import ConfigError
from .geometry import bearings
from .scenarios import ControlProfile, Environment


def _check_psd(name: str, cov: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != shape:
        raise ConfigError(f"{name} must have shape {shape}, got {cov.shape}")
    if not np.allclose(cov, np.swapaxes(cov, -1, -2)):
        raise ConfigError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(cov).min() < -1e-12:
        raise ConfigError(f"{name} is not positive semidefinite")
    return cov


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """A factor ``L`` with ``L L^T = cov``; works for singular (e.g. zero) covariances."""
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor noise covariances.

    ``r_vis`` is either one 2x2 block shared by every landmark or a ``(J, 2, 2)``
    stack of per-landmark blocks of the block-diagonal bearing covariance.
    Covariances only need to be positive semidefinite so that noiseless runs can
    be simulated; estimators take their weights from a positive definite config.
    """

    q_odo: np.ndarray = field(default_factory=lambda: 0.009 * np.eye(2))
    q_in: np.ndarray = field(default_factory=lambda: 1e-4 * 0.1 * np.eye(3))
    r_vis: np.ndarray = field(default_factory=lambda: 0.001 * np.eye(2))
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "q_odo", _check_psd("q_odo", self.q_odo, (2, 2)))
        object.__setattr__(self, "q_in", _check_psd("q_in", self.q_in, (3, 3)))
        r = np.asarray(self.r_vis, dtype=float)
        object.__setattr__(self, "r_vis", _check_psd("r_vis", r, r.shape if r.ndim == 3 and r.shape[1:] == (2, 2) else (2, 2)))

    @classmethod
    def paper_defaults(cls, delta_vis: float = 0.1, scale: float = 1.0, seed: int = 0) -> NoiseConfig:
        return cls(scale * 0.009 * np.eye(2), scale * 1e-4 * delta_vis * np.eye(3), scale * 0.001 * np.eye(2), seed)

    @classmethod
    def zero(cls, seed: int = 0) -> NoiseConfig:
        return cls(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)), seed)

    def r_blocks(self, num_landmarks: int) -> np.ndarray:
        """Per-landmark ``(J, 2, 2)`` bearing covariance blocks."""
        if self.r_vis.ndim == 2:
            return np.broadcast_to(self.r_vis, (num_landmarks, 2, 2)).copy()
        if self.r_vis.shape[0] != num_landmarks:
            raise ConfigError(f"r_vis has {self.r_vis.shape[0]} blocks for {num_landmarks} landmarks")
        return self.r_vis.copy()

    def scaled(self, factor: float) -> NoiseConfig:
        return NoiseConfig(factor * self.q_odo, factor * self.q_in, factor * self.r_vis, self.seed)

    def with_seed(self, seed: int) -> NoiseConfig:
        return NoiseConfig(self.q_odo, self.q_in, self.r_vis, seed)

    def is_positive_definite(self) -> bool:
        mats = [self.q_odo, self.q_in, *np.atleast_3d(self.r_vis).reshape(-1, 2, 2)]
        return all(np.linalg.eigvalsh(m).min() > 0 for m in mats)


@dataclass(frozen=True, slots=True)
class BearingScan:
    """Gates and bearings of one frame; rows with gate 0 carry zeros."""

    k: int
    gates: np.ndarray
    bearings: np.ndarray

    @property
    def seen(self) -> np.ndarray:
        return np.flatnonzero(self.gates)


@dataclass(frozen=True, slots=True)
class InertialDisplacement:
    k: int
    u: np.ndarray


@dataclass
class SimulationLog:
    """Everything a run produces.

    ``substep_poses`` holds ``z(t_{k,i})`` on the full odometry grid, shape
    ``((K-1) m + 1, 3)``; ``odometry`` is ``(K-1, m, 2)``, ``inertial`` is
    ``(K-1, 3)``, ``gates``/``bearings`` are ``(K, J)``/``(K, J, 2)``.
    """

    timing: TimingConfig
    robot: RobotParams
    landmarks: np.ndarray
    sensing_range: float
    substep_poses: np.ndarray
    odometry: np.ndarray
    inertial: np.ndarray
    gates: np.ndarray
    bearings: np.ndarray
    in_turn: np.ndarray

    def __post_init__(self) -> None:
        k = self.gates.shape[0]
        m = self.timing.m
        j = self.landmarks.shape[0]
        expected = {
            "substep_poses": ((k - 1) * m + 1, 3),
            "odometry": (k - 1, m, 2),
            "inertial": (k - 1, 3),
            "gates": (k, j),
            "bearings": (k, j, 2),
            "in_turn": (k,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def num_frames(self) -> int:
        return self.gates.shape[0]

    @property
    def num_landmarks(self) -> int:
        return self.landmarks.shape[0]

    @property
    def true_poses(self) -> np.ndarray:
        """Poses at the vision frames, ``(K, 3)``."""
        return self.substep_poses[:: self.timing.m]

    @property
    def times(self) -> np.ndarray:
        return self.timing.t0 + self.timing.delta_vis * np.arange(self.num_frames)

    def scan(self, k: int) -> BearingScan:
        return BearingScan(k, self.gates[k], self.bearings[k])

    def displacement(self, k: int) -> InertialDisplacement:
        return InertialDisplacement(k, self.inertial[k])


def run_simulation(
    control: ControlProfile,
    params: RobotParams,
    timing: TimingConfig,
    noise: NoiseConfig,
    env: Environment,
    steps: int,
) -> SimulationLog:
    """Simulate ``steps`` vision frames of the robot in ``env``.

    Truth integrates the noiseless reference rates exactly; odometry adds
    Gaussian(Q_odo) to the reference samples; inertial displacements add
    Gaussian(Q_in) to the true frame-to-frame displacement; bearing noise is added
    to the unit vector before gating and is not renormalized.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    m = timing.m
    j = env.num_landmarks
    r_blocks = noise.r_blocks(j)
    rng = np.random.default_rng(noise.seed)
    n_sub = (steps - 1) * m

    ref = np.empty((n_sub, 2))
    for n in range(n_sub):
        ref[n] = control.rates(timing.t0 + n * timing.delta_odo)
    poses = np.empty((n_sub + 1, 3))
    poses[0] = env.initial_pose
    for n in range(n_sub):
        poses[n + 1] = integrate_exact(poses[n], ref[n], params, timing.delta_odo)

    # fixed draw order keeps each noise source independent of the others' covariances
    odo_noise = rng.standard_normal((n_sub, 2)) @ _psd_sqrt(noise.q_odo).T
    in_noise = rng.standard_normal((steps - 1, 3)) @ _psd_sqrt(noise.q_in).T
    vis_noise = np.einsum("jab,kjb->kja", _psd_sqrt(r_blocks), rng.standard_normal((steps, j, 2)))

    odometry = (ref + odo_noise).reshape(steps - 1, m, 2)
    frame_poses = poses[::m]
    inertial = np.diff(frame_poses, axis=0) + in_noise

    gates = np.zeros((steps, j), dtype=bool)
    meas = np.zeros((steps, j, 2))
    for k in range(steps):
        dist = np.hypot(*(env.landmarks - frame_poses[k, :2]).T)
        gates[k] = dist <= env.sensing_range
        seen = np.flatnonzero(gates[k])
        if seen.size:
            true_b = bearings(np.repeat(frame_poses[k][None], seen.size, axis=0), env.landmarks[seen])
            meas[k, seen] = true_b + vis_noise[k, seen]
    in_turn = np.array([control.in_turn(timing.time(k)) for k in range(steps)], dtype=bool)
    return SimulationLog(timing, params, env.landmarks.copy(), float(env.sensing_range), poses, odometry,
                         inertial, gates, meas, in_turn)
