"""Measurement windows and the residual blocks of the window costs.

The dynamics constraint ``zeta_{l+1} = zeta_l + u_l + d_l`` is eliminated by
substitution, so every window problem is an unconstrained least-squares problem
over poses (and, for the batch problem, landmarks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalFailure
from .geometry import bearing_jacobians_batch, bearings
from .nls import ResidualBlock
from .simulator import SimulationLog

COND_JITTER_THRESHOLD = 1e12
JITTER = 1e-9


@dataclass(frozen=True, slots=True)
class MeasurementWindow:
    """Data of frames ``start..start+N``: ``N`` displacements and ``N+1`` scans."""

    start: int
    inertial: np.ndarray
    gates: np.ndarray
    bearings: np.ndarray

    def __post_init__(self) -> None:
        n = self.inertial.shape[0]
        if self.gates.shape[0] != n + 1 or self.bearings.shape[0] != n + 1:
            raise ConfigError("a window holds N displacements and N+1 bearing scans")

    @property
    def length(self) -> int:
        """Number of displacements ``N`` (the window spans ``N+1`` frames)."""
        return self.inertial.shape[0]

    @property
    def end(self) -> int:
        return self.start + self.length

    @classmethod
    def from_log(cls, log: SimulationLog, start: int, end: int) -> MeasurementWindow:
        if not 0 <= start <= end < log.num_frames:
            raise ConfigError(f"window [{start}, {end}] outside a {log.num_frames}-frame log")
        return cls(start, log.inertial[start:end], log.gates[start:end + 1], log.bearings[start:end + 1])


def information(cov: np.ndarray) -> np.ndarray:
    """Inverse of a covariance (or stack of them) via Cholesky, jittered when near singular."""
    cov = symmetrize(np.asarray(cov, dtype=float))
    eye = np.broadcast_to(np.eye(cov.shape[-1]), cov.shape)
    vals = np.linalg.eigvalsh(cov)
    ill = np.asarray(vals.max(axis=-1) > COND_JITTER_THRESHOLD * vals.min(axis=-1))
    if ill.any():
        cov = cov + JITTER * eye * ill[..., None, None]
    try:
        lower = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("covariance is not positive definite") from exc
    inv_lower = np.linalg.solve(lower, eye)
    return symmetrize(np.swapaxes(inv_lower, -1, -2) @ inv_lower)


def prior_block(columns: np.ndarray, mean: np.ndarray, cov: np.ndarray, name: str = "prior") -> ResidualBlock:
    """``||v[columns] - mean||^2`` weighted by ``cov^{-1}``."""
    mean = np.asarray(mean, dtype=float).copy()
    eye = np.eye(mean.size)
    return ResidualBlock(lambda s: s - mean, lambda s: eye, columns, information(cov), name)


def dynamics_block(num_poses: int, inertial: np.ndarray, q_in_info: np.ndarray, offset: int = 0) -> ResidualBlock:
    """Stacked disturbances ``d_l = zeta_{l+1} - zeta_l - u_l`` over poses at ``offset``."""
    n = num_poses - 1
    u = np.asarray(inertial, dtype=float).reshape(n, 3)
    jac = np.zeros((3 * n, 3 * num_poses))
    for l in range(n):
        jac[3 * l:3 * l + 3, 3 * l:3 * l + 3] = -np.eye(3)
        jac[3 * l:3 * l + 3, 3 * l + 3:3 * l + 6] = np.eye(3)

    def residual(s: np.ndarray) -> np.ndarray:
        z = s.reshape(num_poses, 3)
        return (z[1:] - z[:-1] - u).ravel()

    weight = np.broadcast_to(q_in_info, (n, 3, 3))
    return ResidualBlock(residual, lambda s: jac, np.arange(offset, offset + 3 * num_poses), weight, "dynamics")


def bearing_block(
    y: np.ndarray,
    r_info: np.ndarray,
    num_vars: int,
    pose_cols: np.ndarray | None = None,
    fixed_poses: np.ndarray | None = None,
    landmark_cols: np.ndarray | None = None,
    fixed_landmarks: np.ndarray | None = None,
    name: str = "bearings",
) -> ResidualBlock:
    """Residuals ``y_i - h(pose_i, landmark_i)`` for ``n`` gated-in sightings.

    Each sighting takes its pose either from the decision vector (first column
    in ``pose_cols``) or from ``fixed_poses``; likewise for the landmark. The
    block spans the whole decision vector of length ``num_vars``.
    """
    y = np.asarray(y, dtype=float).reshape(-1, 2)
    n = y.shape[0]
    rows = np.arange(2 * n).reshape(n, 2, 1)
    pose_idx = None if pose_cols is None else np.asarray(pose_cols)[:, None] + np.arange(3)
    lm_idx = None if landmark_cols is None else np.asarray(landmark_cols)[:, None] + np.arange(2)

    def unpack(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        poses = fixed_poses if pose_idx is None else s[pose_idx]
        lms = fixed_landmarks if lm_idx is None else s[lm_idx]
        return poses, lms

    def residual(s: np.ndarray) -> np.ndarray:
        poses, lms = unpack(s)
        return (y - bearings(poses, lms)).ravel()

    def jacobian(s: np.ndarray) -> np.ndarray:
        poses, lms = unpack(s)
        h_z, h_l = bearing_jacobians_batch(poses, lms)
        jac = np.zeros((2 * n, num_vars))
        if pose_idx is not None:
            jac[rows, pose_idx[:, None, :]] = -h_z
        if lm_idx is not None:
            jac[rows, lm_idx[:, None, :]] = -h_l
        return jac

    r_info = np.asarray(r_info, dtype=float).reshape(n, 2, 2)
    return ResidualBlock(residual, jacobian, np.arange(num_vars), r_info, name)


def sightings(window: MeasurementWindow, landmarks: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(frame offsets, landmark indices)`` of all gated-in sightings, frame-major.

    If ``landmarks`` is given only those landmark indices are kept.
    """
    gates = window.gates
    if landmarks is not None:
        mask = np.zeros(gates.shape[1], dtype=bool)
        mask[landmarks] = True
        gates = gates & mask
    ls, js = np.nonzero(gates)
    return ls, js


def solve_psd(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``s^{-1} b`` for a symmetric innovation matrix."""
    try:
        return np.linalg.solve(s, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("innovation matrix is singular") from exc


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + np.swapaxes(p, -1, -2))
