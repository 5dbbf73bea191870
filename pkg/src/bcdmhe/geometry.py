r"""Planar pose, landmark and bearing geometry.

Headings are kept unwrapped. A bearing is the unit vector from the robot to a
landmark expressed in the body frame, :math:`h = R(-\theta)(\ell - x)/\|\ell - x\|`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateGeometry

EPS_RANGE = 1e-9


@dataclass(frozen=True, slots=True)
class Pose2:
    """Robot state ``(x1, x2, theta)``; theta is not wrapped."""

    x1: float
    x2: float
    theta: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite([self.x1, self.x2, self.theta])):
            raise ConfigError(f"non-finite pose {self!r}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x1, self.x2], dtype=float)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.theta], dtype=float)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> Pose2:
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True, slots=True)
class Landmark:
    position: tuple[float, float]

    def __post_init__(self) -> None:
        if len(self.position) != 2 or not np.all(np.isfinite(self.position)):
            raise ConfigError(f"invalid landmark position {self.position!r}")

    def as_array(self) -> np.ndarray:
        return np.array(self.position, dtype=float)


@dataclass(frozen=True, slots=True)
class LandmarkMap:
    """Ordered landmarks; the list index is the landmark identity."""

    landmarks: tuple[Landmark, ...]

    def __post_init__(self) -> None:
        if len(self.landmarks) < 1:
            raise ConfigError("a landmark map needs at least one landmark")

    def __len__(self) -> int:
        return len(self.landmarks)

    def as_array(self) -> np.ndarray:
        """Return a ``(J, 2)`` array."""
        return np.array([lm.position for lm in self.landmarks], dtype=float)

    @classmethod
    def from_array(cls, a: Iterable[Sequence[float]]) -> LandmarkMap:
        return cls(tuple(Landmark((float(p[0]), float(p[1]))) for p in a))


@dataclass(frozen=True, slots=True)
class JointState:
    """Pose plus map, flattened as ``(x1, x2, theta, l1x, l1y, ..., lJx, lJy)``."""

    pose: Pose2
    map: LandmarkMap

    @property
    def dim(self) -> int:
        return 3 + 2 * len(self.map)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.pose.as_array(), self.map.as_array().ravel()])

    @classmethod
    def from_array(cls, a: np.ndarray) -> JointState:
        a = np.asarray(a, dtype=float)
        if a.size < 5 or (a.size - 3) % 2:
            raise ConfigError(f"joint state of size {a.size} is not 3 + 2J")
        return cls(Pose2.from_array(a[:3]), LandmarkMap.from_array(a[3:].reshape(-1, 2)))


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _as_pose_array(pose) -> np.ndarray:
    return pose.as_array() if isinstance(pose, Pose2) else np.asarray(pose, dtype=float)


def _as_landmark_array(landmark) -> np.ndarray:
    return landmark.as_array() if isinstance(landmark, Landmark) else np.asarray(landmark, dtype=float)


def bearings(poses: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Vectorized bearings for paired rows of ``poses (n, 3)`` and ``landmarks (n, 2)``."""
    dx = landmarks[:, 0] - poses[:, 0]
    dy = landmarks[:, 1] - poses[:, 1]
    rho = np.hypot(dx, dy)
    if rho.min(initial=np.inf) <= EPS_RANGE:
        raise DegenerateGeometry("robot coincides with a landmark")
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    nx, ny = dx / rho, dy / rho
    out = np.empty((rho.size, 2))
    out[:, 0] = c * nx + s * ny
    out[:, 1] = c * ny - s * nx
    return out


def bearing_jacobians_batch(poses: np.ndarray, landmarks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dh/dz (n, 2, 3), dh/dl (n, 2, 2))`` for paired rows."""
    dx = landmarks[:, 0] - poses[:, 0]
    dy = landmarks[:, 1] - poses[:, 1]
    rho = np.hypot(dx, dy)
    if rho.min(initial=np.inf) <= EPS_RANGE:
        raise DegenerateGeometry("robot coincides with a landmark")
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    nx, ny = dx / rho, dy / rho
    # (I - n n^T) / rho
    p00 = (1.0 - nx * nx) / rho
    p01 = -nx * ny / rho
    p11 = (1.0 - ny * ny) / rho
    n = rho.size
    h_l = np.empty((n, 2, 2))
    # R(-theta) = [[c, s], [-s, c]]
    h_l[:, 0, 0] = c * p00 + s * p01
    h_l[:, 0, 1] = c * p01 + s * p11
    h_l[:, 1, 0] = -s * p00 + c * p01
    h_l[:, 1, 1] = -s * p01 + c * p11
    h_z = np.empty((n, 2, 3))
    h_z[:, :, :2] = -h_l
    h_z[:, 0, 2] = -s * nx + c * ny
    h_z[:, 1, 2] = -c * nx - s * ny
    return h_z, h_l


def bearing_of(pose, landmark) -> np.ndarray:
    """Unit bearing of ``landmark`` seen from ``pose``, in the body frame."""
    return bearings(_as_pose_array(pose)[None, :], _as_landmark_array(landmark)[None, :])[0]


def bearing_jacobians(pose, landmark) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(dh/dz (2, 3), dh/dl (2, 2))`` of :func:`bearing_of`."""
    h_z, h_l = bearing_jacobians_batch(_as_pose_array(pose)[None, :], _as_landmark_array(landmark)[None, :])
    return h_z[0], h_l[0]
