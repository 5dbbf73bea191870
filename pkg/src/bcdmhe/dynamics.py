"""Differential-drive kinematics on the two-rate time grid.

Truth and prediction both integrate the unicycle flow in closed form with the
wheel rates held constant over each odometry substep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import Pose2

EPS_TURN_RATE = 1e-9
_SERIES_PHI = 1e-4


@dataclass(frozen=True, slots=True)
class RobotParams:
    """Wheel radii and axle separation, all in meters."""

    wheel_radius_right: float = 0.1
    wheel_radius_left: float = 0.1
    axle_separation: float = 0.043

    def __post_init__(self) -> None:
        if min(self.wheel_radius_right, self.wheel_radius_left, self.axle_separation) <= 0:
            raise ConfigError("wheel radii and axle separation must be positive")

    def body_rates(self, omega_r: float, omega_l: float) -> tuple[float, float]:
        """Linear speed ``v`` and turn rate ``w`` for the given wheel rates."""
        rr, rl = omega_r * self.wheel_radius_right, omega_l * self.wheel_radius_left
        return 0.5 * (rr + rl), (rr - rl) / self.axle_separation

    def body_rate_jacobian(self) -> np.ndarray:
        """``d(v, w) / d(omega_r, omega_l)``."""
        r_r, r_l, d = self.wheel_radius_right, self.wheel_radius_left, self.axle_separation
        return np.array([[0.5 * r_r, 0.5 * r_l], [r_r / d, -r_l / d]])


@dataclass(frozen=True, slots=True)
class TimingConfig:
    """Odometry and vision sampling.

    ``t_{k,i} = t0 + k * delta_vis + i * delta_odo`` with ``m`` odometry substeps
    per vision frame, and ``horizon`` vision frames per estimation window.
    """

    delta_odo: float = 0.01
    delta_vis: float = 0.1
    horizon: int = 10
    t0: float = 0.0

    def __post_init__(self) -> None:
        if self.delta_odo <= 0 or self.delta_vis <= 0:
            raise ConfigError("sampling periods must be positive")
        ratio = self.delta_vis / self.delta_odo
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ConfigError(f"delta_vis / delta_odo = {ratio} is not a positive integer")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")

    @property
    def m(self) -> int:
        return int(round(self.delta_vis / self.delta_odo))

    @property
    def window_duration(self) -> float:
        return self.horizon * self.delta_vis

    def time(self, k: int, i: int = 0) -> float:
        return self.t0 + k * self.delta_vis + i * self.delta_odo


@dataclass(frozen=True, slots=True)
class WheelRates:
    omega_r: float
    omega_l: float

    def as_array(self) -> np.ndarray:
        return np.array([self.omega_r, self.omega_l], dtype=float)


def _sinc_and_derivative(phi: float) -> tuple[float, float]:
    if abs(phi) < _SERIES_PHI:
        p2 = phi * phi
        return 1.0 - p2 / 6.0, -phi / 3.0 + phi * p2 / 30.0
    s, c = np.sin(phi), np.cos(phi)
    return s / phi, (phi * c - s) / (phi * phi)


def _flow(z: np.ndarray, v: float, w: float, dt: float) -> np.ndarray:
    x1, x2, th = z
    if abs(w) < EPS_TURN_RATE:
        return np.array([x1 + v * dt * np.cos(th), x2 + v * dt * np.sin(th), th + w * dt])
    # chord form of x + (v/w)(sin th' - sin th, cos th - cos th'); no cancellation at small w
    phi = 0.5 * w * dt
    sinc, _ = _sinc_and_derivative(phi)
    mid = th + phi
    chord = v * dt * sinc
    return np.array([x1 + chord * np.cos(mid), x2 + chord * np.sin(mid), th + w * dt])


def _flow_jacobians(z: np.ndarray, v: float, w: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """``(d z'/d z, d z'/d (v, w))`` of :func:`_flow`."""
    th = z[2]
    phi = 0.0 if abs(w) < EPS_TURN_RATE else 0.5 * w * dt
    sinc, dsinc = _sinc_and_derivative(phi) if phi else (1.0, 0.0)
    mid = th + phi
    cm, sm = np.cos(mid), np.sin(mid)
    chord = v * dt * sinc
    f_z = np.eye(3)
    f_z[0, 2] = -chord * sm
    f_z[1, 2] = chord * cm
    f_vw = np.zeros((3, 2))
    f_vw[0, 0] = dt * sinc * cm
    f_vw[1, 0] = dt * sinc * sm
    # d chord / d w = v dt dsinc dt/2 ; d mid / d w = dt/2
    dchord = v * dt * dsinc * 0.5 * dt
    f_vw[0, 1] = dchord * cm - chord * sm * 0.5 * dt
    f_vw[1, 1] = dchord * sm + chord * cm * 0.5 * dt
    f_vw[2, 1] = dt
    return f_z, f_vw


def integrate_exact(pose, rates, params: RobotParams, dt: float):
    """Advance ``pose`` by ``dt`` seconds under constant wheel rates.

    Accepts :class:`Pose2`/:class:`WheelRates` or plain arrays and returns the
    same kind as ``pose``.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    z = pose.as_array() if isinstance(pose, Pose2) else np.asarray(pose, dtype=float)
    om = rates.as_array() if isinstance(rates, WheelRates) else np.asarray(rates, dtype=float)
    v, w = params.body_rates(om[0], om[1])
    out = _flow(z, v, w, dt)
    return Pose2.from_array(out) if isinstance(pose, Pose2) else out


def integrate_jacobians(pose, rates, params: RobotParams, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """``(F, G)``: derivatives of :func:`integrate_exact` w.r.t. pose (3x3) and wheel rates (3x2)."""
    z = pose.as_array() if isinstance(pose, Pose2) else np.asarray(pose, dtype=float)
    om = rates.as_array() if isinstance(rates, WheelRates) else np.asarray(rates, dtype=float)
    v, w = params.body_rates(om[0], om[1])
    f_z, f_vw = _flow_jacobians(z, v, w, dt)
    return f_z, f_vw @ params.body_rate_jacobian()


def f_dis(pose, rate_sequence: Sequence, params: RobotParams, timing: TimingConfig):
    """Advance ``pose`` through ``len(rate_sequence)`` odometry substeps (at most ``m``)."""
    seq = list(rate_sequence) if not isinstance(rate_sequence, np.ndarray) else rate_sequence
    if len(seq) > timing.m:
        raise ConfigError(f"f_dis takes at most m={timing.m} rates, got {len(seq)}")
    out = pose
    for rates in seq:
        out = integrate_exact(out, rates, params, timing.delta_odo)
    return out


def propagate_pose_covariance(
    pose: np.ndarray,
    cov: np.ndarray,
    rate_sequence: np.ndarray,
    q_odo: np.ndarray,
    params: RobotParams,
    dt: float,
    cross: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Run ``P <- F P F^T + G Q G^T`` substep by substep along the predicted pose.

    ``cross`` is an optional ``(3, n)`` pose/other covariance that is carried as
    ``F @ cross`` (the other states are static). Returns the predicted pose,
    pose covariance and cross block.
    """
    z = np.asarray(pose, dtype=float)
    p = np.array(cov, dtype=float)
    c = None if cross is None else np.array(cross, dtype=float)
    for rates in rate_sequence:
        f, g = integrate_jacobians(z, rates, params, dt)
        p = f @ p @ f.T + g @ q_odo @ g.T
        if c is not None:
            c = f @ c
        z = integrate_exact(z, rates, params, dt)
    p = 0.5 * (p + p.T)
    return z, p, c
