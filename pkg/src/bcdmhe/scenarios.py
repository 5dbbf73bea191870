"""Control profiles and landmark environments for the three test trajectories.

Defaults are chosen for desk-scale runs: the circle completes three loops and
each corridor run completes two round trips within the default frame count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotParams, TimingConfig
from .errors import ConfigError

SCENARIOS = ("circle", "straight", "snake")


@dataclass(frozen=True, slots=True)
class Segment:
    """Constant wheel rates for ``duration`` seconds, plus an optional differential wiggle.

    The wiggle adds ``+a cos(2 pi s / period)`` to the right wheel and subtracts
    it from the left one, ``s`` being the time since the segment started.
    """

    duration: float
    omega_r: float
    omega_l: float
    wiggle_amplitude: float = 0.0
    wiggle_period: float = 1.0
    turn: bool = False


@dataclass(frozen=True, slots=True)
class ControlProfile:
    """Piecewise wheel-rate reference; repeats its segment list when ``periodic``."""

    segments: tuple[Segment, ...]
    periodic: bool = True
    t0: float = 0.0

    @property
    def cycle(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def _locate(self, t: float) -> tuple[Segment, float]:
        s = t - self.t0
        if s < 0:
            raise ConfigError("control profile queried before its start time")
        if self.periodic:
            s = s - self.cycle * np.floor(s / self.cycle + 1e-12)
        start = 0.0
        for seg in self.segments:
            # tolerance keeps grid times that land on a boundary in the next segment
            if s < start + seg.duration - 1e-9:
                return seg, s - start
            start += seg.duration
        return self.segments[-1], s - (start - self.segments[-1].duration)

    def rates(self, t: float) -> np.ndarray:
        seg, s = self._locate(t)
        extra = seg.wiggle_amplitude * np.cos(2.0 * np.pi * s / seg.wiggle_period) if seg.wiggle_amplitude else 0.0
        return np.array([seg.omega_r + extra, seg.omega_l - extra])

    def in_turn(self, t: float) -> bool:
        return self._locate(t)[0].turn


@dataclass(frozen=True, slots=True)
class Environment:
    landmarks: np.ndarray = field(repr=False)
    sensing_range: float
    initial_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        lm = np.asarray(self.landmarks, dtype=float)
        if lm.ndim != 2 or lm.shape[1] != 2 or lm.shape[0] < 1:
            raise ConfigError("landmarks must be a (J, 2) array with J >= 1")
        if self.sensing_range < 0:
            raise ConfigError("sensing range must be nonnegative")
        object.__setattr__(self, "landmarks", lm)

    @property
    def num_landmarks(self) -> int:
        return self.landmarks.shape[0]


@dataclass(frozen=True, slots=True)
class ScenarioParams:
    """Geometry and speed knobs of all scenarios (meters, seconds, rad)."""

    num_landmarks: int = 100
    speed: float = 0.8
    # circle
    circle_radius: float = 2.5
    ring_radii: tuple[float, float] = (1.5, 3.5)
    inner_count: int | None = None
    circle_range: float = 2.0
    # corridors
    corridor_length: float = 12.0
    corridor_width: float = 4.0
    corridor_margin: float = 1.0
    corridor_range: float = 3.6
    turn_duration: float = 2.0
    wiggle_period: float = 3.0
    wiggle_heading: float = 0.25

    def __post_init__(self) -> None:
        positive = (self.speed, self.circle_radius, *self.ring_radii, self.corridor_length,
                    self.corridor_width, self.turn_duration, self.wiggle_period)
        if self.num_landmarks < 1 or min(positive) <= 0:
            raise ConfigError("scenario geometry parameters must be positive")
        if self.circle_range < 0 or self.corridor_range < 0 or self.wiggle_heading < 0 or self.corridor_margin < 0:
            raise ConfigError("ranges, margins and wiggle amplitude must be nonnegative")


def _snap(duration: float, timing: TimingConfig) -> float:
    """Round a duration to whole odometry substeps so segment changes fall on the grid."""
    n = max(1, int(round(duration / timing.delta_odo)))
    return n * timing.delta_odo


def _circle(p: ScenarioParams, robot: RobotParams, timing: TimingConfig) -> tuple[ControlProfile, Environment]:
    w = p.speed / p.circle_radius
    # v = (wr Rr + wl Rl)/2, w = (wr Rr - wl Rl)/D
    om_r = (p.speed + 0.5 * w * robot.axle_separation) / robot.wheel_radius_right
    om_l = (p.speed - 0.5 * w * robot.axle_separation) / robot.wheel_radius_left
    profile = ControlProfile((Segment(2 * np.pi / w, om_r, om_l),), periodic=True, t0=timing.t0)
    j = p.num_landmarks
    n_in = j // 2 if p.inner_count is None else p.inner_count
    n_out = j - n_in
    if not 0 <= n_in <= j:
        raise ConfigError("inner ring count must lie in [0, J]")
    rings = []
    for count, radius, offset in ((n_in, p.ring_radii[0], 0.0), (n_out, p.ring_radii[1], 0.5)):
        if count:
            ang = 2 * np.pi * (np.arange(count) + offset) / count
            rings.append(np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1))
    env = Environment(np.concatenate(rings), p.circle_range, (p.circle_radius, 0.0, np.pi / 2))
    return profile, env


def _corridor(p: ScenarioParams, robot: RobotParams, timing: TimingConfig, wiggle: bool) -> tuple[ControlProfile, Environment]:
    pass_time = _snap(p.corridor_length / p.speed, timing)
    om_r = p.speed / robot.wheel_radius_right
    om_l = p.speed / robot.wheel_radius_left
    amp, period = 0.0, p.wiggle_period
    if wiggle:
        # whole wiggle periods per pass so the heading returns to the corridor axis
        n_wiggles = max(1, int(round(pass_time / p.wiggle_period)))
        period = pass_time / n_wiggles
        # turn rate a_w cos(.) integrates to a heading swing of a_w * period / (2 pi)
        turn_amp = p.wiggle_heading * 2 * np.pi / period
        amp = 0.5 * turn_amp * robot.axle_separation / robot.wheel_radius_right
    turn_time = _snap(p.turn_duration, timing)
    spin = np.pi * robot.axle_separation / (2 * turn_time)
    run = Segment(pass_time, om_r, om_l, amp, period)
    turn = Segment(turn_time, spin / robot.wheel_radius_right, -spin / robot.wheel_radius_left, turn=True)
    profile = ControlProfile((run, turn, run, turn), periodic=True, t0=timing.t0)

    half = p.num_landmarks // 2
    other = p.num_landmarks - half
    lo, hi = -p.corridor_margin, p.corridor_length + p.corridor_margin
    walls = []
    for count, y in ((half, 0.5 * p.corridor_width), (other, -0.5 * p.corridor_width)):
        if count:
            xs = lo + (hi - lo) * (np.arange(count) + 0.5) / count
            walls.append(np.stack([xs, np.full(count, y)], axis=1))
    env = Environment(np.concatenate(walls), p.corridor_range, (0.0, 0.0, 0.0))
    return profile, env


def make_scenario(kind: str, params: ScenarioParams | None = None, robot: RobotParams | None = None,
                  timing: TimingConfig | None = None) -> tuple[ControlProfile, Environment]:
    """Build the control profile and landmark layout for ``circle``, ``straight`` or ``snake``."""
    params = params or ScenarioParams()
    robot = robot or RobotParams()
    timing = timing or TimingConfig()
    if kind == "circle":
        return _circle(params, robot, timing)
    if kind in ("straight", "snake"):
        return _corridor(params, robot, timing, wiggle=kind == "snake")
    raise ConfigError(f"unknown scenario {kind!r}; expected one of {SCENARIOS}")
