"""Line-oriented text format for simulation logs and estimate histories.

A file starts with ``# key=value`` metadata lines, then one comma-separated
header row naming the columns, then one record per vision frame ``k``. Floats
are written with ``repr`` so a write/read cycle is lossless; missing values
(the inertial and odometry fields of the last frame, landmarks that are not yet
initialized) are written as ``nan``.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .dynamics import RobotParams, TimingConfig
from .errors import ConfigError
from .estimator import EstimateHistory
from .simulator import SimulationLog

FORMAT_VERSION = "1"


def _fmt(x: float) -> str:
    return repr(float(x))


def _write(path: str | Path, meta: dict[str, str], header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read(path: str | Path) -> tuple[dict[str, str], list[str], np.ndarray]:
    meta: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = 0
    while body < len(lines) and lines[body].startswith("#"):
        key, sep, value = lines[body][1:].strip().partition("=")
        if not sep:
            raise ConfigError(f"{path}: malformed metadata line {lines[body]!r}")
        meta[key.strip()] = value.strip()
        body += 1
    if body == len(lines):
        raise ConfigError(f"{path}: missing header row")
    reader = csv.reader(io.StringIO("\n".join(lines[body:])))
    header = next(reader)
    try:
        data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric field ({exc})") from exc
    if data.size == 0:
        data = np.zeros((0, len(header)))
    if data.shape[1] != len(header):
        raise ConfigError(f"{path}: rows have {data.shape[1]} fields, header has {len(header)}")
    return meta, header, data


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()], dtype=float) if text else np.zeros(0)


def _columns(header: list[str], prefix: str) -> list[int]:
    return [i for i, name in enumerate(header) if name.startswith(prefix)]


def _sim_header(m: int, j: int) -> list[str]:
    cols = ["k", "t", "in_turn"]
    for i in range(m):
        cols += [f"z{i}_x1", f"z{i}_x2", f"z{i}_theta"]
    for i in range(m):
        cols += [f"odo{i}_r", f"odo{i}_l"]
    cols += ["u_x1", "u_x2", "u_theta"]
    cols += [f"a_{jj}" for jj in range(j)]
    for jj in range(j):
        cols += [f"y_{jj}_1", f"y_{jj}_2"]
    return cols


def save_simulation(log: SimulationLog, path: str | Path) -> None:
    """Write ``log``; frame ``k`` carries the substep poses ``z(t_{k,i})`` and the
    odometry and inertial samples describing the motion to frame ``k+1``."""
    m, j, k_count = log.timing.m, log.num_landmarks, log.num_frames
    meta = {
        "format": f"simulation-log/{FORMAT_VERSION}",
        "frames": str(k_count),
        "landmarks_count": str(j),
        "delta_odo": _fmt(log.timing.delta_odo),
        "delta_vis": _fmt(log.timing.delta_vis),
        "horizon": str(log.timing.horizon),
        "t0": _fmt(log.timing.t0),
        "wheel_radius_right": _fmt(log.robot.wheel_radius_right),
        "wheel_radius_left": _fmt(log.robot.wheel_radius_left),
        "axle_separation": _fmt(log.robot.axle_separation),
        "sensing_range": _fmt(log.sensing_range),
        "landmarks": " ".join(_fmt(v) for v in log.landmarks.ravel()),
    }
    times = log.times
    rows = []
    for k in range(k_count):
        sub = np.full((m, 3), np.nan)
        sub[: min(m, log.substep_poses.shape[0] - k * m)] = log.substep_poses[k * m:(k + 1) * m]
        odo = log.odometry[k] if k < k_count - 1 else np.full((m, 2), np.nan)
        u = log.inertial[k] if k < k_count - 1 else np.full(3, np.nan)
        row = [str(k), _fmt(times[k]), str(int(log.in_turn[k]))]
        row += [_fmt(v) for v in sub.ravel()]
        row += [_fmt(v) for v in odo.ravel()]
        row += [_fmt(v) for v in u]
        row += [str(int(g)) for g in log.gates[k]]
        row += [_fmt(v) for v in log.bearings[k].ravel()]
        rows.append(row)
    _write(path, meta, _sim_header(m, j), rows)


def load_simulation(path: str | Path) -> SimulationLog:
    meta, header, data = _read(path)
    if not meta.get("format", "").startswith("simulation-log/"):
        raise ConfigError(f"{path}: not a simulation log")
    try:
        timing = TimingConfig(float(meta["delta_odo"]), float(meta["delta_vis"]), int(meta["horizon"]),
                              float(meta["t0"]))
        robot = RobotParams(float(meta["wheel_radius_right"]), float(meta["wheel_radius_left"]),
                            float(meta["axle_separation"]))
        j = int(meta["landmarks_count"])
        landmarks = _floats(meta["landmarks"]).reshape(j, 2)
        sensing_range = float(meta["sensing_range"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad or missing metadata ({exc})") from exc
    m = timing.m
    if header != _sim_header(m, j):
        raise ConfigError(f"{path}: header does not match m={m}, J={j}")
    k_count = data.shape[0]
    sub = data[:, 3:3 + 3 * m].reshape(k_count, m, 3)
    substep_poses = sub.reshape(-1, 3)[: (k_count - 1) * m + 1]
    off = 3 + 3 * m
    odometry = data[:-1, off:off + 2 * m].reshape(k_count - 1, m, 2)
    off += 2 * m
    inertial = data[:-1, off:off + 3]
    off += 3
    gates = data[:, off:off + j].astype(bool)
    bearings = data[:, off + j:off + 3 * j].reshape(k_count, j, 2)
    return SimulationLog(timing, robot, landmarks, sensing_range, substep_poses, odometry, inertial, gates,
                         bearings, data[:, 2].astype(bool))


def _est_header(j: int) -> list[str]:
    cols = ["k", "t", "window_frames", "z_x1", "z_x2", "z_theta"]
    cols += [f"pzz_{a}{b}" for a in range(3) for b in range(3)]
    for jj in range(j):
        cols += [f"l_{jj}_1", f"l_{jj}_2"]
    for jj in range(j):
        cols += [f"pll_{jj}_{a}{b}" for a in range(2) for b in range(2)]
    return cols


def save_history(hist: EstimateHistory, path: str | Path) -> None:
    """Write an estimate history; full covariance blocks are stored so symmetry survives exactly."""
    k_count, j = hist.landmarks.shape[:2]
    frames = hist.window_frames if hist.window_frames is not None else np.zeros(k_count, dtype=int)
    meta = {
        "format": f"estimate-history/{FORMAT_VERSION}",
        "estimator": hist.estimator,
        "frames": str(k_count),
        "landmarks_count": str(j),
        "failures": str(hist.failures),
    }
    rows = []
    for k in range(k_count):
        row = [str(k), _fmt(hist.times[k]), str(int(frames[k]))]
        row += [_fmt(v) for v in hist.poses[k]]
        row += [_fmt(v) for v in hist.pose_cov[k].ravel()]
        row += [_fmt(v) for v in hist.landmarks[k].ravel()]
        row += [_fmt(v) for v in hist.landmark_cov[k].ravel()]
        rows.append(row)
    _write(path, meta, _est_header(j), rows)


def load_history(path: str | Path) -> EstimateHistory:
    meta, header, data = _read(path)
    if not meta.get("format", "").startswith("estimate-history/"):
        raise ConfigError(f"{path}: not an estimate history")
    try:
        j = int(meta["landmarks_count"])
        failures = int(meta["failures"])
        name = meta["estimator"]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad or missing metadata ({exc})") from exc
    if header != _est_header(j):
        raise ConfigError(f"{path}: header does not match J={j}")
    k_count = data.shape[0]
    off = 15 + 2 * j
    return EstimateHistory(
        name,
        data[:, 1].copy(),
        data[:, 3:6].copy(),
        data[:, 15:off].reshape(k_count, j, 2),
        data[:, 6:15].reshape(k_count, 3, 3),
        data[:, off:off + 4 * j].reshape(k_count, j, 2, 2),
        failures=failures,
        window_frames=data[:, 2].astype(int),
    )


def write_table(path: str | Path, columns: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write equal-length columns; integer columns keep integer formatting."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) > 1:
        raise ConfigError("table columns differ in length")

    def cell(a: np.ndarray, i: int) -> str:
        return str(int(a[i])) if np.issubdtype(a.dtype, np.integer) else _fmt(a[i])

    n = lengths.pop() if lengths else 0
    _write(path, meta or {}, names, ([cell(a, i) for a in arrays] for i in range(n)))


def read_table(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    meta, header, data = _read(path)
    return meta, {name: data[:, i] for i, name in enumerate(header)}
