from __future__ import annotations

import numpy as np
import pytest

from bcdmhe import ConfigError, EstimatorConfig, run_bcd
from bcdmhe.logio import load_history, load_simulation, read_table, save_history, save_simulation, write_table

from conftest import make_log

SIM_FIELDS = ("substep_poses", "odometry", "inertial", "gates", "bearings", "in_turn", "landmarks")


def test_simulation_round_trip(tmp_path, circle_log):
    save_simulation(circle_log, tmp_path / "sim.csv")
    back = load_simulation(tmp_path / "sim.csv")
    for name in SIM_FIELDS:
        assert np.array_equal(getattr(back, name), getattr(circle_log, name)), name
    assert back.timing == circle_log.timing and back.robot == circle_log.robot
    assert back.sensing_range == circle_log.sensing_range


def test_replayed_log_gives_identical_estimates(tmp_path):
    log = make_log("snake", 30, seed=2)
    save_simulation(log, tmp_path / "sim.csv")
    a = run_bcd(log, EstimatorConfig())
    b = run_bcd(load_simulation(tmp_path / "sim.csv"), EstimatorConfig())
    assert np.array_equal(a.poses, b.poses)
    assert np.array_equal(a.landmarks, b.landmarks, equal_nan=True)


def test_history_round_trip(tmp_path, circle_log):
    hist = run_bcd(circle_log, EstimatorConfig())
    save_history(hist, tmp_path / "est.csv")
    back = load_history(tmp_path / "est.csv")
    assert back.estimator == "bcd" and back.failures == hist.failures
    for name in ("times", "poses", "landmarks", "pose_cov", "landmark_cov", "window_frames"):
        assert np.array_equal(getattr(back, name), getattr(hist, name), equal_nan=True), name


def test_format_is_line_oriented(tmp_path, circle_log):
    save_simulation(circle_log, tmp_path / "sim.csv")
    lines = (tmp_path / "sim.csv").read_text().splitlines()
    meta = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if not ln.startswith("#")]
    assert any(ln.startswith("# format=") for ln in meta)
    header = body[0].split(",")
    assert header[:2] == ["k", "t"]
    assert len(body) == 1 + circle_log.num_frames
    assert all(len(row.split(",")) == len(header) for row in body[1:])


def test_table_round_trip(tmp_path):
    cols = {"k": np.arange(3), "x": np.array([0.1, np.nan, 1e-300])}
    write_table(tmp_path / "t.csv", cols, {"note": "hi"})
    meta, back = read_table(tmp_path / "t.csv")
    assert meta["note"] == "hi"
    assert np.array_equal(back["x"], cols["x"], equal_nan=True)
    assert np.array_equal(back["k"], cols["k"])


def test_malformed_files_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# format=1\nk,t\n0,0.0,5\n")
    with pytest.raises(ConfigError):
        read_table(p)
    p.write_text("")
    with pytest.raises(ConfigError):
        load_simulation(p)
