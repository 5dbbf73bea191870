"""Monte-Carlo experiments: configuration, per-run metrics, aggregation and file outputs.

Configuration files are INI files (see :func:`load_config`). Every run ``i``
simulates with seed ``base_seed + i``; the estimators of a run see the same
log. Aggregation is a reduction ordered by run index, so parallel execution
gives byte-identical outputs.
"""

from __future__ import annotations

import configparser
import contextlib
import dataclasses
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batch import run_batch
from .bcd import run_bcd
from .dynamics import RobotParams, TimingConfig
from .errors import BcdMheError, ConfigError
from .estimator import EstimateHistory, EstimatorConfig, dead_reckoning
from .logio import read_table, save_history, save_simulation, write_table
from .nls import SolverConfig
from .scenarios import SCENARIOS, ScenarioParams, make_scenario
from .simulator import NoiseConfig, SimulationLog, run_simulation

log = logging.getLogger(__name__)

ESTIMATORS = ("bcd", "batch", "dead-reckoning")
DEFAULT_FRAMES = {"circle": 600, "straight": 700, "snake": 700}
FINAL_FRACTION = 0.1


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a Monte-Carlo experiment.

    ``frames=None`` picks the scenario default: 600 frames (three circle loops)
    or 700 frames (two corridor round trips). ``noise`` drives the simulation;
    the estimators weight residuals with the same covariances unless they are
    singular, in which case the paper-default weights are used.
    """

    scenario: str = "circle"
    scenario_params: ScenarioParams = field(default_factory=ScenarioParams)
    robot: RobotParams = field(default_factory=RobotParams)
    timing: TimingConfig = field(default_factory=TimingConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig.paper_defaults)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    estimators: tuple[str, ...] = ("bcd", "dead-reckoning")
    frames: int | None = None
    runs: int = 50
    base_seed: int = 0
    output_dir: Path | None = None
    workers: int = 1
    heading_weight: float = 0.0
    dead_reckoning_source: str = "odometry"
    save_logs: bool = False

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.runs < 1:
            raise ConfigError("Monte-Carlo count must be >= 1")
        if self.frames is not None and self.frames < 2:
            raise ConfigError("frames must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.heading_weight < 0:
            raise ConfigError("heading_weight must be nonnegative")
        if not self.estimators:
            raise ConfigError("select at least one estimator")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
        if self.dead_reckoning_source not in ("odometry", "inertial"):
            raise ConfigError("dead_reckoning_source must be 'odometry' or 'inertial'")

    @property
    def num_frames(self) -> int:
        return DEFAULT_FRAMES[self.scenario] if self.frames is None else self.frames

    def estimator_config(self) -> EstimatorConfig:
        weights = self.noise if self.noise.is_positive_definite() else NoiseConfig.paper_defaults(
            self.timing.delta_vis)
        return dataclasses.replace(self.estimator, weights=weights.with_seed(0))


@dataclass
class RunMetrics:
    """Per-frame errors of one run; landmark error is NaN while no landmark has been seen."""

    times: np.ndarray
    state_error: np.ndarray
    landmark_error: np.ndarray
    failures: int = 0

    @property
    def num_frames(self) -> int:
        return self.times.shape[0]

    def final_window(self, fraction: float = FINAL_FRACTION) -> tuple[float, float]:
        """Mean state and landmark errors over the last ``fraction`` of frames."""
        w = max(1, int(round(fraction * self.num_frames)))
        lm = self.landmark_error[-w:]
        return float(self.state_error[-w:].mean()), float(np.nanmean(lm)) if np.isfinite(lm).any() else np.nan

    def save(self, path: str | Path) -> None:
        write_table(path, {"k": np.arange(self.num_frames), "t": self.times, "state_error": self.state_error,
                           "landmark_error": self.landmark_error}, {"failures": str(self.failures)})

    @classmethod
    def load(cls, path: str | Path) -> RunMetrics:
        meta, cols = read_table(path)
        return cls(cols["t"], cols["state_error"], cols["landmark_error"], int(meta.get("failures", 0)))


def compute_metrics(sim: SimulationLog, hist: EstimateHistory, heading_weight: float = 0.0) -> RunMetrics:
    """State error ``sqrt(|dx|^2 + w dtheta^2)`` and mean error of landmarks seen so far."""
    truth = sim.true_poses
    diff = hist.poses - truth
    state = np.sqrt(np.sum(diff[:, :2] ** 2, axis=1) + heading_weight * diff[:, 2] ** 2)
    seen = np.cumsum(sim.gates, axis=0) > 0
    per_lm = np.hypot(*np.moveaxis(hist.landmarks - sim.landmarks[None], -1, 0))
    counts = seen.sum(axis=1)
    with np.errstate(invalid="ignore"):
        total = np.where(seen, per_lm, 0.0).sum(axis=1)
        lm = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    if not np.all(np.isfinite(per_lm[seen])):
        lm = np.full(hist.num_frames, np.nan)
    return RunMetrics(np.asarray(hist.times, dtype=float), state, lm, hist.failures)


def simulate(config: ExperimentConfig, seed: int) -> SimulationLog:
    control, env = make_scenario(config.scenario, config.scenario_params, config.robot, config.timing)
    return run_simulation(control, config.robot, config.timing, config.noise.with_seed(seed), env,
                          config.num_frames)


def prior_map(config: ExperimentConfig, sim: SimulationLog, seed: int) -> np.ndarray | None:
    """Truth plus Gaussian offsets for the prior-map init mode; ``None`` otherwise.

    The offsets use their own generator so they do not perturb the sensor noise.
    """
    if config.estimator.init_mode != "prior":
        return None
    rng = np.random.default_rng([seed, 1])
    return sim.landmarks + config.estimator.prior_sigma * rng.standard_normal(sim.landmarks.shape)


def run_estimator(name: str, sim: SimulationLog, config: ExperimentConfig, seed: int) -> EstimateHistory:
    if name == "dead-reckoning":
        return dead_reckoning(sim, config.dead_reckoning_source)
    est = config.estimator_config()
    initial = prior_map(config, sim, seed)
    if name == "bcd":
        return run_bcd(sim, est, initial)
    if name == "batch":
        return run_batch(sim, est, initial)
    raise ConfigError(f"unknown estimator {name!r}")


def run_single(config: ExperimentConfig, index: int) -> dict[str, RunMetrics | str]:
    """Simulate run ``index`` and score every selected estimator; a failure maps to its message."""
    seed = config.base_seed + index
    sim = simulate(config, seed)
    out: dict[str, RunMetrics | str] = {}
    for name in config.estimators:
        try:
            hist = run_estimator(name, sim, config, seed)
        except BcdMheError as exc:
            log.warning("run %d seed %d: %s failed: %s", index, seed, name, exc)
            out[name] = str(exc)
            continue
        out[name] = compute_metrics(sim, hist, config.heading_weight)
        if config.save_logs and config.output_dir is not None:
            save_history(hist, _runs_dir(config) / f"{name}_run{index:03d}_estimate.csv")
    if config.save_logs and config.output_dir is not None:
        save_simulation(sim, _runs_dir(config) / f"run{index:03d}_simulation.csv")
    return out


def _runs_dir(config: ExperimentConfig) -> Path:
    path = Path(config.output_dir) / "runs"
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class Aggregate:
    """Across-run statistics of one estimator; ``failed`` maps run index to the error message."""

    estimator: str
    times: np.ndarray
    runs: dict[int, RunMetrics]
    failed: dict[int, str]
    mean_state: np.ndarray
    std_state: np.ndarray
    mean_landmark: np.ndarray
    std_landmark: np.ndarray

    @classmethod
    def from_runs(cls, name: str, times: np.ndarray, runs: dict[int, RunMetrics], failed: dict[int, str]) -> Aggregate:
        k = times.shape[0]
        if runs:
            st = np.stack([runs[i].state_error for i in sorted(runs)])
            lm = np.stack([runs[i].landmark_error for i in sorted(runs)])
            with _quiet_nanmean():
                stats = (st.mean(0), st.std(0), np.nanmean(lm, 0), np.nanstd(lm, 0))
        else:
            stats = tuple(np.full(k, np.nan) for _ in range(4))
        return cls(name, times, runs, failed, *stats)

    def final_window(self) -> dict[str, float]:
        finals = np.array([self.runs[i].final_window() for i in sorted(self.runs)]).reshape(-1, 2)
        with _quiet_nanmean():
            return {
                "final_state_mean": float(finals[:, 0].mean()) if finals.size else np.nan,
                "final_state_std": float(finals[:, 0].std()) if finals.size else np.nan,
                "final_landmark_mean": float(np.nanmean(finals[:, 1])) if finals.size else np.nan,
                "final_landmark_std": float(np.nanstd(finals[:, 1])) if finals.size else np.nan,
            }

    def save(self, path: str | Path) -> None:
        write_table(path, {
            "k": np.arange(self.times.shape[0]),
            "t": self.times,
            "mean_state_error": self.mean_state,
            "std_state_error": self.std_state,
            "mean_landmark_error": self.mean_landmark,
            "std_landmark_error": self.std_landmark,
        }, {"estimator": self.estimator, "runs": str(len(self.runs)), "failed_runs": str(len(self.failed))})


@contextlib.contextmanager
def _quiet_nanmean():
    """Silence the all-NaN warnings of nanmean/nanstd (dead reckoning has no map)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    aggregates: dict[str, Aggregate]

    def summary_lines(self) -> list[str]:
        c = self.config
        lines = [f"scenario = {c.scenario}", f"frames = {c.num_frames}", f"runs = {c.runs}",
                 f"base_seed = {c.base_seed}", f"horizon = {c.timing.horizon}"]
        for name, agg in self.aggregates.items():
            fw = agg.final_window()
            lines.append(f"[{name}] completed = {len(agg.runs)} failed = {len(agg.failed)} "
                         f"final_state = {fw['final_state_mean']:.6f} +- {fw['final_state_std']:.6f} m "
                         f"final_landmark = {fw['final_landmark_mean']:.6f} +- {fw['final_landmark_std']:.6f} m")
        return lines


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run all Monte-Carlo runs, aggregate per frame and write outputs if ``output_dir`` is set."""
    workers = config.workers if workers is None else workers
    indices = range(config.runs)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_single, [config] * config.runs, indices))
    else:
        results = [run_single(config, i) for i in indices]
    times = config.timing.t0 + config.timing.delta_vis * np.arange(config.num_frames)
    aggregates = {}
    for name in config.estimators:
        runs = {i: r[name] for i, r in enumerate(results) if isinstance(r[name], RunMetrics)}
        failed = {i: r[name] for i, r in enumerate(results) if not isinstance(r[name], RunMetrics)}
        aggregates[name] = Aggregate.from_runs(name, times, runs, failed)
    result = ExperimentResult(config, aggregates)
    if config.output_dir is not None:
        write_outputs(result)
    return result


def write_outputs(result: ExperimentResult) -> None:
    out = Path(result.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs_dir = _runs_dir(result.config)
    summary = {"scenario": result.config.scenario, "frames": result.config.num_frames,
               "runs": result.config.runs, "base_seed": result.config.base_seed, "estimators": {}}
    for name, agg in result.aggregates.items():
        agg.save(out / f"{name}_metrics.csv")
        for i, metrics in agg.runs.items():
            metrics.save(runs_dir / f"{name}_run{i:03d}.csv")
        finals = {key: (None if np.isnan(v) else v) for key, v in agg.final_window().items()}
        summary["estimators"][name] = {"completed": len(agg.runs), "failed": len(agg.failed),
                                       "failures": {str(i): msg for i, msg in agg.failed.items()}, **finals}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.txt").write_text("\n".join(result.summary_lines()) + "\n", encoding="utf-8")


@dataclass
class ComparisonReport:
    """Final-window state errors of two experiments; ``difference = a - b``."""

    label_a: str
    label_b: str
    estimator: str
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float

    @property
    def difference(self) -> float:
        return self.mean_a - self.mean_b

    @property
    def sign(self) -> int:
        return int(np.sign(self.difference))

    def lines(self) -> list[str]:
        order = {-1: f"{self.label_a} < {self.label_b}", 0: f"{self.label_a} == {self.label_b}",
                 1: f"{self.label_a} > {self.label_b}"}[self.sign]
        return [f"estimator = {self.estimator}",
                f"{self.label_a} = {self.mean_a:.6f} +- {self.std_a:.6f} m",
                f"{self.label_b} = {self.mean_b:.6f} +- {self.std_b:.6f} m",
                f"difference = {self.difference:.6f} m", f"sign = {self.sign}", f"ordering = {order}"]


def check_comparable(a: ExperimentConfig, b: ExperimentConfig) -> None:
    noise_equal = all(np.array_equal(getattr(a.noise, f), getattr(b.noise, f)) for f in ("q_odo", "q_in", "r_vis"))
    if not noise_equal or a.robot != b.robot or a.timing != b.timing or a.runs != b.runs:
        raise ConfigError("compared experiments must share noise, robot, timing and Monte-Carlo count")


def compare_scenarios(config_a: ExperimentConfig, config_b: ExperimentConfig, estimator: str = "bcd",
                      workers: int | None = None, results: tuple[ExperimentResult, ExperimentResult] | None = None
                      ) -> ComparisonReport:
    """Order two experiments by their mean final-window state error."""
    check_comparable(config_a, config_b)
    if estimator not in config_a.estimators or estimator not in config_b.estimators:
        raise ConfigError(f"estimator {estimator!r} is not selected in both configs")
    res_a, res_b = results or (run_experiment(config_a, workers), run_experiment(config_b, workers))
    fa = res_a.aggregates[estimator].final_window()
    fb = res_b.aggregates[estimator].final_window()
    label_a, label_b = config_a.scenario, config_b.scenario
    if label_a == label_b:
        label_a, label_b = f"{label_a}(a)", f"{label_b}(b)"
    return ComparisonReport(label_a, label_b, estimator, fa["final_state_mean"], fa["final_state_std"],
                            fb["final_state_mean"], fb["final_state_std"])


# ---------------------------------------------------------------- config files

def _matrix(text: str, n: int) -> np.ndarray:
    """``s`` -> ``s I``; ``n`` numbers -> diagonal; ``n*n`` numbers -> full row-major matrix."""
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        return vals[0] * np.eye(n)
    if len(vals) == n:
        return np.diag(vals)
    if len(vals) == n * n:
        return np.array(vals).reshape(n, n)
    raise ConfigError(f"expected 1, {n} or {n * n} numbers, got {len(vals)}")


def _coerce(text: str, default, key: str):
    text = text.strip()
    try:
        if text.lower() == "none":
            return None
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
        return text
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value {text!r} for {key}") from exc


# keys whose default is None, with the type used when a value is given
_OPTIONAL = {"inner_count": int, "init_range": float, "init_sigma": float, "frames": int, "output_dir": str}


def _section(parser: configparser.ConfigParser, name: str, cls, extra: dict | None = None):
    base = cls()
    kwargs = {}
    if parser.has_section(name):
        names = {f.name for f in dataclasses.fields(cls)} | set(extra or {})
        for key, text in parser.items(name):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            if extra and key in extra:
                continue
            default = getattr(base, key)
            if default is None and text.strip().lower() != "none":
                try:
                    kwargs[key] = _OPTIONAL[key](text)
                except ValueError as exc:
                    raise ConfigError(f"bad value {text!r} for {key}") from exc
            else:
                kwargs[key] = _coerce(text, default, key)
    return kwargs


_SOLVER_KEYS = {"landmark_iterations": "landmark_solver", "state_iterations": "state_solver",
                "batch_iterations": "batch_solver"}


def load_config(path: str | Path | None = None, text: str | None = None) -> ExperimentConfig:
    """Read an INI experiment config; every key is optional and defaults as documented.

    Sections: ``[experiment]``, ``[scenario]``, ``[robot]``, ``[timing]``,
    ``[noise]`` and ``[estimator]``; see the README for the key list.
    """
    parser = configparser.ConfigParser()
    try:
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file {path} not found")
            parser.read(path, encoding="utf-8")
        elif text is not None:
            parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"experiment", "scenario", "robot", "timing", "noise", "estimator"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    timing = TimingConfig(**_section(parser, "timing", TimingConfig))
    robot = RobotParams(**_section(parser, "robot", RobotParams))
    scenario_params = ScenarioParams(**_section(parser, "scenario", ScenarioParams))

    noise_items = dict(parser.items("noise")) if parser.has_section("noise") else {}
    unknown = set(noise_items) - {"q_odo", "q_in", "r_vis", "scale"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in [noise]")
    base = NoiseConfig.paper_defaults(timing.delta_vis)
    scale = _coerce(noise_items.get("scale", "1.0"), 1.0, "scale")
    noise = NoiseConfig(
        scale * (_matrix(noise_items["q_odo"], 2) if "q_odo" in noise_items else base.q_odo),
        scale * (_matrix(noise_items["q_in"], 3) if "q_in" in noise_items else base.q_in),
        scale * (_matrix(noise_items["r_vis"], 2) if "r_vis" in noise_items else base.r_vis),
    )

    for key in ("weights", "record_costs", "landmark_solver", "state_solver", "batch_solver"):
        if parser.has_option("estimator", key):
            raise ConfigError(f"key {key!r} cannot be set in [estimator]")
    est_kwargs = _section(parser, "estimator", EstimatorConfig, extra=_SOLVER_KEYS)
    if parser.has_section("estimator"):
        for key, target in _SOLVER_KEYS.items():
            if parser.has_option("estimator", key):
                iters = _coerce(parser.get("estimator", key), 1, key)
                est_kwargs[target] = SolverConfig(max_iterations=iters)
    estimator = EstimatorConfig(**est_kwargs)

    for key in ("scenario_params", "robot", "timing", "noise", "estimator"):
        if parser.has_option("experiment", key):
            raise ConfigError(f"{key!r} has its own section; it cannot be set in [experiment]")
    exp = _section(parser, "experiment", ExperimentConfig, extra={"estimators": None})
    if parser.has_option("experiment", "estimators"):
        exp["estimators"] = tuple(v.strip() for v in parser.get("experiment", "estimators").split(",") if v.strip())
    if exp.get("output_dir") is not None:
        exp["output_dir"] = Path(exp["output_dir"])
    return ExperimentConfig(scenario_params=scenario_params, robot=robot, timing=timing, noise=noise,
                            estimator=estimator, **exp)
