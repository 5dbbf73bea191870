"""Command line entry point: ``bcdmhe {simulate,estimate,experiment,compare}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .errors import BcdMheError, ConfigError
from .harness import (ESTIMATORS, ExperimentConfig, compare_scenarios, compute_metrics, load_config,
                      run_estimator, run_experiment, simulate)
from .logio import load_simulation, save_history, save_simulation

log = logging.getLogger("bcdmhe")


def _config(args: argparse.Namespace, path: str | None = None) -> ExperimentConfig:
    config = load_config(path if path is not None else args.config)
    changes: dict = {}
    if getattr(args, "seed", None) is not None:
        changes["base_seed"] = args.seed
    if getattr(args, "output", None) is not None:
        changes["output_dir"] = Path(args.output)
    if getattr(args, "estimator", None):
        changes["estimators"] = tuple(args.estimator)
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if getattr(args, "runs", None) is not None:
        changes["runs"] = args.runs
    if getattr(args, "frames", None) is not None:
        changes["frames"] = args.frames
    if getattr(args, "scenario", None) is not None:
        changes["scenario"] = args.scenario
    return dataclasses.replace(config, **changes)


def _output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir) if config.output_dir is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _config(args)
    sim = simulate(config, config.base_seed)
    path = _output_dir(config) / "simulation.csv"
    save_simulation(sim, path)
    log.info("wrote %d frames, %d landmarks to %s", sim.num_frames, sim.num_landmarks, path)
    print(path)
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    config = _config(args)
    sim = load_simulation(args.log)
    out = _output_dir(config)
    lines = [f"log = {args.log}", f"frames = {sim.num_frames}"]
    for name in config.estimators:
        hist = run_estimator(name, sim, config, config.base_seed)
        save_history(hist, out / f"{name}_estimate.csv")
        metrics = compute_metrics(sim, hist, config.heading_weight)
        metrics.save(out / f"{name}_errors.csv")
        state, lm = metrics.final_window()
        lines.append(f"[{name}] final_state = {state:.6f} m final_landmark = {lm:.6f} m "
                     f"subproblem_failures = {hist.failures}")
        log.info("%s done: final state error %.4f m", name, state)
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    config = _config(args)
    if config.output_dir is None:
        config = dataclasses.replace(config, output_dir=Path("."))
    result = run_experiment(config)
    print("\n".join(result.summary_lines()))
    failed = sum(len(a.failed) for a in result.aggregates.values())
    return 0 if failed == 0 else 3


def cmd_compare(args: argparse.Namespace) -> int:
    base_out = Path(args.output) if args.output else Path(".")
    config_a = dataclasses.replace(_config(args, args.config_a), output_dir=base_out / "a")
    config_b = dataclasses.replace(_config(args, args.config_b), output_dir=base_out / "b")
    report = compare_scenarios(config_a, config_b, estimator=args.compare_estimator)
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "comparison.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    print("\n".join(report.lines()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcdmhe", description="Bearing-only SLAM by block-coordinate MHE.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            p.add_argument("-c", "--config", help="INI experiment config (defaults apply when omitted)")
        p.add_argument("-s", "--seed", type=int, help="override the (base) seed")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("--scenario", choices=("circle", "straight", "snake"), help="override the scenario")
        p.add_argument("--frames", type=int, help="override the number of vision frames K")

    p = sub.add_parser("simulate", help="simulate one run and write its log")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="replay a simulation log through estimators")
    common(p)
    p.add_argument("log", help="simulation log written by 'simulate'")
    p.add_argument("-e", "--estimator", action="append", choices=ESTIMATORS, help="estimator (repeatable)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", help="run the Monte-Carlo pipeline")
    common(p)
    p.add_argument("-e", "--estimator", action="append", choices=ESTIMATORS, help="estimator (repeatable)")
    p.add_argument("-j", "--workers", type=int, help="parallel Monte-Carlo workers")
    p.add_argument("-n", "--runs", type=int, help="override the Monte-Carlo count")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", help="order two experiments by final-window state error")
    common(p, config=False)
    p.add_argument("config_a", help="first INI config")
    p.add_argument("config_b", help="second INI config")
    p.add_argument("-e", "--estimator", action="append", choices=ESTIMATORS, help="estimator (repeatable)")
    p.add_argument("--compare-estimator", default="bcd", choices=ESTIMATORS, help="estimator to compare")
    p.add_argument("-j", "--workers", type=int, help="parallel Monte-Carlo workers")
    p.add_argument("-n", "--runs", type=int, help="override the Monte-Carlo count")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bcdmhe: configuration error: {exc}", file=sys.stderr)
        return 2
    except (BcdMheError, OSError) as exc:
        print(f"bcdmhe: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
