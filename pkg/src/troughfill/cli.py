"""Batch experiment runner.

    troughfill run <config.json>       simulate every controller at every sweep point
    troughfill compare <config.json>   same, plus optimum and drift-bound columns
    troughfill rates <run-dir>         windowed normalized service rates of one run

Outputs under the configured directory::

    config.json               resolved configuration
    comparison.csv            one row per (sweep point, controller)
    runs/<name>/metrics.csv   per-slot series
    runs/<name>/summary.json  aggregates, config hash and versions

Exit status: 0 success, 1 configuration error, 2 runtime or solver error.
The log level is read from ``TROUGHFILL_LOG`` (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ControllerSpec, RunConfig
from .controllers import (BesController, InfeasibleRates, OssiController, QtfController,
                          SstfController, bound_report, ossi_solve, suggest_beta0)
from .model import DomainError
from .sim import MetricsSeries, Scenario, run, to_json, windowed_rates
from .traces import build_trace_scenario, gen_synthetic, ingest_packet_log

log = logging.getLogger("troughfill")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SYNTHETIC_HORIZON = 100_000
SCHEMA_VERSION = 1
DEFAULT_WINDOWS = (1, 1000)
COMPARISON_FIELDS = ["point", "run", "controller", "policy", "sweep", "avg_cost", "avg_energy",
                     "avg_shift", "overall_delay", "unstable", "g_star", "epsilon", "b_const",
                     "queue_bound", "cost_bound", "error"]


def versions() -> dict:
    return {"troughfill": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_atomic(path: str, text: str) -> None:
    """Write via a temporary file in the same directory and rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# building blocks


def build_scenario(cfg: RunConfig) -> Scenario:
    spec = cfg.scenario
    if spec.kind == "synthetic":
        syn = dataclasses.replace(spec.synthetic, seed=cfg.seed)
        return gen_synthetic(syn, horizon=cfg.horizon or SYNTHETIC_HORIZON, seed=cfg.seed)
    trace = dataclasses.replace(spec.trace, seed=cfg.seed)
    packets = ingest_packet_log(spec.resolve("packet_log"), trace.packet)
    return build_trace_scenario(packets, spec.resolve("prices"), trace, horizon=cfg.horizon)


def sstf_rates(spec: ControllerSpec, scenario: Scenario) -> np.ndarray:
    """The lambda SSTF prices against: the scenario's rates, the realized mean, or explicit values."""
    if spec.lam == "exact":
        return np.asarray(scenario.lam, dtype=float)
    if spec.lam == "estimated-from-trace":
        return scenario.realize()[1].mean(axis=0)
    lam = np.asarray(spec.lam, dtype=float)
    if lam.shape != (scenario.topo.n_jobs,):
        raise ConfigError("lam", f"needs {scenario.topo.n_jobs} rates, got {lam.size}")
    return lam


def make_controller(spec: ControllerSpec, scenario: Scenario):
    topo, power = scenario.topo, scenario.power
    if spec.policy == "qtf":
        ctrl = QtfController(topo, spec.v, power)
    elif spec.policy == "bes":
        ctrl = BesController(topo)
    elif spec.policy == "sstf":
        lam = sstf_rates(spec, scenario)
        beta0 = spec.beta0
        if beta0 == "auto":
            states = scenario.states.states if scenario.ergodic else scenario.state_series
            beta0 = suggest_beta0(states, topo, lam, power)
            log.info("sstf beta0 = %.6g", beta0)
        ctrl = SstfController(topo, lam, beta0, power)
    else:
        if not scenario.ergodic:
            raise DomainError("OSSI needs an ergodic (synthetic) scenario")
        policy = ossi_solve(scenario.states, topo, scenario.lam, power=power, method=spec.method)
        ctrl = OssiController(policy)
    ctrl.name = spec.name
    return ctrl


def _bounds(scenario: Scenario, spec: ControllerSpec) -> dict:
    """Optimum g* and, for QTF, the drift-plus-penalty bounds; empty off the ergodic setting."""
    if not scenario.ergodic:
        return {}
    try:
        out = {"g_star": ossi_solve(scenario.states, scenario.topo, scenario.lam,
                                    power=scenario.power).optimal_cost}
        if spec.policy == "qtf":
            rep = bound_report(scenario.states, scenario.topo, scenario.lam, spec.v, power=scenario.power)
            out.update(dataclasses.asdict(rep))
        return out
    except InfeasibleRates as exc:
        log.warning("no bounds: %s", exc)
        return {}


def run_name(point: int, n_points: int, spec: ControllerSpec) -> str:
    return spec.name if n_points == 1 else f"{point:03d}-{spec.name}"


def _summary(cfg: RunConfig, point_cfg: RunConfig, assign: dict, spec: ControllerSpec, name: str,
             scenario: Scenario, m: MetricsSeries, bounds: dict, elapsed: float) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "run": name,
        "config_hash": cfg.digest(),
        "point_hash": point_cfg.digest(),
        "versions": versions(),
        "seed": point_cfg.seed,
        "horizon": scenario.horizon,
        "scenario": scenario.name,
        "controller": spec.to_dict(),
        "sweep": assign,
        "lambda": [float(v) for v in scenario.lam],
        "metrics": m.summary(),
        "checks": {"replay_error": m.replay_error(), "conservation_error": m.conservation_error()},
        "bounds": bounds or None,
        "elapsed_s": round(elapsed, 3),
    }


def _execute(task) -> dict:
    """One run end-to-end; never raises, failures come back in the row."""
    cfg_dict, p, assign, k, n_points, out_dir, with_bounds = task
    cfg = RunConfig.from_dict(cfg_dict)
    point_cfg = cfg.points()[p][1]
    spec = point_cfg.controllers[k]
    name = run_name(p, n_points, spec)
    row = {"point": p, "run": name, "controller": spec.name, "policy": spec.policy,
           "sweep": json.dumps(assign, sort_keys=True), "error": ""}
    t0 = time.perf_counter()
    try:
        scenario = build_scenario(point_cfg)
        m = run(scenario, make_controller(spec, scenario))
        m.controller = spec.name
        bounds = _bounds(scenario, spec) if with_bounds else {}
    except Exception as exc:  # isolated per run
        log.error("run %s failed: %s", name, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    run_dir = os.path.join(out_dir, "runs", name)
    write_atomic(os.path.join(run_dir, "metrics.csv"), m.to_csv())
    summary = _summary(cfg, point_cfg, assign, spec, name, scenario, m, bounds, time.perf_counter() - t0)
    write_atomic(os.path.join(run_dir, "summary.json"), to_json(summary))
    row.update(avg_cost=m.avg_cost, avg_energy=summary["metrics"]["avg_energy"],
               avg_shift=summary["metrics"]["avg_shift"], overall_delay=m.overall_delay,
               unstable=m.unstable(), **bounds)
    return row


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_FIELDS)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in COMPARISON_FIELDS])
    return buf.getvalue()


def _check_inputs(cfg: RunConfig) -> None:
    if cfg.scenario.kind == "trace":
        for key in ("packet_log", "prices"):
            path = cfg.scenario.resolve(key)
            if not os.path.isfile(path):
                raise ConfigError(f"scenario.{key}", f"no such file: {path}")


def execute(cfg: RunConfig, jobs: int | None = None, with_bounds: bool = False) -> list[dict]:
    """Run every (sweep point, controller) pair, in a worker pool when ``jobs`` > 1.

    Rows come back in sweep order regardless of completion order.
    """
    _check_inputs(cfg)
    points = cfg.points()
    out = cfg.output
    tasks = [(cfg.to_dict(), p, assign, k, len(points), out, with_bounds)
             for p, (assign, pc) in enumerate(points) for k in range(len(pc.controllers))]
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1 or len(tasks) == 1:
        rows = [_execute(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            rows = list(pool.map(_execute, tasks))
    write_atomic(os.path.join(out, "config.json"), cfg.to_json())
    write_atomic(os.path.join(out, "comparison.csv"), comparison_csv(rows))
    return rows


def _report(rows: list[dict], stream=None) -> int:
    stream = stream or sys.stdout
    bad = [r for r in rows if r["error"]]
    for r in rows:
        if r["error"]:
            print(f"{r['run']}: FAILED {r['error']}", file=stream)
        else:
            print(f"{r['run']}: avg_cost={r['avg_cost']:.6g} delay={r['overall_delay']:.4g}"
                  f"{' UNSTABLE' if r['unstable'] else ''}", file=stream)
    return EXIT_RUNTIME if bad else EXIT_OK


def cmd_run(cfg: RunConfig, jobs: int | None = None, stream=None) -> int:
    return _report(execute(cfg, jobs), stream)


def cmd_compare(cfg: RunConfig, jobs: int | None = None, stream=None) -> int:
    return _report(execute(cfg, jobs, with_bounds=True), stream)


def read_metrics(run_dir: str) -> tuple[np.ndarray, np.ndarray]:
    """(served (T, M), lambda (M,)) from a run directory."""
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as fh:
        lam = np.array(json.load(fh)["lambda"], dtype=float)
    with open(os.path.join(run_dir, "metrics.csv"), encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [i for i, h in enumerate(header) if h.startswith("served_")]
        served = np.array([[float(row[i]) for i in cols] for row in reader]).reshape(-1, len(cols))
    return served, lam


def rates_csv(rates: np.ndarray, window: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window_index", "start_slot"] + [f"rate_{j + 1}" for j in range(rates.shape[1])])
    for k, row in enumerate(rates):
        w.writerow([k, k * window + 1] + [repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_rates(run_dir: str, windows=DEFAULT_WINDOWS, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        served, lam = read_metrics(run_dir)
    except (OSError, KeyError, ValueError, StopIteration) as exc:
        raise ConfigError("run-dir", f"cannot read run output in {run_dir}: {exc}") from None
    T = served.shape[0]
    for w in windows:
        if not 1 <= w <= T:
            raise ConfigError("--window", f"window {w} outside [1, {T}] (run horizon {T})")
    for w in windows:
        path = os.path.join(run_dir, f"rates_w{w}.csv")
        write_atomic(path, rates_csv(windowed_rates(served, lam, w), w))
        print(path, file=stream)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="troughfill", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "simulate the configured controllers"),
                           ("compare", "simulate and add optimum and bound columns")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config", help="run configuration (JSON)")
        s.add_argument("--seed", type=int, help="override the top-level seed")
        s.add_argument("--horizon", type=int, help="override the number of slots")
        s.add_argument("--out", help="override the output directory")
        s.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    s = sub.add_parser("rates", help="windowed normalized service rates of a finished run")
    s.add_argument("run_dir", help="directory holding metrics.csv and summary.json")
    s.add_argument("--window", type=int, action="append",
                   help="window length in slots (repeatable; default 1 and 1000)")
    return p


def _setup_logging() -> None:
    level = os.environ.get("TROUGHFILL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "rates":
            return cmd_rates(args.run_dir, tuple(args.window or DEFAULT_WINDOWS))
        cfg = RunConfig.load(args.config)
        base_dir = os.path.dirname(os.path.abspath(args.config))
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.horizon is not None:
            over["horizon"] = args.horizon
        if args.out is not None:
            over["output"] = os.path.abspath(args.out)
        if over:
            cfg = RunConfig.from_dict({**cfg.to_dict(), **over}, base_dir)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        return (cmd_compare if args.command == "compare" else cmd_run)(cfg, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything past validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
