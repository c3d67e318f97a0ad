"""Command-line entry point: ``snomdp {run,validate,plotdata}``.

Exit status is 0 on success, 1 when a run aborts or a log is malformed and
2 for invalid specs or refused overwrites.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .agent import TrajectoryLog, run_method
from .exceptions import ConfigurationError, ParseError, RunAborted
from .experiment import build_instance, dump_spec, load_spec
from .gridworld import write_environment_csv
from .safesets import SafeSetState, SafetyIntervals, snapshot_records

log = logging.getLogger("snomdp")

RUN_COLUMNS = ("method", "seed", "total_steps", "t_transition", "transitioned",
               "cumulative_reward", "normalized_reward", "cumulative_discounted_reward",
               "exploration_reward", "exploitation_reward", "final_avg50",
               "unsafe_action_count", "admissible_size")
SUMMARY_COLUMNS = ("method", "runs", "mean_normalized_reward", "min_normalized_reward",
                   "max_normalized_reward", "unsafe_actions", "mean_t_transition")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_new(path, buf.getvalue())


def _write_new(path: Path, text: str):
    """Write ``text`` to a fresh file; never overwrites."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _log_name(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

def _run_cell(spec: dict, method: str, seed: int, snapshots: bool):
    """Worker body; returns ``(log, error message or None)``."""
    inst = build_instance(spec, seed)
    trace = snapshots and method not in ("oracle",)
    try:
        out = run_method(method, inst.config, inst.env, inst.world, record_trace=trace)
        return out, None
    except RunAborted as exc:
        return exc.log, str(exc)


def _snapshot_csv(trace, world) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "in_X_minus", "in_X_plus", "in_G", "l", "u", "w"])
    for snap in trace:
        ss = SafeSetState(snap["x_minus"], snap["x_plus"], snap["x_minus"], snap["x_plus"],
                          snap["expanders"], snap["upper"] - snap["lower"])
        iv = SafetyIntervals(snap["lower"], snap["upper"], snap["x_minus"], 0.0)
        for row in snapshot_records(snap["t"], world, ss, iv):
            w.writerow([_fmt(v) if isinstance(v, float) else int(v) for v in row])
    return buf.getvalue()


def _planned_paths(out: Path, spec: dict, methods):
    paths = [out / "summary.csv", out / "runs.csv", out / "resolved_spec.yaml"]
    for seed in spec["runs"]["seeds"]:
        paths.append(out / "environment" / f"seed{seed}.csv")
        for m in methods:
            name = _log_name(m, seed)
            paths.append(out / "logs" / f"{name}.jsonl")
            if spec["output"]["snapshots"] and m != "oracle":
                paths.append(out / "snapshots" / f"{name}.csv")
    return paths


def cmd_run(spec_path, out=None, jobs: int = 1) -> int:
    try:
        spec = load_spec(spec_path)
        instances = {s: build_instance(spec, s) for s in spec["runs"]["seeds"]}
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(out if out is not None else spec["output"]["directory"]).resolve()
    methods = ["oracle"] + [m for m in spec["methods"] if m != "oracle"]
    planned = _planned_paths(out, spec, methods)
    clash = [p for p in planned if p.exists() or p.with_name(p.name + ".partial").exists()]
    if clash:
        print(f"error: refusing to overwrite existing output {clash[0]}", file=sys.stderr)
        return 2

    _write_new(out / "resolved_spec.yaml", dump_spec(spec))
    for seed, inst in instances.items():
        buf = io.StringIO()
        write_environment_csv(inst.env, inst.world, buf)
        _write_new(out / "environment" / f"seed{seed}.csv", buf.getvalue())

    cells = [(m, s) for s in spec["runs"]["seeds"] for m in methods]
    snaps = spec["output"]["snapshots"]
    log.info("running %d cells with %d worker(s)", len(cells), jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, spec, m, s, snaps) for m, s in cells]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(spec, m, s, snaps) for m, s in cells]

    bound = {}
    oracle_total = {}
    for (m, s), (lg, err) in zip(cells, results):
        if m == "oracle" and err is None:
            bound[s] = lg.summary["oracle_reward_bound"]
            oracle_total[s] = lg.summary["cumulative_reward"]

    failed = []
    rows = []
    for (m, s), (lg, err) in zip(cells, results):
        lg.summary["oracle_reward_bound"] = bound.get(s)
        name = _log_name(m, s)
        suffix = "" if err is None else ".partial"
        _write_new(out / "logs" / f"{name}.jsonl{suffix}", lg.to_jsonl())
        if lg.trace is not None:
            _write_new(out / "snapshots" / f"{name}.csv{suffix}",
                       _snapshot_csv(lg.trace, instances[s].world))
        if err is not None:
            log.error("%s", err)
            failed.append(name)
            continue
        sm = lg.summary
        norm = sm["cumulative_reward"] / oracle_total[s] if s in oracle_total else None
        rows.append([m, s, sm["total_steps"], sm["t_transition"], sm["transitioned"],
                     sm["cumulative_reward"], norm, sm["cumulative_discounted_reward"],
                     sm["exploration_reward"], sm["exploitation_reward"], sm["final_avg50"],
                     sm["unsafe_action_count"], sm["admissible_size"]])
        log.info("%s: reward %.3f, unsafe %d, t_transition %d", name, sm["cumulative_reward"],
                 sm["unsafe_action_count"], sm["t_transition"])

    suffix = ".partial" if failed else ""
    _write_csv(out / f"runs.csv{suffix}", RUN_COLUMNS, rows)
    _write_csv(out / f"summary.csv{suffix}", SUMMARY_COLUMNS, _aggregate(rows, methods))
    if failed:
        print(f"error: {len(failed)} run(s) aborted: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _aggregate(rows, methods):
    out = []
    for m in methods:
        mine = [r for r in rows if r[0] == m]
        if not mine:
            continue
        norm = np.array([r[6] for r in mine if r[6] is not None], dtype=float)
        stats = ([float(norm.mean()), float(norm.min()), float(norm.max())]
                 if len(norm) else [None, None, None])
        out.append([m, len(mine), *stats, int(sum(r[11] for r in mine)),
                    float(np.mean([r[3] for r in mine]))])
    return out


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

def cmd_validate(spec_path) -> int:
    try:
        spec = load_spec(spec_path)
        for seed in spec["runs"]["seeds"]:
            build_instance(spec, seed)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(dump_spec(spec))
    return 0


# --------------------------------------------------------------------------
# plotdata
# --------------------------------------------------------------------------

def _read_logs(log_dir: Path):
    files = sorted((log_dir / "logs").glob("*.jsonl")) or sorted(log_dir.glob("*.jsonl"))
    logs = []
    for path in files:
        logs.append((path, TrajectoryLog.from_jsonl(path.read_text(encoding="utf-8"),
                                                    source=str(path))))
    return logs


def cmd_plotdata(log_dir, out=None) -> int:
    log_dir = Path(log_dir)
    if not log_dir.is_dir():
        print(f"error: no such directory: {log_dir}", file=sys.stderr)
        return 1
    try:
        logs = _read_logs(log_dir)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not logs:
        print(f"error: no logs found in {log_dir}", file=sys.stderr)
        return 1
    out = Path(out) if out is not None else log_dir / "plotdata"
    if out.exists():
        print(f"error: refusing to overwrite existing output {out}", file=sys.stderr)
        return 2

    bound = {lg.seed: lg.summary.get("oracle_reward_bound") for _, lg in logs
             if lg.method == "oracle"}
    transitions = []
    for path, lg in logs:
        b = bound.get(lg.seed) or lg.summary.get("oracle_reward_bound")
        if not b:
            print(f"error: {path}: no oracle reward bound for seed {lg.seed}", file=sys.stderr)
            return 1
        rows = [(r["t"], r["avg50"], r["avg50"] / b, r["x_minus"], r["phase"])
                for r in lg.records]
        _write_csv(out / f"series_{_log_name(lg.method, lg.seed)}.csv",
                   ("t", "avg50", "avg50_normalized", "x_minus", "phase"), rows)
        transitions.append((lg.method, lg.seed, lg.t_transition, lg.summary["transitioned"]))
    _write_csv(out / "transitions.csv", ("method", "seed", "t_transition", "transitioned"),
               transitions)
    snap_dir = log_dir / "snapshots"
    if snap_dir.is_dir():
        for path in sorted(snap_dir.glob("*.csv")):
            (out / "snapshots").mkdir(parents=True, exist_ok=True)
            shutil.copyfile(path, out / "snapshots" / path.name)
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="run cells in N worker processes (default 1)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--log-level", choices=sorted(LOG_LEVELS), default="error")

    parser = argparse.ArgumentParser(
        prog="snomdp", description="Safe near-optimal exploration on grid MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run every (method, seed) cell")
    p.add_argument("spec")
    p = sub.add_parser("validate", parents=[common], help="check a spec and echo it resolved")
    p.add_argument("spec")
    p = sub.add_parser("plotdata", parents=[common], help="turn run logs into series files")
    p.add_argument("dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVELS[args.log_level],
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    if args.command == "run":
        return cmd_run(args.spec, args.out, args.jobs)
    if args.command == "validate":
        return cmd_validate(args.spec)
    return cmd_plotdata(args.dir, args.out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
