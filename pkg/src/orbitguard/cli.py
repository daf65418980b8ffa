"""Command line front end.

Subcommands: run (headless episode), serve (session gateway), replay
(recompute metrics and margins from a telemetry log), validate
(scenario file check).  Exit codes: 0 success, 1 invalid input or
startup failure, 2 replay safety check failed, 3 runtime abort.

ORBITGUARD_PORT and ORBITGUARD_LOG_DIR supply defaults for serve and
for run's output directory; explicit flags win over both.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import OrbitGuardError, ScenarioError, TelemetryError
from .mission import compute_metrics, run_episode
from .scenario_io import load_scenario
from .telemetry import read_header, read_telemetry, replay_check

DEFAULT_PORT = 7700


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="orbitguard",
        description="proximity-operation episodes with run-time assurance")
    sub = top.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run one scenario headless")
    run.add_argument("scenario", help="scenario YAML file")
    run.add_argument("--out", help="telemetry output path "
                     "(default: <log dir>/<scenario name>.jsonl)")
    run.add_argument("--seed", type=int, help="override the scenario seed")

    serve = sub.add_parser("serve", help="serve the session gateway")
    serve.add_argument("--port", type=int,
                       help=f"listen port (default ORBITGUARD_PORT "
                       f"or {DEFAULT_PORT})")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--log-dir",
                       help="session telemetry directory "
                       "(default ORBITGUARD_LOG_DIR)")

    rep = sub.add_parser("replay",
                         help="recompute metrics and margins from a log")
    rep.add_argument("telemetry", help="telemetry JSONL file")
    rep.add_argument("--check", action="store_true",
                     help="recompute every margin and fail on any mismatch")

    val = sub.add_parser("validate", help="validate a scenario file")
    val.add_argument("scenario", help="scenario YAML file")
    return top


def _print_metrics(metrics) -> None:
    print(f"delta_v            {metrics.delta_v:.6f} m/s")
    print(f"inspected_fraction {metrics.inspected_fraction:.3f}")
    print(f"interventions      {metrics.intervention_count} "
          f"({metrics.intervention_duration:.1f} s)")
    comp = metrics.completion_time
    print(f"completion_time    "
          f"{'none' if comp is None else f'{comp:.1f} s'}")
    worst = [(cid.wire_name, v) for cid, v in metrics.min_margins.items()
             if v is not None]
    if worst:
        name, v = min(worst, key=lambda kv: kv[1])
        print(f"tightest margin    {name} = {v:.6g}")


def _cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as bad:
        print(f"scenario invalid: {bad}", file=sys.stderr)
        return 1
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    out = args.out
    if out is None:
        log_dir = Path(os.environ.get("ORBITGUARD_LOG_DIR", "."))
        log_dir.mkdir(parents=True, exist_ok=True)
        out = log_dir / f"{scenario.name}.jsonl"
    result = run_episode(scenario, telemetry_path=out)
    print(f"{scenario.name}: {result.cycles} cycles, "
          f"telemetry {result.telemetry_path}")
    _print_metrics(result.metrics)
    if result.aborted:
        print(f"aborted: {result.aborted}", file=sys.stderr)
        return 3
    return 0


def _cmd_serve(args) -> int:
    from .gateway import run_service
    port = args.port
    if port is None:
        port = int(os.environ.get("ORBITGUARD_PORT", DEFAULT_PORT))
    log_dir = args.log_dir or os.environ.get("ORBITGUARD_LOG_DIR")
    try:
        server = run_service(port=port, host=args.host, log_dir=log_dir)
    except OrbitGuardError as bad:
        print(f"startup failed: {bad}", file=sys.stderr)
        return 1
    print(f"serving on {server.host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def _cmd_replay(args) -> int:
    try:
        header = read_header(args.telemetry)
        metrics = compute_metrics(read_telemetry(args.telemetry),
                                  control_dt=header["control_dt"])
    except (TelemetryError, OSError, KeyError, ValueError) as bad:
        print(f"telemetry unreadable: {bad}", file=sys.stderr)
        return 1
    print(f"{header['name']}: seed {header['seed']}, "
          f"{header['deputies']} deputies, task {header['task']}")
    _print_metrics(metrics)
    if not args.check:
        return 0
    report = replay_check(args.telemetry)
    print(f"margins recomputed  {report.margins_checked} over "
          f"{report.frames} frames, {report.mismatches} mismatches")
    if not report.ok:
        print(f"first mismatch: {report.first_mismatch}", file=sys.stderr)
        return 2
    return 0


def _cmd_validate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as bad:
        for problem in bad.problems:
            print(problem, file=sys.stderr)
        return 1
    print(f"{args.scenario}: ok ({scenario.name}, "
          f"{len(scenario.deputies)} deputies, {scenario.cycles} cycles)")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _cmd_run, "serve": _cmd_serve,
               "replay": _cmd_replay, "validate": _cmd_validate}[args.cmd]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
