#!/usr/bin/env python3
"""Throughput comparison between the jitted and plain-numpy backends.

Runs the same seeded episode under both backends and reports control
cycles per second.  The backend is fixed at import time, so each
measurement happens in its own subprocess.

    python3 benchmarks/bench_backends.py --duration 120 --rate 10
"""

import argparse
import json
import os
import subprocess
import sys
import time


def run_once(duration, rate, seed):
    import numpy as np

    from orbitguard.backend import backend_name
    from orbitguard.constraints import ConstraintId, default_catalog
    from orbitguard.dynamics import (
        AttitudeState,
        FullState,
        ResourceState,
        TranslationalState,
        VehicleParams,
    )
    from orbitguard.mission import DeputySetup, Scenario, run_episode
    from orbitguard.policies import PolicyKind, PolicySpec

    params = VehicleParams()
    catalog = tuple(
        spec.with_updates(enabled=True)
        if spec.id is ConstraintId.COMMUNICATION else spec
        for spec in default_catalog(params))
    state = FullState(
        translational=TranslationalState(np.array([300.0, 0.0, 0.0]),
                                         np.array([0.0, -0.05, 0.0])),
        attitude=AttitudeState(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3)),
        resources=ResourceState(),
    )

    def episode(seconds):
        return Scenario(
            deputies=(DeputySetup(
                state=state,
                policy=PolicySpec(kind=PolicyKind.RANDOM_POLICY, seed=seed)),),
            duration=seconds,
            catalog=catalog,
            dt=1.0 / rate,
            filter_rate=rate,
            seed=seed,
            name="bench",
        )

    run_episode(episode(2.0), record_stride=0)  # warm caches and jit
    t0 = time.perf_counter()
    res = run_episode(episode(duration), record_stride=0)
    wall = time.perf_counter() - t0
    return {"backend": backend_name(), "cycles": res.cycles, "wall": wall}


def measure(duration, rate, seed, no_jit):
    env = dict(os.environ)
    env.pop("ORBITGUARD_NO_JIT", None)
    if no_jit:
        env["ORBITGUARD_NO_JIT"] = "1"
    proc = subprocess.run(
        [sys.executable, __file__, "--worker", "--duration", str(duration),
         "--rate", str(rate), "--seed", str(seed)],
        capture_output=True, text=True, env=env)
    if proc.returncode != 0:
        sys.stderr.write(proc.stderr)
        raise SystemExit(1)
    return json.loads(proc.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--duration", type=float, default=120.0,
                    help="episode length in seconds (default 120)")
    ap.add_argument("--rate", type=float, default=10.0,
                    help="filter rate in Hz (default 10)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        print(json.dumps(run_once(args.duration, args.rate, args.seed)))
        return

    rows = [measure(args.duration, args.rate, args.seed, no_jit)
            for no_jit in (False, True)]
    print(f"{'backend':<8} {'cycles':>8} {'wall(s)':>9} {'cycles/s':>10}")
    for row in rows:
        rate = row["cycles"] / row["wall"]
        print(f"{row['backend']:<8} {row['cycles']:>8} "
              f"{row['wall']:>9.3f} {rate:>10.0f}")
    speedup = rows[1]["wall"] / rows[0]["wall"]
    print(f"jit speedup: {speedup:.1f}x")


if __name__ == "__main__":
    main()
