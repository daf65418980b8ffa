"""Line-delimited episode telemetry.

File layout: one JSON header line, then one JSON frame per control
cycle.  Field order is fixed, floats round-trip exactly (shortest repr),
and the same episode always serializes to the same bytes, so determinism
checks can diff files directly.

Header: schema version, scenario name, seed, control period, constraint
catalog, vehicle parameters, deputy count, task info.  Frame: grid time,
per-deputy blocks (state vector, desired and actual commands, filter
mode, cause list, margins keyed by constraint in catalog order, solver
status), episode-level inspected count, and event annotations on the
frames where something happened.

replay_check re-derives every logged margin from the logged state with
the catalog in the header; any bit of disagreement means the log and the
dynamics code no longer match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as _k
from .constraints import (
    ConstraintId,
    pack_catalog,
    spec_from_dict,
    spec_to_dict,
)
from .dynamics import ControlCommand, FullState, vehicle_from_dict, vehicle_to_dict
from .errors import TelemetryError
from .filters import FilterMode

SCHEMA = "orbitguard-telemetry/1"

_MODE_NAMES = {
    _k.FM_PASS: FilterMode.PASS_THROUGH.value,
    _k.FM_QP: FilterMode.QP_MODIFIED.value,
    _k.FM_BACKUP: FilterMode.SWITCHED_TO_BACKUP.value,
    _k.FM_OVERRIDE: FilterMode.OVERRIDE.value,
}


@dataclass(frozen=True)
class DeputyFrame:
    state: FullState
    u_des: ControlCommand
    u_act: ControlCommand
    mode: FilterMode
    cause: tuple
    margins: dict
    qp_status: int
    qp_iterations: int


@dataclass(frozen=True)
class TelemetryFrame:
    t: float
    deputies: tuple
    inspected: int | None
    total_points: int | None
    events: tuple


def _dump(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def episode_header(scenario, deputy_count, total_points) -> dict:
    return {
        "schema": SCHEMA,
        "name": scenario.name,
        "seed": scenario.seed,
        "control_dt": scenario.control_dt,
        "deputies": deputy_count,
        "task": scenario.task.kind.value,
        "total_points": total_points,
        "vehicle": vehicle_to_dict(scenario.vehicle),
        "catalog": [spec_to_dict(s) for s in scenario.catalog],
    }


def frame_dict(runs, row, inspected=None, events=None) -> dict:
    """One telemetry frame, assembled from record-array row `row`.

    The file writer and the gateway's live stream both come through
    here, so a streamed frame is character-identical to its file line.
    """
    deputies = []
    for run in runs:
        margins = {}
        for cid in ConstraintId:
            # disabled rows and non-finite values both log as null; the
            # replay checker reproduces that rule
            v = run.margins[row, cid.value]
            margins[cid.wire_name] = float(v) if np.isfinite(v) else None
        bits = int(run.cause[row])
        deputies.append({
            "state": [float(v) for v in run.s[row]],
            "u_des": [float(v) for v in run.u_des[row]],
            "u_act": [float(v) for v in run.u_act[row]],
            "mode": _MODE_NAMES[int(run.mode[row])],
            "cause": [cid.wire_name for cid in ConstraintId
                      if bits & (1 << cid.value)],
            "margins": margins,
            "qp_status": int(run.qp_status[row]),
            "qp_iterations": int(run.qp_iters[row]),
        })
    frame = {"t": float(runs[0].t[row]), "deputies": deputies}
    if inspected is not None:
        frame["inspected"] = int(inspected)
    if events:
        frame["events"] = list(events)
    return frame


def write_episode(path, scenario, runs, aborted, metrics, flip_times,
                  extra_events=None) -> None:
    """Serialize one finished episode; see the module docstring for layout.

    extra_events maps a cycle index to event dicts injected by the
    session layer (configuration changes applied at that boundary).
    """
    path = Path(path)
    inspect_task = flip_times.shape[0] > 0
    header = episode_header(
        scenario, len(runs),
        int(flip_times.shape[0]) if inspect_task else None)
    nrec = min(r.nrec for r in runs)

    t0 = runs[0].t[0] if nrec > 0 else 0.0
    dt = scenario.control_dt
    stride = 1
    if nrec > 1:
        stride = max(1, int(round((runs[0].t[1] - runs[0].t[0]) / dt)))

    def row_of(cycle):
        return min(nrec - 1, cycle // stride)

    events_by_row = {}
    for cycle, evs in (extra_events or {}).items():
        events_by_row.setdefault(row_of(cycle), []).extend(evs)
    if metrics.completion_time is not None and nrec > 0:
        cycle = int(round((metrics.completion_time - t0) / dt))
        events_by_row.setdefault(row_of(cycle), []).append(
            {"kind": "TaskComplete", "t": metrics.completion_time})
    if aborted and nrec > 0:
        events_by_row.setdefault(nrec - 1, []).append(
            {"kind": "Abort", "code": aborted})

    with path.open("w") as fh:
        fh.write(_dump(header) + "\n")
        for row in range(nrec):
            inspected = None
            if inspect_task:
                inspected = int(np.count_nonzero(
                    (flip_times >= 0.0) & (flip_times <= runs[0].t[row])))
            fh.write(_dump(frame_dict(runs, row, inspected=inspected,
                                      events=events_by_row.get(row))) + "\n")


def _frame_from_dict(d, total_points) -> TelemetryFrame:
    deputies = []
    for block in d["deputies"]:
        state = FullState.from_vector(np.asarray(block["state"]), time=d["t"])
        margins = {}
        for name, v in block["margins"].items():
            margins[ConstraintId.from_wire(name)] = v
        deputies.append(DeputyFrame(
            state=state,
            u_des=ControlCommand.from_vector(np.asarray(block["u_des"])),
            u_act=ControlCommand.from_vector(np.asarray(block["u_act"])),
            mode=FilterMode(block["mode"]),
            cause=tuple(ConstraintId.from_wire(n) for n in block["cause"]),
            margins=margins,
            qp_status=int(block["qp_status"]),
            qp_iterations=int(block["qp_iterations"]),
        ))
    return TelemetryFrame(
        t=float(d["t"]),
        deputies=tuple(deputies),
        inspected=d.get("inspected"),
        total_points=total_points,
        events=tuple(d.get("events", ())),
    )


def read_header(path) -> dict:
    with Path(path).open() as fh:
        first = fh.readline()
    if not first:
        raise TelemetryError(f"{path}: empty telemetry file")
    header = json.loads(first)
    if header.get("schema") != SCHEMA:
        raise TelemetryError(
            f"{path}: unsupported schema {header.get('schema')!r}")
    return header


def read_telemetry(path):
    """Yield TelemetryFrame records; the header is validated first."""
    header = read_header(path)
    total = header.get("total_points")
    with Path(path).open() as fh:
        fh.readline()
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                yield _frame_from_dict(json.loads(line), total)
            except (KeyError, ValueError) as bad:
                raise TelemetryError(
                    f"{path}:{line_no}: malformed frame ({bad})") from None


@dataclass(frozen=True)
class ReplayReport:
    frames: int
    margins_checked: int
    mismatches: int
    first_mismatch: str | None

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def replay_check(path) -> ReplayReport:
    """Recompute every logged margin from the logged states, bit for bit.

    The catalog and vehicle in the header drive the recomputation (a
    CatalogChange event re-bases it mid-log), so a clean report means the
    log is self-consistent with the current dynamics and constraint code.
    """
    header = read_header(path)
    catalog = [spec_from_dict(d) for d in header["catalog"]]
    vehicle = vehicle_from_dict(header["vehicle"])
    packed = pack_catalog(catalog, vehicle)
    par = vehicle.to_vector()
    cpar = packed["cpar"]
    stack = packed["stack"]
    enabled = packed["enabled"]

    frames = 0
    checked = 0
    mismatches = 0
    first = None
    for frame in read_telemetry(path):
        frames += 1
        for ev in frame.events:
            if ev.get("kind") == "CatalogChange":
                packed = pack_catalog(
                    [spec_from_dict(d) for d in ev["catalog"]], vehicle)
                cpar = packed["cpar"]
                stack = packed["stack"]
                enabled = packed["enabled"]
        for di, dep in enumerate(frame.deputies):
            vec = dep.state.to_vector()
            for cid in ConstraintId:
                logged = dep.margins[cid]
                if not enabled[cid.value]:
                    if logged is not None:
                        mismatches += 1
                        first = first or (
                            f"t={frame.t} deputy={di} {cid.wire_name}: "
                            f"margin logged for disabled constraint")
                    continue
                expect = _k.margin_one(cid.value, vec, frame.t, par, cpar,
                                       stack)
                checked += 1
                if logged is None:
                    agree = not np.isfinite(expect)
                else:
                    agree = logged == expect
                if not agree:
                    mismatches += 1
                    if first is None:
                        first = (f"t={frame.t} deputy={di} {cid.wire_name}: "
                                 f"logged {logged!r} recomputed {expect!r}")
    return ReplayReport(frames=frames, margins_checked=checked,
                        mismatches=mismatches, first_mismatch=first)
