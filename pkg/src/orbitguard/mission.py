"""Episode orchestration: scenario configuration, the fixed-rate control
loop (policy, assurance filter, propagation), inspection bookkeeping with
the illumination model, metrics, and telemetry.

Two interchangeable engines run an episode.  The fused engine executes
the whole loop inside one jitted kernel; the stepwise engine drives the
same kernels through the public Policy and RtaPipeline objects one cycle
at a time.  Both produce bit-identical trajectories, records, and
telemetry, so the fast path is continuously validated against the
composable one.

Time runs on an exact grid t = t0 + c * control_dt; states between grid
points exist only inside the integrator.  A non-finite state or a solver
stall aborts the episode (never clamped) with the offending frame kept in
the record.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as _k
from .constraints import (
    ConstraintId,
    default_catalog,
    pack_catalog,
    validate_catalog,
)
from .dynamics import FullState, VehicleParams
from .errors import CatalogError, ConfigError, ScenarioError
from .filters import FilterMode, PipelineConfig, RtaPipeline
from .policies import (
    ActionMode,
    ObservationFrame,
    PolicyKind,
    PolicySpec,
    default_action_table,
    make_policy,
)

CHIEF_RADIUS = 10.0
DOCK_RADIUS = 1.0


class TaskKind(enum.Enum):
    NONE = "None"
    DOCK = "Dock"
    INSPECT = "Inspect"


_TASK_TO_KERNEL = {
    TaskKind.NONE: _k.TASK_NONE,
    TaskKind.DOCK: _k.TASK_DOCK,
    TaskKind.INSPECT: _k.TASK_INSPECT,
}

_POLICY_TO_KERNEL = {
    PolicyKind.RANDOM_POLICY: _k.POL_STREAM,
    PolicyKind.SCRIPTED_DOCK: _k.POL_DOCK,
    PolicyKind.SCRIPTED_INSPECT: _k.POL_INSPECT,
    PolicyKind.NEURAL_POLICY: _k.POL_MLP,
}

ABORT_NAMES = {
    _k.ABORT_NONFINITE: "NonFiniteState",
    _k.ABORT_QP_STALL: "QpStall",
}

_MODE_TO_KERNEL = {
    FilterMode.PASS_THROUGH: _k.FM_PASS,
    FilterMode.QP_MODIFIED: _k.FM_QP,
    FilterMode.SWITCHED_TO_BACKUP: _k.FM_BACKUP,
    FilterMode.OVERRIDE: _k.FM_OVERRIDE,
}


@dataclass(frozen=True)
class TaskSpec:
    """What the episode counts as mission progress."""

    kind: TaskKind = TaskKind.NONE
    point_count: int = 20
    chief_radius: float = CHIEF_RADIUS
    dock_radius: float = DOCK_RADIUS


@dataclass(frozen=True)
class DeputySetup:
    state: FullState
    policy: PolicySpec


@dataclass(frozen=True)
class Scenario:
    """One reproducible episode configuration.

    catalog left empty picks up the default catalog built for the given
    vehicle.  filter_rate is the assurance/decision rate in Hz; dt is the
    integrator step, and the control period must be an integer multiple
    of it (the command is held zero-order in between).
    """

    deputies: tuple
    duration: float
    catalog: tuple = ()
    dt: float = 0.1
    filter_rate: float = 10.0
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "deputies", tuple(self.deputies))
        if not self.catalog:
            object.__setattr__(
                self, "catalog", tuple(default_catalog(self.vehicle)))
        else:
            object.__setattr__(self, "catalog", tuple(self.catalog))
        problems = validate_scenario(self)
        if problems:
            raise ScenarioError(problems)

    @property
    def control_dt(self) -> float:
        return 1.0 / self.filter_rate

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.dt))

    @property
    def cycles(self) -> int:
        return int(math.floor(self.duration * self.filter_rate + 1e-9))


def validate_scenario(scenario: Scenario) -> list:
    """All invariant violations as 'field: problem' strings, empty if ok."""
    problems = []
    if len(scenario.deputies) < 1:
        problems.append("deputies: at least one deputy required")
    for i, dep in enumerate(scenario.deputies):
        if not isinstance(dep, DeputySetup):
            problems.append(f"deputies[{i}]: expected a DeputySetup")
            continue
        if dep.state.time != scenario.deputies[0].state.time:
            problems.append(f"deputies[{i}].state: initial times must agree")
    if not scenario.duration > 0.0:
        problems.append("duration: must be positive")
    if not scenario.dt > 0.0:
        problems.append("dt: must be positive")
    if not scenario.filter_rate > 0.0:
        problems.append("filter_rate: must be positive")
    elif scenario.dt > 0.0:
        if scenario.filter_rate > 1.0 / scenario.dt + 1e-9:
            problems.append("filter_rate: control period shorter than dt")
        else:
            period = 1.0 / scenario.filter_rate
            nsub = round(period / scenario.dt)
            if abs(period - nsub * scenario.dt) > 1e-9 * max(1.0, period):
                problems.append(
                    "dt: control period must be an integer multiple of dt")
    task = scenario.task
    if task.kind is TaskKind.INSPECT and task.point_count < 1:
        problems.append("task.point_count: must be >= 1")
    if task.chief_radius <= 0.0:
        problems.append("task.chief_radius: must be positive")
    if task.dock_radius <= 0.0:
        problems.append("task.dock_radius: must be positive")
    try:
        validate_catalog(list(scenario.catalog))
    except CatalogError as bad:
        problems.append(f"catalog: {bad}")
    return problems


# ---------------------------------------------------------------------------
# inspection points


@dataclass(frozen=True)
class InspectionPoint:
    """Unit normal on the chief sphere plus its inspection history."""

    normal: np.ndarray
    inspected: bool = False
    inspected_at: float | None = None

    def __post_init__(self):
        normal = np.ascontiguousarray(self.normal, dtype=np.float64)
        if normal.shape != (3,):
            raise ConfigError("normal must be a 3-vector")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
            raise ConfigError("normal must be unit length")
        normal.flags.writeable = False
        object.__setattr__(self, "normal", normal)


def generate_points(count: int) -> list:
    """Fibonacci-sphere lattice of inspection points, deterministic."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    out = []
    for i in range(count):
        z = 1.0 - (2.0 * i + 1.0) / count
        r = np.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i
        v = np.array([r * np.cos(theta), r * np.sin(theta), z])
        out.append(InspectionPoint(normal=v / np.linalg.norm(v)))
    return out


def points_array(points) -> np.ndarray:
    arr = np.empty((len(points), 3))
    for i, p in enumerate(points):
        arr[i] = p.normal
    return arr


def _flips(normals, done, pos, sun, chief_radius):
    """Indices flipping to inspected this instant; kernel-identical math."""
    x, y, z = float(pos[0]), float(pos[1]), float(pos[2])
    d = np.sqrt(x * x + y * y + z * z)
    if d <= chief_radius:
        return []
    rhx, rhy, rhz = x / d, y / d, z / d
    sx, sy, sz = float(sun[0]), float(sun[1]), float(sun[2])
    out = []
    for p in range(normals.shape[0]):
        if done[p]:
            continue
        n0, n1, n2 = normals[p, 0], normals[p, 1], normals[p, 2]
        if (n0 * rhx + n1 * rhy + n2 * rhz) > 0.0 \
                and (n0 * sx + n1 * sy) + n2 * sz > 0.0:
            out.append(p)
    return out


def update_inspection(points, deputy_position, sun, time=None,
                      chief_radius=CHIEF_RADIUS) -> list:
    """New point list with permanent flips applied.

    A point flips iff it faces the deputy (line of sight from outside the
    chief sphere) and faces the sun (illumination); inspected points never
    revert.
    """
    normals = points_array(points)
    done = np.array([p.inspected for p in points])
    flipped = set(_flips(normals, done, deputy_position, sun, chief_radius))
    return [replace(p, inspected=True, inspected_at=time) if i in flipped
            else p for i, p in enumerate(points)]


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class EpisodeMetrics:
    delta_v: float
    inspected_fraction: float
    intervention_count: int
    intervention_duration: float
    min_margins: dict
    completion_time: float | None


@dataclass(frozen=True)
class EpisodeResult:
    metrics: EpisodeMetrics
    telemetry_path: str | None
    final_states: tuple
    cycles: int
    aborted: str | None
    points: tuple
    qp_calls: int
    max_qp_iterations: int
    # raw per-deputy record arrays, only when run_episode(keep_records=True);
    # large for long episodes, so off by default
    records: tuple | None = None


class _DeputyRun:
    """Raw per-deputy record arrays for one episode."""

    def __init__(self, ncycles, stride):
        cap = (ncycles + stride - 1) // stride if stride > 0 else 0
        self.t = np.empty(cap)
        self.s = np.empty((cap, _k.NSTATE))
        self.u_des = np.empty((cap, 6))
        self.u_act = np.empty((cap, 6))
        self.margins = np.empty((cap, _k.NCON))
        self.mode = np.empty(cap, np.int64)
        self.cause = np.empty(cap, np.int64)
        self.qp_status = np.empty(cap, np.int64)
        self.qp_iters = np.empty(cap, np.int64)
        self.min_margins = np.full(_k.NCON, np.inf)
        self.counters = np.zeros(8, np.int64)
        self.insp_done = None
        self.insp_time = None
        self.final = None
        self.cycles_done = 0
        self.abort = _k.ABORT_NONE
        self.completion = -1.0
        self.nrec = 0

    def trim(self, nrec):
        self.nrec = nrec
        for name in ("t", "s", "u_des", "u_act", "margins", "mode", "cause",
                     "qp_status", "qp_iters"):
            setattr(self, name, getattr(self, name)[:nrec])


def _policy_kernel_args(spec: PolicySpec, vehicle: VehicleParams, ncycles,
                        policy):
    """Arrays run_cycles needs for one policy, matching the Policy object."""
    kind = _POLICY_TO_KERNEL[spec.kind]
    gains = np.asarray(spec.gains, float)
    stream = np.empty((0, 6))
    dims = np.zeros(1, np.int64)
    wflat = np.empty(0)
    bflat = np.empty(0)
    scale = np.empty(0)
    table = np.empty((0, 6))
    frame = _k.OBS_HILL
    if kind == _k.POL_STREAM:
        stream = policy.stream(ncycles)
    elif kind == _k.POL_MLP:
        dims, wflat, bflat, scale = spec.weights.packed()
        if spec.action_mode is ActionMode.DISCRETE:
            table = default_action_table(vehicle)
        if spec.observation_frame is ObservationFrame.CHIEF_RELATIVE_SPHERICAL:
            frame = _k.OBS_SPHERICAL
    return kind, gains, stream, dims, wflat, bflat, scale, table, frame


def _run_deputy_fused(scenario, dep, policy, packed, normals, run, stride):
    vehicle = scenario.vehicle
    ncycles = scenario.cycles
    kind, gains, stream, dims, wflat, bflat, scale, table, frame = \
        _policy_kernel_args(dep.policy, vehicle, ncycles, policy)
    s_final, cycles_done, abort, completion, nrec = _k.run_cycles(
        dep.state.to_vector(), dep.state.time, ncycles,
        scenario.control_dt, scenario.substeps,
        vehicle.to_vector(), packed["enabled"], packed["modes"],
        packed["cpar"], packed["kap"], packed["hard"], packed["weights"],
        packed["stack"], np.asarray(PipelineConfig(vehicle=vehicle).backup_gains),
        kind, stream, gains,
        dims, wflat, bflat, scale, table, frame,
        _TASK_TO_KERNEL[scenario.task.kind], normals,
        dep.policy.standoff, scenario.task.chief_radius,
        scenario.task.dock_radius,
        run.insp_done, run.insp_time,
        stride, run.t, run.s, run.u_des, run.u_act, run.margins,
        run.mode, run.cause, run.qp_status, run.qp_iters,
        run.min_margins, run.counters)
    run.final = s_final
    run.cycles_done = int(cycles_done)
    run.abort = int(abort)
    run.completion = float(completion)
    run.trim(int(nrec))


def _margins_vector(margins: dict) -> np.ndarray:
    out = np.empty(_k.NCON)
    for cid in ConstraintId:
        v = margins[cid]
        out[cid.value] = np.nan if v is None else v
    return out


class StepwiseDeputy:
    """One deputy's cycle-at-a-time loop over the public objects.

    advance() matches the fused kernel bit for bit; the gateway mutates
    policy / pipe / override input between cycles, which the kernel path
    cannot do.
    """

    def __init__(self, scenario, dep, policy, normals, run, stride):
        self.pipe = RtaPipeline(
            list(scenario.catalog),
            PipelineConfig(vehicle=scenario.vehicle,
                           control_dt=scenario.control_dt,
                           substeps=scenario.substeps))
        self.policy = policy
        self.run = run
        self.normals = normals
        self.stride = stride
        self.ctrl_dt = scenario.control_dt
        self.task = _TASK_TO_KERNEL[scenario.task.kind]
        self.chief_radius = scenario.task.chief_radius
        self.dock_radius = scenario.task.dock_radius
        self.gains = np.asarray(dep.policy.gains, float)
        self.n = scenario.vehicle.mean_motion
        self.s = dep.state.to_vector()
        self.t0 = dep.state.time
        self.done = run.insp_done
        self.ninsp = int(self.done.sum())
        self.nrec = 0

    def advance(self, c, scripted=None, override=False) -> int:
        """Run control cycle c; returns the abort code (0 = keep going).

        scripted, when given, replaces the policy output as u_des and is
        normally paired with override=True (operator takeover).
        """
        run = self.run
        t = self.t0 + c * self.ctrl_dt
        state = FullState.from_vector(self.s, time=t)
        if scripted is None:
            u_des = self.policy.command(state, points=self.normals,
                                        done=self.done)
        else:
            u_des = scripted
        decision, nxt = self.pipe.step(state, u_des, override=override)
        margins = _margins_vector(decision.margins)
        qpst = self.pipe.last_qp_status
        abort = _k.ABORT_NONE

        live = ~np.isnan(margins)
        np.minimum(run.min_margins, np.where(live, margins, np.inf),
                   out=run.min_margins)
        mode = _MODE_TO_KERNEL[decision.mode]
        run.counters[mode] += 1
        if qpst >= 0 and mode != _k.FM_PASS:
            run.counters[4] += 1
        if self.pipe.last_qp_iters > run.counters[5]:
            run.counters[5] = self.pipe.last_qp_iters
        if qpst == _k.QP_STALL:
            abort = _k.ABORT_QP_STALL

        s = self.s
        if self.task == _k.TASK_INSPECT and self.ninsp < self.done.shape[0]:
            sun = (np.cos(self.n * t), -np.sin(self.n * t), 0.0)
            for p in _flips(self.normals, self.done, s[:3], sun,
                            self.chief_radius):
                self.done[p] = True
                run.insp_time[p] = t
                self.ninsp += 1
            if self.ninsp == self.done.shape[0] and run.completion < 0.0:
                run.completion = t
        elif self.task == _k.TASK_DOCK and run.completion < 0.0:
            d = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
            nv = np.sqrt(s[3] * s[3] + s[4] * s[4] + s[5] * s[5])
            if d < self.dock_radius and nv < self.gains[3]:
                run.completion = t
                run.counters[7] = 1

        if self.stride > 0 and c % self.stride == 0:
            nrec = self.nrec
            run.t[nrec] = t
            run.s[nrec] = s
            run.u_des[nrec] = u_des.to_vector()
            run.u_act[nrec] = decision.u_act.to_vector()
            run.margins[nrec] = margins
            run.mode[nrec] = mode
            bits = 0
            for cid in decision.cause:
                bits |= 1 << cid.value
            run.cause[nrec] = bits
            run.qp_status[nrec] = qpst
            run.qp_iters[nrec] = self.pipe.last_qp_iters
            self.nrec = nrec + 1

        if nxt is None:
            abort = _k.ABORT_NONFINITE
        run.cycles_done = c + 1
        if abort != _k.ABORT_NONE:
            run.abort = abort
        else:
            self.s = nxt.to_vector()
        return abort

    def finish(self):
        self.run.final = self.s
        self.run.counters[6] = self.ninsp
        self.run.trim(self.nrec)


def _run_deputy_stepwise(scenario, dep, policy, normals, run, stride):
    """Same loop as the fused kernel, via the public objects, bit for bit."""
    walker = StepwiseDeputy(scenario, dep, policy, normals, run, stride)
    for c in range(scenario.cycles):
        if walker.advance(c) != _k.ABORT_NONE:
            break
    walker.finish()


def run_episode(scenario: Scenario, telemetry_path=None, engine="fused",
                record_stride=1, keep_records=False) -> EpisodeResult:
    """Run one episode and reduce it to metrics (plus telemetry if asked).

    Deputies do not interact; each runs against its own copy of the
    inspection set, and the episode-level inspected count is the union.
    An abort by any deputy ends the whole episode at that cycle.
    keep_records returns the raw per-deputy arrays on the result for
    in-memory analysis of runs too long to log.
    """
    if engine not in ("fused", "stepwise"):
        raise ConfigError(f"unknown engine {engine!r}")
    if record_stride < 0:
        raise ConfigError("record_stride must be >= 0")
    packed = pack_catalog(list(scenario.catalog), scenario.vehicle)
    inspect = scenario.task.kind is TaskKind.INSPECT
    points = generate_points(scenario.task.point_count) if inspect else []
    normals = points_array(points)
    ncycles = scenario.cycles

    runs = []
    for i, dep in enumerate(scenario.deputies):
        spec = dep.policy
        if spec.kind is PolicyKind.RANDOM_POLICY:
            # scenario seed and deputy index fold into the stream seed so
            # reruns repeat and deputies never share a stream
            spec = replace(spec, seed=spec.seed + 1000003 * scenario.seed + i)
        policy = make_policy(spec, scenario.vehicle)
        run = _DeputyRun(ncycles, record_stride)
        run.insp_done = np.zeros(len(points), np.bool_)
        run.insp_time = np.full(len(points), -1.0)
        if engine == "fused":
            _run_deputy_fused(scenario, dep, policy, packed, normals, run,
                              record_stride)
        else:
            _run_deputy_stepwise(scenario, dep, policy, normals, run,
                                 record_stride)
        runs.append(run)

    metrics, flip_times, aborted, cycles = finalize_episode(
        scenario, runs, points, record_stride)
    final_states = tuple(
        FullState.from_vector(r.final,
                              time=scenario.deputies[0].state.time
                              + r.cycles_done * scenario.control_dt)
        for r in runs)
    final_points = _final_points(points, flip_times)

    if telemetry_path is not None:
        from .telemetry import write_episode
        write_episode(telemetry_path, scenario, runs, aborted, metrics,
                      flip_times)

    return EpisodeResult(
        metrics=metrics,
        telemetry_path=None if telemetry_path is None else str(telemetry_path),
        final_states=final_states,
        cycles=cycles,
        aborted=aborted,
        points=tuple(final_points),
        qp_calls=int(sum(r.counters[4] for r in runs)),
        max_qp_iterations=int(max(r.counters[5] for r in runs)),
        records=tuple(runs) if keep_records else None,
    )


def finalize_episode(scenario, runs, points, record_stride=1):
    """Reduce finished per-deputy runs: align aborted record lengths,
    union the inspection flips, compute metrics.

    Returns (metrics, flip_times, aborted_name, cycles).
    """
    cycles = min(r.cycles_done for r in runs)
    aborted = next((
        ABORT_NAMES[r.abort] for r in runs if r.abort != _k.ABORT_NONE), None)
    if aborted:
        keep = min((r.cycles_done + record_stride - 1) // record_stride
                   for r in runs) if record_stride > 0 else 0
        for r in runs:
            r.trim(min(r.nrec, keep))
    flip_times = _union_flip_times(points, runs)
    metrics = _reduce_metrics(scenario, runs, points, flip_times)
    return metrics, flip_times, aborted, cycles


def metrics_to_dict(metrics: EpisodeMetrics) -> dict:
    """Wire form of the episode metrics (gateway result payloads)."""
    return {
        "delta_v": metrics.delta_v,
        "inspected_fraction": metrics.inspected_fraction,
        "intervention_count": metrics.intervention_count,
        "intervention_duration": metrics.intervention_duration,
        "min_margins": {cid.wire_name: None if metrics.min_margins[cid] is None
                        else float(metrics.min_margins[cid])
                        for cid in ConstraintId},
        "completion_time": metrics.completion_time,
    }


def _union_flip_times(points, runs):
    """Earliest flip time per point across deputies, -1 if never."""
    times = np.full(len(points), -1.0)
    for run in runs:
        hit = run.insp_time >= 0.0
        better = hit & ((times < 0.0) | (run.insp_time < times))
        times[better] = run.insp_time[better]
    return times


def _final_points(points, times):
    return [replace(p, inspected=bool(times[i] >= 0.0),
                    inspected_at=float(times[i]) if times[i] >= 0.0 else None)
            for i, p in enumerate(points)]


def _reduce_metrics(scenario, runs, points, times) -> EpisodeMetrics:
    delta_v = float(sum(r.final[_k.IFUEL] for r in runs))
    if points:
        fraction = float(np.count_nonzero(times >= 0.0)) / len(points)
        completion = float(times.max()) if np.all(times >= 0.0) else None
    else:
        fraction = 0.0
        completion = None
        if scenario.task.kind is TaskKind.DOCK:
            docked = [r.completion for r in runs if r.completion >= 0.0]
            completion = min(docked) if docked else None
    count = int(sum(r.cycles_done - r.counters[_k.FM_PASS] for r in runs))
    mins = {}
    for cid in ConstraintId:
        vals = [r.min_margins[cid.value] for r in runs
                if np.isfinite(r.min_margins[cid.value])]
        mins[cid] = min(vals) if vals else None
    return EpisodeMetrics(
        delta_v=delta_v,
        inspected_fraction=fraction,
        intervention_count=count,
        intervention_duration=count * scenario.control_dt,
        min_margins=mins,
        completion_time=completion,
    )


def compute_metrics(frames, control_dt=None) -> EpisodeMetrics:
    """Metrics recomputed from telemetry frames alone (the log oracle).

    delta_v reflects the last logged frame; inspection figures come from
    the per-frame inspected count, and completion from the TaskComplete
    annotation (count scan as fallback for streams without events).
    """
    frames = list(frames)
    if not frames:
        raise ConfigError("no frames to reduce")
    if control_dt is None:
        control_dt = frames[1].t - frames[0].t if len(frames) > 1 else 1.0
    count = 0
    completion = None
    mins = {cid: None for cid in ConstraintId}
    for frame in frames:
        for dep in frame.deputies:
            if dep.mode is not FilterMode.PASS_THROUGH:
                count += 1
            for cid, v in dep.margins.items():
                if v is not None and (mins[cid] is None or v < mins[cid]):
                    mins[cid] = v
        if completion is None:
            for ev in frame.events:
                if ev.get("kind") == "TaskComplete":
                    completion = float(ev["t"])
                    break
    last = frames[-1]
    delta_v = float(sum(d.state.to_vector()[_k.IFUEL] for d in last.deputies))
    fraction = 0.0
    counts = [f.inspected for f in frames if f.inspected is not None]
    if counts and frames[0].total_points:
        total = frames[0].total_points
        fraction = counts[-1] / total
        if completion is None and counts[-1] == total:
            for f in frames:
                if f.inspected == total:
                    completion = f.t
                    break
    return EpisodeMetrics(
        delta_v=delta_v,
        inspected_fraction=fraction,
        intervention_count=count,
        intervention_duration=count * control_dt,
        min_margins=mins,
        completion_time=completion,
    )
