"""Run-time assurance filters.

Two intervention mechanisms over the constraint catalog:

* barrier rows + a minimally invasive QP (the ASIF filter), for
  constraints with usable control sensitivity, and
* switching monitors with verified backup controllers, for constraints
  that only make sense over a predicted flow (passive safety) or as
  resource trips (fuel), plus any barrier row that degenerates while
  violated.

The pipeline combines both with a fixed precedence: switching trips win
over the QP, and an operator override bypasses everything except the
margin bookkeeping.  The hot path lives in the jitted kernels; the
functions here are the typed composition used by the mission driver,
the gateway, and the tests.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .constraints import (
    ConstraintId,
    ConstraintSpec,
    EnforcementMode,
    pack_catalog,
    validate_catalog,
)
from .dynamics import ControlCommand, FullState, VehicleParams
from .errors import ConfigError, DegenerateRowError, ModeError, SolverStallError
from .qp import QpProblem, QpSolution, QpStatus, solve, solve_relaxed


class FilterMode(enum.Enum):
    PASS_THROUGH = "PassThrough"
    QP_MODIFIED = "QpModified"
    SWITCHED_TO_BACKUP = "SwitchedToBackup"
    OVERRIDE = "Override"


class BackupKind(enum.Enum):
    ENMT_INSERTION = "EnmtInsertion"
    ZERO_THRUST_COAST = "ZeroThrustCoast"
    DETUMBLE = "Detumble"


_BK_TO_KERNEL = {
    BackupKind.ZERO_THRUST_COAST: _k.BK_COAST,
    BackupKind.ENMT_INSERTION: _k.BK_ENMT,
    BackupKind.DETUMBLE: _k.BK_DETUMBLE,
}
_BK_FROM_KERNEL = {v: k for k, v in _BK_TO_KERNEL.items()}

_MODE_FROM_KERNEL = {
    _k.FM_PASS: FilterMode.PASS_THROUGH,
    _k.FM_QP: FilterMode.QP_MODIFIED,
    _k.FM_BACKUP: FilterMode.SWITCHED_TO_BACKUP,
    _k.FM_OVERRIDE: FilterMode.OVERRIDE,
}

DEFAULT_BACKUP_GAINS = (0.05, 0.05, 0.02)


@dataclass(frozen=True)
class BackupController:
    """Verified fallback command law; output always inside the box."""

    kind: BackupKind
    gains: tuple = DEFAULT_BACKUP_GAINS
    target: str = ""

    def __post_init__(self):
        if len(self.gains) != 3 or any(g < 0 for g in self.gains):
            raise ConfigError("backup gains must be three nonnegative scalars")

    def command(self, state: FullState, params: VehicleParams) -> ControlCommand:
        out = np.empty(6)
        _k.backup_command(state.to_vector(), params.to_vector(),
                          _BK_TO_KERNEL[self.kind], np.asarray(self.gains, float), out)
        return ControlCommand.from_vector(out)


def enmt_backup(gains: tuple = DEFAULT_BACKUP_GAINS) -> BackupController:
    return BackupController(BackupKind.ENMT_INSERTION, gains,
                            "drift-free manifold v_y = -2 n x, v_x damped")


def coast_backup(gains: tuple = DEFAULT_BACKUP_GAINS) -> BackupController:
    return BackupController(BackupKind.ZERO_THRUST_COAST, gains,
                            "zero thrust, rates damped")


def detumble_backup(gains: tuple = DEFAULT_BACKUP_GAINS) -> BackupController:
    return BackupController(BackupKind.DETUMBLE, gains, "body rates to zero")


def backup_enmt(state: FullState, params: VehicleParams,
                gains: tuple = DEFAULT_BACKUP_GAINS) -> ControlCommand:
    """PD command toward the drift-free manifold, saturated to the box."""
    return enmt_backup(gains).command(state, params)


@dataclass(frozen=True)
class BarrierRow:
    """One QP inequality a . u >= b over u = [thrust, torque]."""

    a: np.ndarray
    b: float
    source: ConstraintId
    margin_h: float


@dataclass(frozen=True)
class SolverSummary:
    status: QpStatus
    iterations: int
    active: tuple


@dataclass(frozen=True)
class FilterDecision:
    u_act: ControlCommand
    intervened: bool
    cause: tuple
    mode: FilterMode
    margins: dict
    solver: SolverSummary | None
    latency: float
    backup: BackupKind | None = None


# ---------------------------------------------------------------------------
# row construction


def _single_packed(spec: ConstraintSpec, params: VehicleParams) -> dict:
    # pack a one-constraint catalog; every other slot stays disabled
    return pack_catalog([spec.with_updates(enabled=True)], params)


def barrier_row(state: FullState, spec: ConstraintSpec,
                params: VehicleParams) -> BarrierRow:
    """The binding barrier row for one constraint at this state.

    Second-order constraints get their extension applied first; the
    attitude cones use the cosine-form extension so torque appears.
    Constraints that expand to one row per axis return the row of the
    worst axis.  A row whose control direction vanishes while satisfied
    comes back regularized (a = 0, b = -kappa(h) < 0, trivially true);
    vanished while violated raises, since no command can help.
    """
    if spec.mode is not EnforcementMode.BARRIER:
        raise ModeError(f"{spec.id.wire_name} is not a barrier-mode constraint")
    packed = _single_packed(spec, params)
    svec = state.to_vector()
    par = params.to_vector()
    A = np.zeros((_k.MAX_ROWS, 6))
    bvec = np.zeros(_k.MAX_ROWS)
    src = np.zeros(_k.MAX_ROWS, np.int64)
    hrow = np.zeros(_k.MAX_ROWS)
    obst = np.empty((0, 6))
    nrows, trig = _k.build_rows(svec, state.time, par, packed["enabled"],
                                packed["modes"], packed["cpar"], packed["kap"],
                                obst, False, A, bvec, src, hrow)
    h = float(_k.margin_one(spec.id.value, svec, state.time, par,
                            packed["cpar"], np.empty((0, 3, 6))))
    if nrows == 0:
        if trig >= 0 or h <= 0.0:
            raise DegenerateRowError(
                f"{spec.id.wire_name}: no control direction while violated (h = {h:.6g})")
        return BarrierRow(a=np.zeros(6), b=-spec.kappa_strength[0] * h,
                          source=spec.id, margin_h=h)
    pick = int(np.argmin(hrow[:nrows]))
    return BarrierRow(a=A[pick].copy(), b=float(bvec[pick]), source=spec.id,
                      margin_h=h)


def build_barrier_rows(state: FullState, catalog: list, params: VehicleParams,
                       obstacles: np.ndarray | None = None,
                       normalize: bool = True):
    """All active rows over the enabled barrier constraints.

    Returns (rows: list[BarrierRow], trigger: ConstraintId | None) where
    trigger names a constraint that degenerated while violated.
    """
    packed = pack_catalog(catalog, params)
    svec = state.to_vector()
    par = params.to_vector()
    A = np.zeros((_k.MAX_ROWS, 6))
    bvec = np.zeros(_k.MAX_ROWS)
    src = np.zeros(_k.MAX_ROWS, np.int64)
    hrow = np.zeros(_k.MAX_ROWS)
    obst = np.empty((0, 6)) if obstacles is None else np.ascontiguousarray(obstacles, dtype=np.float64)
    nrows, trig = _k.build_rows(svec, state.time, par, packed["enabled"],
                                packed["modes"], packed["cpar"], packed["kap"],
                                obst, normalize, A, bvec, src, hrow)
    rows = [BarrierRow(a=A[i].copy(), b=float(bvec[i]),
                       source=ConstraintId(int(src[i])), margin_h=float(hrow[i]))
            for i in range(nrows)]
    return rows, (ConstraintId(int(trig)) if trig >= 0 else None)


# ---------------------------------------------------------------------------
# margins


def margin_map(state: FullState, catalog: list, params: VehicleParams) -> dict:
    """ConstraintId -> h for enabled constraints, None where disabled."""
    packed = pack_catalog(catalog, params)
    out = np.empty(_k.NCON)
    _k.margins_all(state.to_vector(), state.time, params.to_vector(),
                   packed["enabled"], packed["cpar"], packed["stack"], out)
    return {cid: (None if np.isnan(out[cid.value]) else float(out[cid.value]))
            for cid in ConstraintId}


def _margins_from_array(arr) -> dict:
    return {cid: (None if np.isnan(arr[cid.value]) else float(arr[cid.value]))
            for cid in ConstraintId}


# ---------------------------------------------------------------------------
# ASIF (QP) filter


def _control_box(params: VehicleParams):
    lower = np.empty(6)
    upper = np.empty(6)
    lower[:3] = -params.f_max
    upper[:3] = params.f_max
    lower[3:] = -params.tau_max
    upper[3:] = params.tau_max
    return lower, upper


def asif_filter(state: FullState, u_des: ControlCommand, catalog: list,
                params: VehicleParams,
                obstacles: np.ndarray | None = None) -> FilterDecision:
    """Minimally invasive correction of u_des against all barrier rows.

    Pass-through when u_des already satisfies every row and the box;
    otherwise the QP result; infeasible instances are relaxed by
    priority weight (ranks 1-2 stay hard); a degenerate-while-violated
    row or a hard-core infeasibility falls back to the backup command.
    """
    t0 = time.perf_counter()
    validate_catalog(catalog)
    margins = margin_map(state, catalog, params)
    rows, trig = build_barrier_rows(state, catalog, params, obstacles)
    lower, upper = _control_box(params)
    udv = u_des.to_vector()
    backup = enmt_backup()

    if trig is not None:
        u_act = backup.command(state, params)
        return FilterDecision(u_act=u_act, intervened=True, cause=(trig,),
                              mode=FilterMode.SWITCHED_TO_BACKUP, margins=margins,
                              solver=None, latency=time.perf_counter() - t0,
                              backup=backup.kind)

    in_box = bool(np.all(udv >= lower - _k.FEAS_TOL) and np.all(udv <= upper + _k.FEAS_TOL))
    rows_ok = all(float(r.a @ udv) - r.b >= -_k.FEAS_TOL for r in rows)
    if in_box and rows_ok:
        return FilterDecision(u_act=ControlCommand.from_vector(udv), intervened=False,
                              cause=(), mode=FilterMode.PASS_THROUGH, margins=margins,
                              solver=None, latency=time.perf_counter() - t0)

    problem = QpProblem(u_des=udv, rows=tuple((r.a, r.b) for r in rows),
                        lower=lower, upper=upper)
    hard = np.zeros(len(rows), np.bool_)
    try:
        sol = solve(problem)
        if sol.status is QpStatus.INFEASIBLE:
            ranks = {spec.id: spec.priority for spec in catalog}
            enabled_ranks = [spec.priority for spec in catalog if spec.enabled]
            max_rank = max(enabled_ranks) if enabled_ranks else 1
            weights = np.array([10.0 ** (max_rank - ranks[r.source]) for r in rows])
            hard = np.array([ranks[r.source] <= 2 for r in rows])
            sol = solve_relaxed(problem, weights, hard)
    except SolverStallError:
        u_act = backup.command(state, params)
        return FilterDecision(u_act=u_act, intervened=True,
                              cause=tuple(sorted({r.source for r in rows},
                                                 key=lambda c: c.value)),
                              mode=FilterMode.SWITCHED_TO_BACKUP, margins=margins,
                              solver=None, latency=time.perf_counter() - t0,
                              backup=backup.kind)

    if sol.status is QpStatus.INFEASIBLE:
        u_act = backup.command(state, params)
        cause = tuple(sorted({r.source for r, hd in zip(rows, hard) if hd},
                             key=lambda c: c.value))
        return FilterDecision(u_act=u_act, intervened=True, cause=cause,
                              mode=FilterMode.SWITCHED_TO_BACKUP, margins=margins,
                              solver=SolverSummary(sol.status, sol.iterations, ()),
                              latency=time.perf_counter() - t0, backup=backup.kind)

    cause_ids = {rows[i].source for i in sol.active_set}
    cause_ids |= {rows[i].source for i in range(len(rows))
                  if sol.slacks[i] > _k.FEAS_TOL}
    active_srcs = tuple(sorted({rows[i].source for i in sol.active_set},
                               key=lambda c: c.value))
    summary = SolverSummary(sol.status, sol.iterations, active_srcs)
    return FilterDecision(u_act=ControlCommand.from_vector(sol.u), intervened=True,
                          cause=tuple(sorted(cause_ids, key=lambda c: c.value)),
                          mode=FilterMode.QP_MODIFIED, margins=margins,
                          solver=summary, latency=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# switching monitor and filter


_TRANSLATIONAL_IDS = frozenset({
    ConstraintId.SAFE_SEPARATION, ConstraintId.DYNAMIC_SPEED,
    ConstraintId.KEEP_IN, ConstraintId.AXIAL_VELOCITY,
})


def switching_monitor(state: FullState, u_des: ControlCommand,
                      backup: BackupController, horizon: float, dt: float,
                      catalog: list, params: VehicleParams,
                      engine: str = "rk4", control_dt: float = 1.0,
                      substeps: int = 1) -> bool:
    """True iff one step under u_des then the backup flow stays safe.

    Samples every dt seconds over [0, horizon] (endpoint included) and
    requires h >= 0 for every enabled constraint except the drift sweep,
    which has its own monitor.  horizon 0 reduces to an instantaneous
    check of the current state.  The stm engine propagates the sweep
    with the closed-form transition matrix; it is exact only for a
    zero-thrust backup with translational constraints enabled, and
    silently defers to the rk4 engine otherwise.
    """
    if horizon < 0:
        raise ConfigError("monitor horizon must be nonnegative")
    if dt <= 0:
        raise ConfigError("monitor sample interval must be positive")
    if engine not in ("stm", "rk4"):
        raise ConfigError(f"unknown monitor engine {engine!r}")

    packed = pack_catalog(catalog, params)
    enabled_ids = {spec.id for spec in catalog if spec.enabled}

    stm_ok = (backup.kind is BackupKind.ZERO_THRUST_COAST
              and enabled_ids - {ConstraintId.PASSIVE_SAFETY} <= _TRANSLATIONAL_IDS)
    if engine == "stm" and stm_ok and horizon > 0.0:
        svec = state.to_vector()
        par = params.to_vector()
        cur = svec.copy()
        nxt = np.empty(_k.NSTATE)
        scr = np.empty((5, _k.NSTATE))
        sub = control_dt / substeps
        tt = state.time
        for _ in range(substeps):
            _k.rk4_step(cur, tt, u_des.to_vector(), sub, par, nxt, scr)
            cur, nxt = nxt, cur
            tt += sub
        times = np.arange(0.0, horizon + 1e-9, dt)
        if times[-1] < horizon - 1e-9:
            times = np.append(times, horizon)
        stms = np.empty((times.shape[0], 6, 6))
        for i, tk in enumerate(times):
            _k.cw_stm_fill(params.mean_motion, tk, stms[i])
        pv = stms @ cur[0:6]
        r = np.linalg.norm(pv[:, 0:3], axis=1)
        v = np.linalg.norm(pv[:, 3:6], axis=1)
        cp = packed["cpar"]
        if ConstraintId.SAFE_SEPARATION in enabled_ids:
            if np.any(r - cp[_k.CID_SAFE_SEPARATION, 0] < 0.0):
                return False
        if ConstraintId.DYNAMIC_SPEED in enabled_ids:
            if np.any(cp[_k.CID_DYNAMIC_SPEED, 0]
                      + cp[_k.CID_DYNAMIC_SPEED, 1] * r - v < 0.0):
                return False
        if ConstraintId.KEEP_IN in enabled_ids:
            if np.any(cp[_k.CID_KEEP_IN, 0] - r < 0.0):
                return False
        if ConstraintId.AXIAL_VELOCITY in enabled_ids:
            if np.any(cp[_k.CID_AXIAL_VELOCITY, 0]
                      - np.max(np.abs(pv[:, 3:6]), axis=1) < 0.0):
                return False
        return True

    return bool(_k.monitor_rk4_ok(
        state.to_vector(), state.time, u_des.to_vector(), params.to_vector(),
        packed["enabled"], packed["modes"], packed["cpar"],
        control_dt, substeps, _BK_TO_KERNEL[backup.kind],
        np.asarray(backup.gains, float), horizon, dt, min(dt, 10.0)))


def switching_filter(state: FullState, u_des: ControlCommand,
                     backup: BackupController, catalog: list,
                     params: VehicleParams, horizon: float | None = None,
                     dt: float = 10.0, engine: str = "rk4",
                     control_dt: float = 1.0, substeps: int = 1) -> FilterDecision:
    """u_des when the monitor clears it, the backup command otherwise.

    A tripped fuel budget (hysteresis applies) forces the backup
    immediately: a zero-thrust coast when free drift already clears the
    chief, the manifold insertion otherwise.
    """
    t0 = time.perf_counter()
    validate_catalog(catalog)
    margins = margin_map(state, catalog, params)
    if horizon is None:
        horizon = params.period
    by_id = {spec.id: spec for spec in catalog}

    fuel_spec = by_id.get(ConstraintId.FUEL_LIMIT)
    if fuel_spec is not None and fuel_spec.enabled:
        p = fuel_spec.params
        if not _k.fuel_monitor_ok(state.resources.fuel_used, p["dv_budget"],
                                  p["hysteresis"]):
            packed = pack_catalog(catalog, params)
            clears = bool(_k.drift_clears(state.to_vector()[0:6], packed["stack"],
                                          packed["cpar"][_k.CID_PASSIVE_SAFETY, 0]))
            chosen = coast_backup(backup.gains) if clears else enmt_backup(backup.gains)
            u_act = chosen.command(state, params)
            return FilterDecision(u_act=u_act, intervened=True,
                                  cause=(ConstraintId.FUEL_LIMIT,),
                                  mode=FilterMode.SWITCHED_TO_BACKUP,
                                  margins=margins, solver=None,
                                  latency=time.perf_counter() - t0,
                                  backup=chosen.kind)

    ok = switching_monitor(state, u_des, backup, horizon, dt, catalog, params,
                           engine=engine, control_dt=control_dt, substeps=substeps)
    if ok:
        return FilterDecision(u_act=ControlCommand.from_vector(u_des.to_vector()),
                              intervened=False, cause=(),
                              mode=FilterMode.PASS_THROUGH, margins=margins,
                              solver=None, latency=time.perf_counter() - t0)

    # name the constraints whose flow goes bad (per-id re-run, switch
    # events are rare enough that clarity beats speed here)
    cause = []
    for spec in catalog:
        if not spec.enabled or spec.id is ConstraintId.PASSIVE_SAFETY:
            continue
        single = [s.with_updates(enabled=(s.id is spec.id)) for s in catalog]
        if not switching_monitor(state, u_des, backup, horizon, dt, single,
                                 params, engine=engine, control_dt=control_dt,
                                 substeps=substeps):
            cause.append(spec.id)
    u_act = backup.command(state, params)
    return FilterDecision(u_act=u_act, intervened=True,
                          cause=tuple(sorted(cause, key=lambda c: c.value)),
                          mode=FilterMode.SWITCHED_TO_BACKUP, margins=margins,
                          solver=None, latency=time.perf_counter() - t0,
                          backup=backup.kind)


# ---------------------------------------------------------------------------
# combined pipeline


@dataclass(frozen=True)
class PipelineConfig:
    vehicle: VehicleParams
    control_dt: float = 1.0
    substeps: int = 1
    backup_gains: tuple = DEFAULT_BACKUP_GAINS

    def __post_init__(self):
        if self.control_dt <= 0:
            raise ConfigError("control_dt must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be at least 1")


class RtaPipeline:
    """One deputy's assurance pipeline: packed catalog plus scratch.

    Each decide() call is synchronous and bounded; instances are
    independent and hold no threads.  Catalog changes come in through
    replace_catalog between control cycles only.
    """

    def __init__(self, catalog: list, config: PipelineConfig):
        self.config = config
        self.replace_catalog(catalog)
        # raw solver codes from the most recent call, for episode recorders
        # that log QP telemetry even on frames the decision summary omits
        self.last_qp_status = -1
        self.last_qp_iters = 0
        self._par = config.vehicle.to_vector()
        self._A = np.zeros((_k.MAX_ROWS, 6))
        self._b = np.zeros(_k.MAX_ROWS)
        self._src = np.zeros(_k.MAX_ROWS, np.int64)
        self._hrow = np.zeros(_k.MAX_ROWS)
        self._widx = np.zeros(_k.MAX_ROWS, np.int64)
        self._wlam = np.zeros(_k.MAX_ROWS)
        self._slacks = np.zeros(_k.MAX_ROWS)
        self._scr = np.empty((5, _k.NSTATE))
        self._out_u = np.empty(6)
        self._out_m = np.empty(_k.NCON)
        self._out_s = np.empty(_k.NSTATE)
        self._no_obst = np.empty((0, 6))

    def replace_catalog(self, catalog: list):
        validate_catalog(catalog)
        self.catalog = list(catalog)
        self.packed = pack_catalog(catalog, self.config.vehicle)

    def decide(self, state: FullState, u_des: ControlCommand,
               override: bool = False,
               obstacles: np.ndarray | None = None) -> FilterDecision:
        """Route one control cycle through the full pipeline."""
        t0 = time.perf_counter()
        obst = self._no_obst if obstacles is None else \
            np.ascontiguousarray(obstacles, dtype=np.float64)
        p = self.packed
        mode, cause_bits, qp_status, qp_iters, nact, bk = _k.pipeline_decide(
            state.to_vector(), state.time, u_des.to_vector(), self._par,
            p["enabled"], p["modes"], p["cpar"], p["kap"],
            p["hard"], p["weights"], p["stack"], obst,
            self.config.control_dt, self.config.substeps, override,
            np.asarray(self.config.backup_gains, float),
            self._out_u, self._out_m,
            self._A, self._b, self._src, self._hrow,
            self._widx, self._wlam, self._slacks, self._scr)
        latency = time.perf_counter() - t0
        self.last_qp_status = int(qp_status)
        self.last_qp_iters = int(qp_iters)
        return self._decision(mode, cause_bits, qp_status, qp_iters, nact, bk,
                              latency)

    def _decision(self, mode, cause_bits, qp_status, qp_iters, nact, bk,
                  latency) -> FilterDecision:
        fmode = _MODE_FROM_KERNEL[mode]
        cause = tuple(cid for cid in ConstraintId if cause_bits & (1 << cid.value))
        solver = None
        if fmode is FilterMode.QP_MODIFIED:
            status = {_k.QP_OPTIMAL: QpStatus.OPTIMAL,
                      _k.QP_RELAXED: QpStatus.RELAXED_OPTIMAL,
                      _k.QP_INFEASIBLE: QpStatus.INFEASIBLE}.get(qp_status)
            active = tuple(sorted({ConstraintId(int(self._widx[a]))
                                   for a in range(nact)}, key=lambda c: c.value))
            solver = SolverSummary(status, int(qp_iters), active)
        return FilterDecision(
            u_act=ControlCommand.from_vector(self._out_u),
            intervened=fmode is not FilterMode.PASS_THROUGH,
            cause=cause,
            mode=fmode,
            margins=_margins_from_array(self._out_m),
            solver=solver,
            latency=latency,
            backup=_BK_FROM_KERNEL.get(bk),
        )

    def step(self, state: FullState, u_des: ControlCommand,
             override: bool = False,
             obstacles: np.ndarray | None = None):
        """decide() plus zero-order-hold propagation over one cycle.

        Returns (decision, next_state); next_state is None when the
        propagated state has a non-finite component, which callers should
        treat as an abort (never clamp and continue).
        """
        t0 = time.perf_counter()
        obst = self._no_obst if obstacles is None else \
            np.ascontiguousarray(obstacles, dtype=np.float64)
        p = self.packed
        mode, cause_bits, qp_status, qp_iters, nact, bk = _k.pipeline_cycle(
            state.to_vector(), state.time, u_des.to_vector(), self._par,
            p["enabled"], p["modes"], p["cpar"], p["kap"],
            p["hard"], p["weights"], p["stack"], obst,
            self.config.control_dt, self.config.substeps, override,
            np.asarray(self.config.backup_gains, float),
            self._out_s, self._out_u, self._out_m,
            self._A, self._b, self._src, self._hrow,
            self._widx, self._wlam, self._slacks, self._scr)
        latency = time.perf_counter() - t0
        self.last_qp_status = int(qp_status)
        self.last_qp_iters = int(qp_iters)
        decision = self._decision(mode, cause_bits, qp_status, qp_iters, nact,
                                  bk, latency)
        next_state = None
        if np.all(np.isfinite(self._out_s)):
            next_state = FullState.from_vector(self._out_s,
                                               time=state.time + self.config.control_dt)
        return decision, next_state


def pipeline(state: FullState, u_des: ControlCommand, catalog: list,
             config: PipelineConfig, override: bool = False,
             obstacles: np.ndarray | None = None) -> FilterDecision:
    """One-shot pipeline decision (see RtaPipeline for the reusable form)."""
    return RtaPipeline(catalog, config).decide(state, u_des, override=override,
                                               obstacles=obstacles)
