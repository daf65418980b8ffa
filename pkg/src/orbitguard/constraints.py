"""Safety constraint catalog.

Each constraint is an inequality h_i(x) >= 0.  The catalog owns default
parameters, operator-facing enable/priority metadata, analytic gradients
for the barrier filter, and the class-K strengthening used to build QP
rows.  Two constraints (PassiveSafety, FuelLimit) are enforced by
switching monitors rather than barrier rows; asking for their barrier
gradient is a mode error.

Margins use physical units (meters, m/s, radians, kelvin, charge
fraction).  margin_scale gives the per-constraint normalization used by
the safety acceptance tolerance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as _k
from .dynamics import FullState, VehicleParams
from .errors import CatalogError, DomainError, ModeError


class ConstraintId(enum.Enum):
    SAFE_SEPARATION = _k.CID_SAFE_SEPARATION
    DYNAMIC_SPEED = _k.CID_DYNAMIC_SPEED
    KEEP_IN = _k.CID_KEEP_IN
    PASSIVE_SAFETY = _k.CID_PASSIVE_SAFETY
    AXIAL_VELOCITY = _k.CID_AXIAL_VELOCITY
    ATTITUDE_EXCLUSION = _k.CID_ATTITUDE_EXCLUSION
    COMMUNICATION = _k.CID_COMMUNICATION
    TEMPERATURE = _k.CID_TEMPERATURE
    BATTERY = _k.CID_BATTERY
    ANGULAR_VELOCITY = _k.CID_ANGULAR_VELOCITY
    FUEL_LIMIT = _k.CID_FUEL_LIMIT

    @property
    def wire_name(self) -> str:
        return _WIRE_NAMES[self]

    @staticmethod
    def from_wire(name: str) -> "ConstraintId":
        try:
            return _FROM_WIRE[name]
        except KeyError:
            raise CatalogError(f"unknown constraint id {name!r}") from None


_WIRE_NAMES = {
    ConstraintId.SAFE_SEPARATION: "SafeSeparation",
    ConstraintId.DYNAMIC_SPEED: "DynamicSpeed",
    ConstraintId.KEEP_IN: "KeepIn",
    ConstraintId.PASSIVE_SAFETY: "PassiveSafety",
    ConstraintId.AXIAL_VELOCITY: "AxialVelocity",
    ConstraintId.ATTITUDE_EXCLUSION: "AttitudeExclusion",
    ConstraintId.COMMUNICATION: "Communication",
    ConstraintId.TEMPERATURE: "Temperature",
    ConstraintId.BATTERY: "Battery",
    ConstraintId.ANGULAR_VELOCITY: "AngularVelocity",
    ConstraintId.FUEL_LIMIT: "FuelLimit",
}
_FROM_WIRE = {v: k for k, v in _WIRE_NAMES.items()}


class EnforcementMode(enum.Enum):
    BARRIER = "barrier"
    SWITCHING = "switching"


@dataclass(frozen=True)
class ConstraintSpec:
    id: ConstraintId
    enabled: bool
    priority: int
    mode: EnforcementMode
    params: dict
    kappa_strength: tuple

    def __post_init__(self):
        if self.priority < 1:
            raise CatalogError(f"{self.id.wire_name}: priority must be >= 1")
        if not self.kappa_strength or any(k <= 0 for k in self.kappa_strength):
            raise CatalogError(f"{self.id.wire_name}: kappa_strength must be positive")
        bad = set(self.params) - set(f.name for f in PARAMETER_SCHEMA[self.id])
        if bad:
            raise CatalogError(f"{self.id.wire_name}: unknown params {sorted(bad)}")

    def with_updates(self, enabled=None, priority=None, params=None) -> "ConstraintSpec":
        merged = dict(self.params)
        if params:
            merged.update(params)
        return replace(
            self,
            enabled=self.enabled if enabled is None else bool(enabled),
            priority=self.priority if priority is None else int(priority),
            params=merged,
        )


@dataclass(frozen=True)
class ConstraintEval:
    h: float
    gradient: np.ndarray
    relative_degree: int


@dataclass(frozen=True)
class ParamField:
    """One operator-editable scalar: name, unit, closed range, default."""

    name: str
    unit: str
    low: float
    high: float
    default: float


def _schema(params: VehicleParams | None = None):
    n = params.mean_motion if params is not None else 0.001027
    period = 2.0 * np.pi / n
    return {
        ConstraintId.SAFE_SEPARATION: (
            ParamField("collision_radius", "m", 1.0, 500.0, 15.0),
            ParamField("deputy_radius", "m", 1.0, 500.0, 10.0),
        ),
        ConstraintId.DYNAMIC_SPEED: (
            ParamField("nu0", "m/s", 0.01, 10.0, 0.2),
            ParamField("nu1", "1/s", 0.0, 1.0, 2.0 * n),
        ),
        ConstraintId.KEEP_IN: (
            ParamField("r_max", "m", 50.0, 100000.0, 1000.0),
        ),
        ConstraintId.PASSIVE_SAFETY: (
            ParamField("collision_radius", "m", 1.0, 500.0, 15.0),
            ParamField("horizon", "s", 0.0, 10.0 * period, period),
            ParamField("sample_dt", "s", 1.0, 600.0, 10.0),
        ),
        ConstraintId.AXIAL_VELOCITY: (
            ParamField("v_max", "m/s", 0.01, 100.0, 1.0),
        ),
        ConstraintId.ATTITUDE_EXCLUSION: (
            ParamField("cone_half_angle", "rad", 0.01, 1.5, np.pi / 6.0),
        ),
        ConstraintId.COMMUNICATION: (
            ParamField("cone_half_angle", "rad", 0.01, 1.5, np.pi / 4.0),
        ),
        ConstraintId.TEMPERATURE: (
            ParamField("t_min", "K", 100.0, 400.0, 230.0),
            ParamField("t_max", "K", 100.0, 400.0, 330.0),
        ),
        ConstraintId.BATTERY: (
            ParamField("q_min", "fraction", 0.0, 1.0, 0.2),
        ),
        ConstraintId.ANGULAR_VELOCITY: (
            ParamField("omega_max", "rad/s", 1e-4, 10.0, 0.1),
        ),
        ConstraintId.FUEL_LIMIT: (
            ParamField("dv_budget", "m/s", 0.01, 1000.0, 20.0),
            ParamField("hysteresis", "fraction", 0.0, 0.9, 0.05),
        ),
    }


PARAMETER_SCHEMA = _schema()

_SWITCHING_IDS = frozenset({ConstraintId.PASSIVE_SAFETY, ConstraintId.FUEL_LIMIT})
_DEGREE_TWO_IDS = frozenset({ConstraintId.SAFE_SEPARATION, ConstraintId.KEEP_IN})


def parameter_schema(params: VehicleParams | None = None) -> dict:
    """Operator-facing parameter fields per constraint (drives the console
    forms); defaults pick up the vehicle's mean motion when given."""
    return _schema(params)


def default_catalog(params: VehicleParams | None = None) -> list[ConstraintSpec]:
    """The 11 default specs, priorities 1..11 in wire order, Communication
    disabled."""
    schema = _schema(params)
    out = []
    for rank, cid in enumerate(ConstraintId, start=1):
        mode = EnforcementMode.SWITCHING if cid in _SWITCHING_IDS else EnforcementMode.BARRIER
        strengths = (0.05, 0.1) if cid in _DEGREE_TWO_IDS else (0.1,)
        out.append(ConstraintSpec(
            id=cid,
            enabled=cid is not ConstraintId.COMMUNICATION,
            priority=rank,
            mode=mode,
            params={f.name: f.default for f in schema[cid]},
            kappa_strength=strengths,
        ))
    return out


def spec_to_dict(spec: ConstraintSpec) -> dict:
    """Wire form of one catalog row (telemetry headers, scenario files,
    gateway snapshots)."""
    return {
        "id": spec.id.wire_name,
        "enabled": spec.enabled,
        "priority": spec.priority,
        "mode": spec.mode.value,
        "params": {k: float(v) for k, v in spec.params.items()},
        "kappa_strength": [float(k) for k in spec.kappa_strength],
    }


def spec_from_dict(d: dict) -> ConstraintSpec:
    try:
        cid = ConstraintId.from_wire(d["id"])
        return ConstraintSpec(
            id=cid,
            enabled=bool(d["enabled"]),
            priority=int(d["priority"]),
            mode=EnforcementMode(d["mode"]),
            params=dict(d.get("params", {})),
            kappa_strength=tuple(d.get("kappa_strength", (0.1,))),
        )
    except KeyError as missing:
        raise CatalogError(f"constraint entry missing {missing}") from None
    except ValueError as bad:
        raise CatalogError(str(bad)) from None


def validate_catalog(catalog: list[ConstraintSpec]) -> None:
    seen_ids = set()
    for spec in catalog:
        if spec.id in seen_ids:
            raise CatalogError(f"duplicate spec for {spec.id.wire_name}")
        seen_ids.add(spec.id)
        if spec.id in _SWITCHING_IDS and spec.mode is not EnforcementMode.SWITCHING:
            raise CatalogError(f"{spec.id.wire_name} must use switching mode")
        schema = PARAMETER_SCHEMA[spec.id]
        for f in schema:
            v = spec.params.get(f.name, f.default)
            if not (f.low <= v <= f.high):
                raise CatalogError(
                    f"{spec.id.wire_name}.{f.name} = {v} outside [{f.low}, {f.high}]")
    ranks = [s.priority for s in catalog if s.enabled]
    if len(set(ranks)) != len(ranks):
        raise CatalogError("priorities must be unique among enabled constraints")


def margin_scale(spec: ConstraintSpec) -> float:
    """Characteristic magnitude of one constraint's margin, for normalized
    tolerances."""
    p = spec.params
    cid = spec.id
    if cid is ConstraintId.SAFE_SEPARATION or cid is ConstraintId.PASSIVE_SAFETY:
        return float(p["collision_radius"])
    if cid is ConstraintId.DYNAMIC_SPEED:
        return float(p["nu0"])
    if cid is ConstraintId.KEEP_IN:
        return float(p["r_max"])
    if cid is ConstraintId.AXIAL_VELOCITY:
        return float(p["v_max"])
    if cid in (ConstraintId.ATTITUDE_EXCLUSION, ConstraintId.COMMUNICATION):
        return float(p["cone_half_angle"])
    if cid is ConstraintId.TEMPERATURE:
        return 0.5 * float(p["t_max"] - p["t_min"])
    if cid is ConstraintId.BATTERY:
        return float(p["q_min"])
    if cid is ConstraintId.ANGULAR_VELOCITY:
        return float(p["omega_max"])
    return float(p["dv_budget"])


def kappa(h: float, strength: float) -> float:
    """Linear class-K strengthening."""
    if strength <= 0.0:
        raise DomainError("kappa strength must be positive")
    return strength * h


# ---------------------------------------------------------------------------
# packing for the kernels


def pack_catalog(catalog: list[ConstraintSpec], params: VehicleParams) -> dict:
    """Flat arrays the jitted pipeline consumes.

    Weights follow the priority semantics: ranks 1 and 2 are hard (never
    relaxed); softer rows get slack weight 10^(max_rank - rank).
    """
    validate_catalog(catalog)
    enabled = np.zeros(_k.NCON, dtype=np.bool_)
    modes = np.zeros(_k.NCON, dtype=np.int64)
    cpar = np.zeros((_k.NCON, 4))
    kap = np.zeros((_k.NCON, 2))
    hard = np.zeros(_k.NCON, dtype=np.bool_)
    weights = np.ones(_k.NCON)
    scales = np.ones(_k.NCON)
    ranks = {}

    for spec in catalog:
        i = spec.id.value
        enabled[i] = spec.enabled
        modes[i] = (_k.MODE_SWITCHING if spec.mode is EnforcementMode.SWITCHING
                    else _k.MODE_BARRIER)
        kap[i, 0] = spec.kappa_strength[0]
        kap[i, 1] = spec.kappa_strength[1] if len(spec.kappa_strength) > 1 else spec.kappa_strength[0]
        scales[i] = margin_scale(spec)
        ranks[i] = spec.priority
        p = spec.params
        if spec.id is ConstraintId.SAFE_SEPARATION:
            cpar[i, 0] = p["collision_radius"]
            cpar[i, 1] = p["deputy_radius"]
        elif spec.id is ConstraintId.DYNAMIC_SPEED:
            cpar[i, 0] = p["nu0"]
            cpar[i, 1] = p["nu1"]
        elif spec.id is ConstraintId.KEEP_IN:
            cpar[i, 0] = p["r_max"]
        elif spec.id is ConstraintId.PASSIVE_SAFETY:
            cpar[i, 0] = p["collision_radius"]
            cpar[i, 1] = p["horizon"]
            cpar[i, 2] = p["sample_dt"]
        elif spec.id is ConstraintId.AXIAL_VELOCITY:
            cpar[i, 0] = p["v_max"]
        elif spec.id in (ConstraintId.ATTITUDE_EXCLUSION, ConstraintId.COMMUNICATION):
            cpar[i, 0] = p["cone_half_angle"]
        elif spec.id is ConstraintId.TEMPERATURE:
            cpar[i, 0] = p["t_min"]
            cpar[i, 1] = p["t_max"]
        elif spec.id is ConstraintId.BATTERY:
            cpar[i, 0] = p["q_min"]
        elif spec.id is ConstraintId.ANGULAR_VELOCITY:
            cpar[i, 0] = p["omega_max"]
        else:
            cpar[i, 0] = p["dv_budget"]
            cpar[i, 1] = p["hysteresis"]

    enabled_ranks = [ranks[i] for i in range(_k.NCON) if enabled[i] and i in ranks]
    max_rank = max(enabled_ranks) if enabled_ranks else 1
    for i, rank in ranks.items():
        hard[i] = rank <= 2
        weights[i] = 10.0 ** (max_rank - rank)

    stack = _k.build_drift_stack(params.mean_motion, cpar[_k.CID_PASSIVE_SAFETY, 1],
                                 cpar[_k.CID_PASSIVE_SAFETY, 2]) \
        if cpar[_k.CID_PASSIVE_SAFETY, 1] > 0.0 else np.empty((0, 3, 6))

    return {
        "enabled": enabled,
        "modes": modes,
        "cpar": cpar,
        "kap": kap,
        "hard": hard,
        "weights": weights,
        "scales": scales,
        "stack": stack,
    }


# ---------------------------------------------------------------------------
# evaluation


def _spec_check(cid: ConstraintId, spec: ConstraintSpec):
    if not isinstance(cid, ConstraintId):
        raise CatalogError(f"unknown constraint id {cid!r}")
    if spec.id is not cid:
        raise CatalogError(f"spec id {spec.id.wire_name} does not match {cid.wire_name}")


def _cone_cosine(state: FullState, axis: np.ndarray, target: np.ndarray):
    q = np.asarray(state.attitude.quaternion, dtype=np.float64)
    q = q / np.linalg.norm(q)
    axis_hill = np.empty(3)
    _k.quat_rotate(q, axis, axis_hill)
    c = float(np.clip(axis_hill @ target, -1.0, 1.0))
    return c, q


def _cone_cos_gradient(q: np.ndarray, axis: np.ndarray, target: np.ndarray) -> np.ndarray:
    # d/dq of target . R(q) axis, projected onto the unit-quaternion tangent
    qv, w = q[:3], q[3]
    a, d = axis, target
    grad = np.empty(4)
    grad[:3] = 2.0 * (w * np.cross(a, d) + (qv @ a) * d + (d @ qv) * a - 2.0 * (a @ d) * qv)
    grad[3] = 2.0 * float(d @ np.cross(qv, a))
    return grad - (grad @ q) * q


def evaluate(cid: ConstraintId, state: FullState, spec: ConstraintSpec,
             sun: np.ndarray, vehicle: VehicleParams | None = None) -> ConstraintEval:
    """Margin h and analytic gradient over the constraint's state block.

    Blocks: position (SafeSeparation, KeepIn), position+velocity
    (DynamicSpeed), velocity (AxialVelocity), quaternion (cones), scalar
    (Temperature, Battery), body rate (AngularVelocity).  `vehicle`
    supplies the body axes for the attitude cones; standard axes
    otherwise.
    """
    _spec_check(cid, spec)
    if cid in _SWITCHING_IDS:
        raise ModeError(f"{cid.wire_name} is enforced by a switching monitor, "
                        "not a barrier gradient")
    p = spec.params
    r = state.translational.position
    v = state.translational.velocity

    if cid is ConstraintId.SAFE_SEPARATION:
        d = float(np.linalg.norm(r))
        if d < 1e-12:
            raise DomainError("gradient singular at the origin")
        return ConstraintEval(d - p["collision_radius"], r / d, 2)

    if cid is ConstraintId.DYNAMIC_SPEED:
        d = float(np.linalg.norm(r))
        nv = float(np.linalg.norm(v))
        h = p["nu0"] + p["nu1"] * d - nv
        grad = np.zeros(6)
        if d > 1e-12:
            grad[:3] = p["nu1"] * r / d
        if nv > 1e-12:
            grad[3:] = -v / nv
        return ConstraintEval(h, grad, 1)

    if cid is ConstraintId.KEEP_IN:
        d = float(np.linalg.norm(r))
        if d < 1e-12:
            raise DomainError("gradient singular at the origin")
        return ConstraintEval(p["r_max"] - d, -r / d, 2)

    if cid is ConstraintId.AXIAL_VELOCITY:
        i = int(np.argmax(np.abs(v)))
        grad = np.zeros(3)
        grad[i] = -np.sign(v[i])  # subgradient 0 at the kink
        return ConstraintEval(p["v_max"] - float(np.max(np.abs(v))), grad, 1)

    if cid is ConstraintId.ATTITUDE_EXCLUSION:
        sun = np.asarray(sun, dtype=np.float64)
        axis = _body_axis(cid, vehicle)
        c, q = _cone_cosine(state, axis, sun)
        s2 = 1.0 - c * c
        # angle kink at exact (anti-)alignment: zero subgradient
        grad = (np.zeros(4) if s2 < 1e-10
                else -_cone_cos_gradient(q, axis, sun) / np.sqrt(s2))
        return ConstraintEval(float(np.arccos(c)) - p["cone_half_angle"], grad, 1)

    if cid is ConstraintId.COMMUNICATION:
        target = np.array([-1.0, 0.0, 0.0])
        axis = _body_axis(cid, vehicle)
        c, q = _cone_cosine(state, axis, target)
        s2 = 1.0 - c * c
        grad = (np.zeros(4) if s2 < 1e-10
                else _cone_cos_gradient(q, axis, target) / np.sqrt(s2))
        return ConstraintEval(p["cone_half_angle"] - float(np.arccos(c)), grad, 1)

    if cid is ConstraintId.TEMPERATURE:
        t = state.resources.temperature
        hi, lo = p["t_max"] - t, t - p["t_min"]
        if hi < lo:
            return ConstraintEval(hi, np.array([-1.0]), 1)
        return ConstraintEval(lo, np.array([1.0]), 1)

    if cid is ConstraintId.BATTERY:
        return ConstraintEval(state.resources.battery - p["q_min"], np.array([1.0]), 1)

    # angular velocity
    w = state.attitude.body_rate
    i = int(np.argmax(np.abs(w)))
    grad = np.zeros(3)
    grad[i] = -np.sign(w[i])
    return ConstraintEval(p["omega_max"] - float(np.max(np.abs(w))), grad, 1)


_AXIS_ATTR = {
    ConstraintId.ATTITUDE_EXCLUSION: "boresight_axis",
    ConstraintId.COMMUNICATION: "antenna_axis",
}
_DEFAULT_AXES = {
    ConstraintId.ATTITUDE_EXCLUSION: np.array([0.0, 0.0, 1.0]),
    ConstraintId.COMMUNICATION: np.array([-1.0, 0.0, 0.0]),
}


def _body_axis(cid: ConstraintId, vehicle: VehicleParams | None) -> np.ndarray:
    if vehicle is not None:
        return np.asarray(getattr(vehicle, _AXIS_ATTR[cid]))
    return _DEFAULT_AXES[cid]


def extend_second_order(cid: ConstraintId, state: FullState,
                        spec: ConstraintSpec) -> ConstraintEval:
    """psi = h_dot + kappa(h) and its gradient over [position, velocity]."""
    _spec_check(cid, spec)
    if cid not in _DEGREE_TWO_IDS:
        raise ModeError(f"{cid.wire_name} has relative degree 1")
    r = state.translational.position
    v = state.translational.velocity
    d = float(np.linalg.norm(r))
    if d < 1e-12:
        raise DomainError("second-order extension singular at the origin")
    k1 = spec.kappa_strength[0]
    rhat = r / d
    rv = float(rhat @ v)
    grad = np.empty(6)
    if cid is ConstraintId.SAFE_SEPARATION:
        h = d - spec.params["collision_radius"]
        psi = rv + k1 * h
        grad[:3] = (v - rv * rhat) / d + k1 * rhat
        grad[3:] = rhat
    else:
        h = spec.params["r_max"] - d
        psi = -rv + k1 * h
        grad[:3] = -(v - rv * rhat) / d - k1 * rhat
        grad[3:] = -rhat
    return ConstraintEval(psi, grad, 2)


def gradient_check(cid: ConstraintId, state: FullState, spec: ConstraintSpec,
                   sun: np.ndarray, eps: float = 1e-4,
                   vehicle: VehicleParams | None = None) -> float:
    """Max relative error between the analytic gradient and central finite
    differences of evaluate over the constraint's state block."""
    base = evaluate(cid, state, spec, sun, vehicle)
    vec = state.to_vector()
    block = _BLOCK_SLICES[cid]
    idx = list(range(block.start, block.stop))

    # reject states where the finite differences straddle a kink
    if cid in (ConstraintId.AXIAL_VELOCITY, ConstraintId.ANGULAR_VELOCITY):
        comp = np.abs(vec[block])
        top = np.sort(comp)[::-1]
        if top[0] < 2 * eps or (len(top) > 1 and top[0] - top[1] < 4 * eps):
            raise DomainError("finite differences straddle the |.| kink")
    if cid is ConstraintId.TEMPERATURE:
        t = vec[block][0]
        if abs((spec.params["t_max"] - t) - (t - spec.params["t_min"])) < 4 * eps:
            raise DomainError("finite differences straddle the band midpoint")
    if cid is ConstraintId.DYNAMIC_SPEED:
        for nrm in (np.linalg.norm(vec[0:3]), np.linalg.norm(vec[3:6])):
            if 0.0 < nrm < 4 * eps:
                raise DomainError("finite differences straddle the norm kink")
    if cid in (ConstraintId.ATTITUDE_EXCLUSION, ConstraintId.COMMUNICATION):
        axis = _body_axis(cid, vehicle)
        target = (np.asarray(sun, dtype=np.float64)
                  if cid is ConstraintId.ATTITUDE_EXCLUSION
                  else np.array([-1.0, 0.0, 0.0]))
        c, _ = _cone_cosine(state, axis, target)
        if 1.0 - c * c < 2.5e-3:  # within ~0.05 rad of the angle kink
            raise DomainError("finite differences unreliable near cone alignment")

    fd = np.empty(len(idx))
    for j, i in enumerate(idx):
        up, dn = vec.copy(), vec.copy()
        up[i] += eps
        dn[i] -= eps
        h_up = evaluate(cid, FullState.from_vector(up, state.time), spec, sun, vehicle).h
        h_dn = evaluate(cid, FullState.from_vector(dn, state.time), spec, sun, vehicle).h
        fd[j] = (h_up - h_dn) / (2 * eps)
    denom = max(float(np.linalg.norm(base.gradient)), 1e-9)
    return float(np.linalg.norm(fd - base.gradient)) / denom


_BLOCK_SLICES = {
    ConstraintId.SAFE_SEPARATION: slice(0, 3),
    ConstraintId.DYNAMIC_SPEED: slice(0, 6),
    ConstraintId.KEEP_IN: slice(0, 3),
    ConstraintId.AXIAL_VELOCITY: slice(3, 6),
    ConstraintId.ATTITUDE_EXCLUSION: slice(6, 10),
    ConstraintId.COMMUNICATION: slice(6, 10),
    ConstraintId.TEMPERATURE: slice(14, 15),
    ConstraintId.BATTERY: slice(13, 14),
    ConstraintId.ANGULAR_VELOCITY: slice(10, 13),
}
