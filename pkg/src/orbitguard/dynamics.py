"""Deputy dynamics in the chief's Hill frame.

The translational model is the Clohessy-Wiltshire linearization about a
circular chief orbit (x radial, y along-track, z cross-track), attitude is
rigid-body with scalar-last quaternions (body to Hill), and the resource
block carries battery, bulk temperature, and accumulated delta-v as
first-order surrogates.  Propagation is fixed-step classical RK4 with
zero-order-held control; the closed-form CW state-transition matrix is the
analytic oracle for the translational part and the fast path for drift
monitoring.

All heavy lifting happens in :mod:`orbitguard._kernels`; this module owns
the typed value objects and validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _kernels as _k
from .errors import ConfigError, DomainError

__all__ = [
    "TranslationalState",
    "AttitudeState",
    "ResourceState",
    "FullState",
    "ControlCommand",
    "VehicleParams",
    "cw_derivative",
    "attitude_derivative",
    "resource_derivative",
    "propagate_rk4",
    "cw_stm",
    "sun_direction",
]


def _vec(x, n, name):
    arr = np.array(x, dtype=np.float64)  # always copy; value objects own their data
    if arr.shape != (n,):
        raise DomainError(f"{name} must be a {n}-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite components")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TranslationalState:
    """Relative position (m) and velocity (m/s) in the Hill frame."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position, 3, "position"))
        object.__setattr__(self, "velocity", _vec(self.velocity, 3, "velocity"))


@dataclass(frozen=True)
class AttitudeState:
    """Body-to-Hill quaternion (x, y, z, w scalar-last) and body rate (rad/s)."""

    quaternion: np.ndarray
    body_rate: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quaternion", _vec(self.quaternion, 4, "quaternion"))
        object.__setattr__(self, "body_rate", _vec(self.body_rate, 3, "body_rate"))

    @staticmethod
    def identity() -> "AttitudeState":
        return AttitudeState(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))


@dataclass(frozen=True)
class ResourceState:
    """Battery fraction in [0, 1], temperature (K), cumulative delta-v (m/s)."""

    battery: float = 0.9
    temperature: float = 290.0
    fuel_used: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.battery <= 1.0):
            raise DomainError(f"battery {self.battery} outside [0, 1]")
        if self.fuel_used < 0.0:
            raise DomainError("fuel_used must be non-negative")
        if not np.isfinite(self.temperature):
            raise DomainError("temperature is not finite")


@dataclass(frozen=True)
class FullState:
    translational: TranslationalState
    attitude: AttitudeState = field(default_factory=AttitudeState.identity)
    resources: ResourceState = field(default_factory=ResourceState)
    time: float = 0.0

    def to_vector(self) -> np.ndarray:
        """Pack into the flat 16-vector the kernels use."""
        out = np.empty(_k.NSTATE)
        out[0:3] = self.translational.position
        out[3:6] = self.translational.velocity
        out[6:10] = self.attitude.quaternion
        out[10:13] = self.attitude.body_rate
        out[13] = self.resources.battery
        out[14] = self.resources.temperature
        out[15] = self.resources.fuel_used
        return out

    @staticmethod
    def from_vector(vec: np.ndarray, time: float = 0.0) -> "FullState":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (_k.NSTATE,):
            raise DomainError(f"state vector must have length {_k.NSTATE}")
        return FullState(
            translational=TranslationalState(vec[0:3].copy(), vec[3:6].copy()),
            attitude=AttitudeState(vec[6:10].copy(), vec[10:13].copy()),
            resources=ResourceState(float(vec[13]), float(vec[14]), float(vec[15])),
            time=time,
        )

    @staticmethod
    def at_rest(position, time: float = 0.0) -> "FullState":
        """Deputy at a Hill-frame position, zero rates, default resources."""
        return FullState(
            translational=TranslationalState(np.asarray(position, dtype=np.float64),
                                             np.zeros(3)),
            time=time,
        )


@dataclass(frozen=True)
class ControlCommand:
    """Thrust (N, commanded frame per VehicleParams) and body torque (N m)."""

    thrust: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "thrust", _vec(self.thrust, 3, "thrust"))
        object.__setattr__(self, "torque", _vec(self.torque, 3, "torque"))

    def to_vector(self) -> np.ndarray:
        out = np.empty(6)
        out[0:3] = self.thrust
        out[3:6] = self.torque
        return out

    @staticmethod
    def from_vector(u: np.ndarray) -> "ControlCommand":
        u = np.asarray(u, dtype=np.float64)
        return ControlCommand(u[0:3].copy(), u[3:6].copy())

    def clipped(self, params: "VehicleParams") -> "ControlCommand":
        return ControlCommand(
            np.clip(self.thrust, -params.f_max, params.f_max),
            np.clip(self.torque, -params.tau_max, params.tau_max),
        )

    def in_box(self, params: "VehicleParams", tol: float = 0.0) -> bool:
        return bool(
            np.all(np.abs(self.thrust) <= params.f_max + tol)
            and np.all(np.abs(self.torque) <= params.tau_max + tol)
        )


def _unit(x, name):
    arr = _vec(x, 3, name)
    n = float(np.linalg.norm(arr))
    if abs(n - 1.0) > 1e-9:
        arr = arr / n
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VehicleParams:
    """Physical and surrogate-model coefficients for one deputy.

    Thrust is commanded in the Hill frame by default; set
    thrust_frame="body" for 6-DOF scenarios.  The delta-v conversion is the
    1/mass factor in the fuel-rate surrogate (sum |F_i| / m).
    """

    mass: float = 12.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.022, 0.022, 0.022]))
    mean_motion: float = 0.001027
    f_max: float = 1.0
    tau_max: float = 1e-3
    panel_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    boresight_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    antenna_axis: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, 0.0]))
    generation_rate: float = 4e-4
    load_rate: float = 2e-5
    thermal_time_constant: float = 2000.0
    cold_equilibrium: float = 250.0
    hot_equilibrium: float = 310.0
    thrust_frame: str = "hill"

    def __post_init__(self):
        if self.mass <= 0.0:
            raise ConfigError("mass must be positive")
        if self.mean_motion <= 0.0:
            raise ConfigError("mean_motion must be positive")
        if self.f_max <= 0.0 or self.tau_max <= 0.0:
            raise ConfigError("actuator limits must be positive")
        if self.thermal_time_constant <= 0.0:
            raise ConfigError("thermal_time_constant must be positive")
        if self.thrust_frame not in ("hill", "body"):
            raise ConfigError(f"thrust_frame must be 'hill' or 'body', got {self.thrust_frame!r}")
        inertia = np.asarray(self.inertia, dtype=np.float64)
        if inertia.shape != (3, 3):
            raise ConfigError("inertia must be a 3x3 matrix")
        if not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ConfigError("inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(inertia) <= 0.0):
            raise ConfigError("inertia must be positive-definite")
        inertia = inertia.copy()
        inertia.flags.writeable = False
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "panel_axis", _unit(self.panel_axis, "panel_axis"))
        object.__setattr__(self, "boresight_axis", _unit(self.boresight_axis, "boresight_axis"))
        object.__setattr__(self, "antenna_axis", _unit(self.antenna_axis, "antenna_axis"))

    def to_vector(self) -> np.ndarray:
        """Pack into the flat parameter vector the kernels use."""
        out = np.empty(_k.NPARAMS)
        out[_k.PN] = self.mean_motion
        out[_k.PMASS] = self.mass
        out[_k.PFMAX] = self.f_max
        out[_k.PTMAX] = self.tau_max
        out[_k.PIN:_k.PIN + 9] = np.asarray(self.inertia).ravel()
        out[_k.PINV:_k.PINV + 9] = np.linalg.inv(self.inertia).ravel()
        out[_k.PPANEL:_k.PPANEL + 3] = self.panel_axis
        out[_k.PBORE:_k.PBORE + 3] = self.boresight_axis
        out[_k.PANT:_k.PANT + 3] = self.antenna_axis
        out[_k.PGEN] = self.generation_rate
        out[_k.PLOAD] = self.load_rate
        out[_k.PTHTAU] = self.thermal_time_constant
        out[_k.PTCOLD] = self.cold_equilibrium
        out[_k.PTHOT] = self.hot_equilibrium
        out[_k.PFRAME] = 1.0 if self.thrust_frame == "body" else 0.0
        return out

    @property
    def period(self) -> float:
        """Chief orbital period, seconds."""
        return 2.0 * np.pi / self.mean_motion


def vehicle_to_dict(params: VehicleParams) -> dict:
    return {
        "mass": params.mass,
        "inertia": [[float(v) for v in row] for row in params.inertia],
        "mean_motion": params.mean_motion,
        "f_max": params.f_max,
        "tau_max": params.tau_max,
        "panel_axis": [float(v) for v in params.panel_axis],
        "boresight_axis": [float(v) for v in params.boresight_axis],
        "antenna_axis": [float(v) for v in params.antenna_axis],
        "generation_rate": params.generation_rate,
        "load_rate": params.load_rate,
        "thermal_time_constant": params.thermal_time_constant,
        "cold_equilibrium": params.cold_equilibrium,
        "hot_equilibrium": params.hot_equilibrium,
        "thrust_frame": params.thrust_frame,
    }


def vehicle_from_dict(d: dict) -> VehicleParams:
    known = {f.name for f in fields(VehicleParams)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown vehicle fields {sorted(bad)}")
    kwargs = dict(d)
    for key in ("inertia", "panel_axis", "boresight_axis", "antenna_axis"):
        if key in kwargs:
            kwargs[key] = np.asarray(kwargs[key], dtype=np.float64)
    return VehicleParams(**kwargs)


# ---------------------------------------------------------------------------
# operations


def cw_derivative(ts: TranslationalState, thrust_hill, params: VehicleParams) -> np.ndarray:
    """[v; a] under CW dynamics with Hill-frame thrust."""
    thrust_hill = _vec(thrust_hill, 3, "thrust_hill")
    n = params.mean_motion
    m = params.mass
    r, v = ts.position, ts.velocity
    return np.array([
        v[0], v[1], v[2],
        3.0 * n * n * r[0] + 2.0 * n * v[1] + thrust_hill[0] / m,
        -2.0 * n * v[0] + thrust_hill[1] / m,
        -n * n * r[2] + thrust_hill[2] / m,
    ])


def attitude_derivative(att: AttitudeState, torque, params: VehicleParams) -> np.ndarray:
    """[q_dot; w_dot]: quaternion kinematics and Euler's equation."""
    torque = _vec(torque, 3, "torque")
    q = att.quaternion
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise DomainError("quaternion is not unit-norm")
    w = att.body_rate
    qd = 0.5 * np.array([
        q[3] * w[0] + q[1] * w[2] - q[2] * w[1],
        q[3] * w[1] + q[2] * w[0] - q[0] * w[2],
        q[3] * w[2] + q[0] * w[1] - q[1] * w[0],
        -(q[0] * w[0] + q[1] * w[1] + q[2] * w[2]),
    ])
    iw = params.inertia @ w
    wd = np.linalg.solve(params.inertia, torque - np.cross(w, iw))
    return np.concatenate([qd, wd])


def resource_derivative(state: FullState, cmd: ControlCommand, sun,
                        params: VehicleParams) -> np.ndarray:
    """(battery rate, temperature rate, fuel rate) surrogates."""
    sun = _vec(sun, 3, "sun")
    if abs(np.linalg.norm(sun) - 1.0) > 1e-9:
        raise DomainError("sun vector must be unit-norm")
    panel_hill = np.empty(3)
    _k.quat_rotate(state.attitude.quaternion, params.panel_axis, panel_hill)
    exposure = max(0.0, float(panel_hill @ sun))
    battery_rate = params.generation_rate * exposure - params.load_rate
    t_eq = params.cold_equilibrium + (params.hot_equilibrium - params.cold_equilibrium) * exposure
    temp_rate = (t_eq - state.resources.temperature) / params.thermal_time_constant
    fuel_rate = float(np.sum(np.abs(cmd.thrust))) / params.mass
    return np.array([battery_rate, temp_rate, fuel_rate])


def propagate_rk4(state: FullState, cmd: ControlCommand, dt: float,
                  params: VehicleParams) -> FullState:
    """One RK4 step of the full coupled state under a held command."""
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    if not cmd.in_box(params, tol=1e-12):
        raise DomainError("command outside actuator box")
    s = state.to_vector()
    out = np.empty(_k.NSTATE)
    scr = np.empty((5, _k.NSTATE))
    _k.rk4_step(s, state.time, cmd.to_vector(), dt, params.to_vector(), out, scr)
    return FullState.from_vector(out, time=state.time + dt)


def cw_stm(n: float, t: float) -> np.ndarray:
    """Closed-form CW state-transition matrix mapping [r0, v0] to [r(t), v(t)]."""
    if n <= 0.0:
        raise ConfigError("mean motion must be positive")
    out = np.empty((6, 6))
    _k.cw_stm_fill(n, t, out)
    return out


def sun_direction(t: float, n: float) -> np.ndarray:
    """Unit sun vector in the Hill frame at time t (inertially fixed sun)."""
    out = np.empty(3)
    _k.sun_direction_at(t, n, out)
    return out
