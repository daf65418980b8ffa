"""Primary controllers producing the desired command u_des.

Four kinds: scripted dock and inspect controllers (PD laws with a
speed-limit-aware reference velocity), feed-forward neural inference
from a plain-text weights file, and a seeded random prober for safety
testing.  Every policy output lies inside the command box before the
assurance filter sees it; none of them know the filter exists.

Weights files are a single self-describing text document:

    dims: [10, 8, 3]
    activation: tanh
    W_1:
    <row-major matrix, dims[1] lines of dims[0] numbers>
    b_1:
    <one line of dims[1] numbers>
    ...
    output_scale: [1.0, 1.0, 1.0]

Hidden layers are tanh, the output layer linear; outputs are multiplied
by output_scale per component.  Continuous nets end in 3 (thrust) or 6
(thrust + torque) outputs; discrete-action nets end in one logit per
action-table row and the command is the argmax row.  Input
normalization is a repo convention (positions in km, see
build_observation), not something the weights file declares.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as _k
from .dynamics import ControlCommand, FullState, VehicleParams
from .errors import ConfigError, PolicyError, WeightsFileError

# (kp, kv, frac, nu0, nu1): position gain, velocity gain, fraction of the
# speed envelope used as the reference-velocity cap, and the envelope
DEFAULT_GAINS = (0.01, 0.1, 0.8, 0.2, 2.0 * 0.001027)
DEFAULT_STANDOFF = 50.0
MAX_LAYER_WIDTH = 64


class PolicyKind(enum.Enum):
    SCRIPTED_DOCK = "ScriptedDock"
    SCRIPTED_INSPECT = "ScriptedInspect"
    NEURAL_POLICY = "NeuralPolicy"
    RANDOM_POLICY = "RandomPolicy"


class ActionMode(enum.Enum):
    CONTINUOUS = "Continuous"
    DISCRETE = "Discrete"


class ObservationFrame(enum.Enum):
    HILL = "Hill"
    CHIEF_RELATIVE_SPHERICAL = "ChiefRelativeSpherical"


_FRAME_TO_KERNEL = {
    ObservationFrame.HILL: _k.OBS_HILL,
    ObservationFrame.CHIEF_RELATIVE_SPHERICAL: _k.OBS_SPHERICAL,
}


@dataclass(frozen=True)
class MlpWeights:
    """Dense feed-forward net: tanh hidden layers, linear scaled output."""

    dims: tuple
    weights: tuple
    biases: tuple
    output_scale: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 2:
            raise WeightsFileError("dims needs at least input and output layers")
        for d in dims:
            if d < 1 or d > MAX_LAYER_WIDTH:
                raise WeightsFileError(
                    f"layer width {d} outside [1, {MAX_LAYER_WIDTH}]")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise WeightsFileError("one weight matrix and bias per layer required")
        ws, bs = [], []
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            w = np.ascontiguousarray(w, dtype=np.float64)
            b = np.ascontiguousarray(b, dtype=np.float64)
            if w.shape != (dims[l], dims[l - 1]):
                raise WeightsFileError(
                    f"W_{l} must be {dims[l]}x{dims[l - 1]}, got {w.shape}")
            if b.shape != (dims[l],):
                raise WeightsFileError(f"b_{l} must have {dims[l]} entries")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise WeightsFileError(f"layer {l} has non-finite entries")
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        scale = np.ascontiguousarray(self.output_scale, dtype=np.float64)
        if scale.shape != (dims[-1],):
            raise WeightsFileError(
                f"output_scale must have {dims[-1]} entries, got {scale.shape[0]}")
        if not np.all(np.isfinite(scale)):
            raise WeightsFileError("output_scale has non-finite entries")
        object.__setattr__(self, "output_scale", scale)

    def packed(self):
        """(dims, wflat, bflat, scale) in the layout the kernels consume."""
        dims = np.asarray(self.dims, np.int64)
        wflat = np.concatenate([w.ravel() for w in self.weights])
        bflat = np.concatenate(self.biases)
        return dims, wflat, bflat, self.output_scale


@dataclass(frozen=True)
class PolicySpec:
    """Which controller a deputy runs, with its knobs."""

    kind: PolicyKind
    gains: tuple = DEFAULT_GAINS
    weights: MlpWeights | None = None
    action_mode: ActionMode = ActionMode.CONTINUOUS
    observation_frame: ObservationFrame = ObservationFrame.HILL
    seed: int = 0
    standoff: float = DEFAULT_STANDOFF

    def __post_init__(self):
        if len(self.gains) != 5 or any(g <= 0 for g in self.gains):
            raise PolicyError("gains must be five positive scalars "
                              "(kp, kv, frac, nu0, nu1)")
        if self.standoff <= 0:
            raise PolicyError("standoff must be positive")
        if self.kind is PolicyKind.NEURAL_POLICY and self.weights is None:
            raise PolicyError("neural policy requires weights")


# ---------------------------------------------------------------------------
# weights file io


def _parse_bracket_list(text, line, kind):
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise WeightsFileError("expected a bracketed list", line)
    items = [p.strip() for p in text[1:-1].split(",") if p.strip()]
    out = []
    for p in items:
        try:
            out.append(kind(p))
        except ValueError:
            raise WeightsFileError(f"bad {kind.__name__} value {p!r}", line)
    return out


class _Lines:
    """Line cursor that skips blanks and # comments, tracking 1-based position."""

    def __init__(self, text):
        self.raw = text.splitlines()
        self.pos = 0

    def next(self, what):
        while self.pos < len(self.raw):
            self.pos += 1
            stripped = self.raw[self.pos - 1].strip()
            if stripped and not stripped.startswith("#"):
                return stripped, self.pos
        raise WeightsFileError(f"unexpected end of file, expected {what}",
                               len(self.raw) or 1)

    def done(self):
        while self.pos < len(self.raw):
            self.pos += 1
            stripped = self.raw[self.pos - 1].strip()
            if stripped and not stripped.startswith("#"):
                raise WeightsFileError(f"unexpected content {stripped!r}", self.pos)


def _expect_header(lines, name):
    text, ln = lines.next(f"'{name}:'")
    if text != f"{name}:":
        raise WeightsFileError(f"expected '{name}:', got {text!r}", ln)


def _number_row(lines, count, what):
    text, ln = lines.next(what)
    parts = text.split()
    if len(parts) != count:
        raise WeightsFileError(
            f"{what}: expected {count} numbers, got {len(parts)}", ln)
    try:
        return [float(p) for p in parts], ln
    except ValueError:
        raise WeightsFileError(f"{what}: non-numeric value", ln)


def load_weights(path) -> MlpWeights:
    """Parse a weights file; any inconsistency raises with the line number."""
    text = Path(path).read_text()
    lines = _Lines(text)

    head, ln = lines.next("'dims:'")
    if not head.startswith("dims:"):
        raise WeightsFileError(f"expected 'dims:', got {head!r}", ln)
    dims = _parse_bracket_list(head[len("dims:"):], ln, int)
    if len(dims) < 2:
        raise WeightsFileError("dims needs at least two entries", ln)
    for d in dims:
        if d < 1 or d > MAX_LAYER_WIDTH:
            raise WeightsFileError(
                f"layer width {d} outside [1, {MAX_LAYER_WIDTH}]", ln)

    act, ln = lines.next("'activation:'")
    if not act.startswith("activation:"):
        raise WeightsFileError(f"expected 'activation:', got {act!r}", ln)
    name = act[len("activation:"):].strip()
    if name != "tanh":
        raise WeightsFileError(f"unsupported activation {name!r}", ln)

    weights, biases = [], []
    for l in range(1, len(dims)):
        _expect_header(lines, f"W_{l}")
        rows = []
        for _ in range(dims[l]):
            row, _ = _number_row(lines, dims[l - 1], f"W_{l} row")
            rows.append(row)
        weights.append(np.array(rows))
        _expect_header(lines, f"b_{l}")
        bias, _ = _number_row(lines, dims[l], f"b_{l}")
        biases.append(np.array(bias))

    tail, ln = lines.next("'output_scale:'")
    if not tail.startswith("output_scale:"):
        raise WeightsFileError(f"expected 'output_scale:', got {tail!r}", ln)
    scale = _parse_bracket_list(tail[len("output_scale:"):], ln, float)
    if len(scale) != dims[-1]:
        raise WeightsFileError(
            f"output_scale must have {dims[-1]} entries, got {len(scale)}", ln)
    lines.done()
    return MlpWeights(dims=tuple(dims), weights=tuple(weights),
                      biases=tuple(biases), output_scale=np.array(scale))


def save_weights(w: MlpWeights, path) -> None:
    out = [f"dims: [{', '.join(str(d) for d in w.dims)}]", "activation: tanh"]
    for l, (mat, bias) in enumerate(zip(w.weights, w.biases), start=1):
        out.append(f"W_{l}:")
        for row in mat:
            out.append(" ".join(repr(float(v)) for v in row))
        out.append(f"b_{l}:")
        out.append(" ".join(repr(float(v)) for v in bias))
    out.append(f"output_scale: [{', '.join(repr(float(v)) for v in w.output_scale)}]")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class ObservationConfig:
    frame: ObservationFrame = ObservationFrame.HILL
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    done: np.ndarray | None = None


OBSERVATION_LENGTH = 10


def build_observation(state: FullState, config: ObservationConfig,
                      params: VehicleParams) -> np.ndarray:
    """Length-10 vector: [position block (3), velocity block (3),
    sun angle (1), next-target unit vector (3)].

    Hill frame: r in km, v in m/s.  Spherical frame: (range km, azimuth,
    elevation) and velocity resolved along the local (radial, azimuthal,
    elevation) basis.  The target slot is zero when nothing remains.
    """
    points = np.ascontiguousarray(config.points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ConfigError("points must be (P, 3)")
    done = config.done
    if done is None:
        done = np.zeros(points.shape[0], np.bool_)
    done = np.ascontiguousarray(done, dtype=np.bool_)
    if done.shape != (points.shape[0],):
        raise ConfigError("done mask must match points")
    out = np.empty(OBSERVATION_LENGTH)
    _k.build_observation_into(state.to_vector(), state.time, params.to_vector(),
                              _FRAME_TO_KERNEL[config.frame], points, done, out)
    return out


def spherical_to_hill(obs: np.ndarray):
    """Invert the spherical observation blocks back to (r, v) in meters.

    Defined wherever range > 0; the inverse of the frame used by
    build_observation's spherical mode.
    """
    rho = obs[0] * 1000.0
    az, el = obs[1], obs[2]
    er = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    ea = np.array([-np.sin(az), np.cos(az), 0.0])
    ee = np.cross(ea, er)
    r = rho * er
    v = obs[3] * er + obs[4] * ea + obs[5] * ee
    return r, v


# ---------------------------------------------------------------------------
# scripted controllers


def _check_gains(gains):
    g = np.asarray(gains, float)
    if g.shape != (5,) or np.any(g <= 0):
        raise PolicyError("gains must be five positive scalars")
    return g


def scripted_dock(state: FullState, gains, params: VehicleParams) -> ControlCommand:
    """PD toward the origin; reference speed capped inside the speed
    envelope so the filter rarely needs to intervene."""
    g = _check_gains(gains)
    out = np.empty(6)
    _k.dock_command(state.to_vector(), g, params.to_vector(), out)
    return ControlCommand.from_vector(out)


def scripted_inspect(state: FullState, points, done, gains,
                     params: VehicleParams,
                     standoff: float = DEFAULT_STANDOFF) -> ControlCommand:
    """PD toward the standoff above the best remaining inspection point.

    Prefers illuminated points; all-done means zero command.
    """
    g = _check_gains(gains)
    points = np.ascontiguousarray(points, dtype=np.float64)
    done = np.ascontiguousarray(done, dtype=np.bool_)
    out = np.empty(6)
    _k.inspect_command(state.to_vector(), state.time, params.to_vector(),
                       points, done, g, standoff, out)
    return ControlCommand.from_vector(out)


def inspect_target_index(state: FullState, points, done,
                         params: VehicleParams) -> int:
    """Index of the point the inspect controller is currently chasing,
    -1 when every point is done."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    done = np.ascontiguousarray(done, dtype=np.bool_)
    return int(_k.pick_inspect_target(state.to_vector(), state.time,
                                      params.to_vector(), points, done))


# ---------------------------------------------------------------------------
# neural inference


def default_action_table(params: VehicleParams) -> np.ndarray:
    """27 rows: thrust components over {-F_max, 0, +F_max}^3, zero torque.

    Row index in base 3: digit 0 -> -F_max, 1 -> 0, 2 -> +F_max, with x
    the most significant digit.  The center row (index 13) is all zero.
    """
    levels = np.array([-params.f_max, 0.0, params.f_max])
    table = np.zeros((27, 6))
    for i in range(27):
        table[i, 0] = levels[i // 9]
        table[i, 1] = levels[(i // 3) % 3]
        table[i, 2] = levels[i % 3]
    return table


def map_discrete_action(index: int, table: np.ndarray) -> ControlCommand:
    if not 0 <= index < table.shape[0]:
        raise PolicyError(f"action index {index} outside table of {table.shape[0]}")
    return ControlCommand.from_vector(table[index])


def mlp_infer(weights: MlpWeights, obs: np.ndarray,
              params: VehicleParams | None = None) -> ControlCommand:
    """Pure forward pass to a continuous command.

    Output dimension 3 means thrust only; 6 adds torque.  Components are
    multiplied by output_scale and, when params is given, clipped to the
    command box.
    """
    obs = np.asarray(obs, float)
    if obs.shape != (weights.dims[0],):
        raise PolicyError(
            f"observation length {obs.shape} does not match input dim "
            f"{weights.dims[0]}")
    if weights.dims[-1] not in (3, 6):
        raise PolicyError("continuous inference needs 3 or 6 outputs, "
                          f"net has {weights.dims[-1]}")
    a = obs
    for l, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        a = w @ a + b
        if l < len(weights.weights) - 1:
            a = np.tanh(a)
    u = np.zeros(6)
    u[:a.shape[0]] = a * weights.output_scale
    cmd = ControlCommand.from_vector(u)
    return cmd.clipped(params) if params is not None else cmd


def reference_weights_path() -> Path:
    """The small net shipped with the package for golden-value checks."""
    return Path(__file__).parent / "data" / "reference_policy.txt"


# ---------------------------------------------------------------------------
# policy objects


class Policy:
    """Stateless-or-seeded u_des source; one instance per deputy."""

    kind: PolicyKind

    def command(self, state: FullState, points=None, done=None) -> ControlCommand:
        raise NotImplementedError


class DockPolicy(Policy):
    def __init__(self, gains, params: VehicleParams):
        self.kind = PolicyKind.SCRIPTED_DOCK
        self.gains = _check_gains(gains)
        self.params = params

    def command(self, state, points=None, done=None):
        return scripted_dock(state, self.gains, self.params)


class InspectPolicy(Policy):
    def __init__(self, gains, params: VehicleParams,
                 standoff: float = DEFAULT_STANDOFF):
        self.kind = PolicyKind.SCRIPTED_INSPECT
        self.gains = _check_gains(gains)
        self.params = params
        self.standoff = standoff

    def command(self, state, points=None, done=None):
        if points is None or points.shape[0] == 0:
            return ControlCommand()
        if done is None:
            done = np.zeros(points.shape[0], np.bool_)
        return scripted_inspect(state, points, done, self.gains, self.params,
                                self.standoff)


class NeuralPolicy(Policy):
    def __init__(self, weights: MlpWeights, params: VehicleParams,
                 action_mode: ActionMode = ActionMode.CONTINUOUS,
                 observation_frame: ObservationFrame = ObservationFrame.HILL):
        self.kind = PolicyKind.NEURAL_POLICY
        self.weights = weights
        self.params = params
        self.action_mode = action_mode
        self.observation_frame = observation_frame
        self.table = (default_action_table(params)
                      if action_mode is ActionMode.DISCRETE else np.empty((0, 6)))
        if action_mode is ActionMode.DISCRETE \
                and weights.dims[-1] != self.table.shape[0]:
            raise PolicyError(
                f"discrete net needs {self.table.shape[0]} logits, "
                f"has {weights.dims[-1]}")
        if action_mode is ActionMode.CONTINUOUS and weights.dims[-1] not in (3, 6):
            raise PolicyError("continuous net needs 3 or 6 outputs")
        if weights.dims[0] != OBSERVATION_LENGTH:
            raise PolicyError(
                f"net input dim {weights.dims[0]} != observation length "
                f"{OBSERVATION_LENGTH}")
        self._dims, self._wflat, self._bflat, self._scale = weights.packed()
        self._buf_a = np.empty(MAX_LAYER_WIDTH)
        self._buf_b = np.empty(MAX_LAYER_WIDTH)

    def command(self, state, points=None, done=None):
        if points is None:
            points = np.empty((0, 3))
        if done is None:
            done = np.zeros(points.shape[0], np.bool_)
        obs = np.empty(OBSERVATION_LENGTH)
        _k.build_observation_into(state.to_vector(), state.time,
                                  self.params.to_vector(),
                                  _FRAME_TO_KERNEL[self.observation_frame],
                                  np.ascontiguousarray(points, dtype=np.float64),
                                  np.ascontiguousarray(done, dtype=np.bool_), obs)
        out = np.empty(6)
        _k.mlp_forward(obs, self._dims, self._wflat, self._bflat, self._scale,
                       self.table, self.params.f_max, self.params.tau_max,
                       out, self._buf_a, self._buf_b)
        return ControlCommand.from_vector(out)


class RandomPolicy(Policy):
    """Seeded uniform box commands; the same seed replays the same stream.

    Commands are read from a lazily grown pregenerated table so that a
    prefix of the stream never depends on how much of it was consumed.
    """

    def __init__(self, seed: int, params: VehicleParams):
        self.kind = PolicyKind.RANDOM_POLICY
        self.seed = int(seed)
        self.params = params
        self._table = np.empty((0, 6))
        self._idx = 0

    def _ensure(self, n):
        if n <= self._table.shape[0]:
            return
        size = max(1024, 1 << int(np.ceil(np.log2(n))))
        raw = np.random.default_rng(self.seed).uniform(-1.0, 1.0, (size, 6))
        box = np.concatenate([np.full(3, self.params.f_max),
                              np.full(3, self.params.tau_max)])
        self._table = raw * box

    def stream(self, n: int) -> np.ndarray:
        """First n commands of the stream, shape (n, 6)."""
        self._ensure(n)
        return self._table[:n].copy()

    def peek(self, n: int) -> np.ndarray:
        """The next n commands without consuming them (look-ahead)."""
        self._ensure(self._idx + n)
        return self._table[self._idx:self._idx + n].copy()

    def command(self, state, points=None, done=None):
        self._ensure(self._idx + 1)
        u = self._table[self._idx]
        self._idx += 1
        return ControlCommand.from_vector(u)


def make_policy(spec: PolicySpec, params: VehicleParams) -> Policy:
    if spec.kind is PolicyKind.SCRIPTED_DOCK:
        return DockPolicy(spec.gains, params)
    if spec.kind is PolicyKind.SCRIPTED_INSPECT:
        return InspectPolicy(spec.gains, params, spec.standoff)
    if spec.kind is PolicyKind.NEURAL_POLICY:
        return NeuralPolicy(spec.weights, params, spec.action_mode,
                            spec.observation_frame)
    if spec.kind is PolicyKind.RANDOM_POLICY:
        return RandomPolicy(spec.seed, params)
    raise PolicyError(f"unknown policy kind {spec.kind!r}")
