"""Session service: live episodes over a socket, commands at boundaries.

Wire protocol
-------------
Framing: 4-byte big-endian payload length, then that many bytes of
UTF-8 JSON.  Every message, both directions, is one envelope:

    {"type": ..., "session": ..., "seq": ..., "payload": {...}}

Client requests: "create_session" (payload {"scenario": document} or
{"scenario_path": path}), "list_sessions", "command" (payload is one
operator command, see below), "subscribe".  Each request is answered by
exactly one reply carrying the request's seq: "session_created",
"sessions", "ack", "rejected", or "error".  Server pushes ("snapshot",
"frame", "gap", "finished") number their seq per subscription, so
request and push sequence spaces are independent; the disjoint type
sets keep them unambiguous.

Operator commands (payload "kind" plus fields):

    SetConstraint    {"id", "enabled"?, "priority"?, "params"?} or
                     {"ranking": {constraint id: priority, ...}}
    SelectPolicy     {"deputy": index, "policy": policy document}
    Override         {"deputy": index, "script": [[t, [6 floats]], ...]}
    Pause | Resume   {}
    Step             {"n": cycles}
    RequestSnapshot  {}
    Preview          {"deputy": index, "cycles": n}   (read-only)

Commands queue with the session driver and apply at the next control
cycle boundary; the ack's "applies_at_cycle" names that cycle.  A
rejected command leaves the session untouched.  Catalog edits are
validated against the full staged catalog first, so a priority swap
that would duplicate a rank is refused outright.

Each session runs on its own driver thread which owns every piece of
mutable simulation state; sockets only pass messages to and from it.
Streamed frames reuse the telemetry file serializer, so a frame payload
is character-identical to the line the session file gets, and a session
that received no commands writes a file byte-identical to a direct
library run of the same scenario.  Subscribers that fall behind lose
oldest frames first and receive a "gap" push counting the drops; the
simulation never waits for a socket.
"""

from __future__ import annotations

import collections
import json
import queue
import socket
import struct
import threading
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _kernels as _k
from .constraints import (
    ConstraintId,
    spec_to_dict,
    validate_catalog,
)
from .dynamics import ControlCommand, FullState, vehicle_to_dict
from .errors import CatalogError, ConfigError, ProtocolError, ScenarioError
from .mission import (
    ABORT_NAMES,
    StepwiseDeputy,
    TaskKind,
    _DeputyRun,
    _flips,
    finalize_episode,
    generate_points,
    metrics_to_dict,
    points_array,
)
from .policies import PolicyKind, RandomPolicy, make_policy
from .scenario_io import load_scenario, policy_from_dict, scenario_from_dict
from .telemetry import frame_dict, write_episode

MAX_MESSAGE = 8 * 1024 * 1024
SUBSCRIBER_QUEUE = 256
PREVIEW_CAP = 500

CONFIGURED = "Configured"
RUNNING = "Running"
PAUSED = "Paused"
FINISHED = "Finished"
ABORTED = "Aborted"

REPLY_TYPES = frozenset(
    {"session_created", "sessions", "ack", "rejected", "error"})
PUSH_TYPES = frozenset({"snapshot", "frame", "gap", "finished"})


def _dump(obj) -> bytes:
    return json.dumps(obj, allow_nan=False,
                      separators=(",", ":")).encode("utf-8")


def encode_message(obj: dict) -> bytes:
    body = _dump(obj)
    if len(body) > MAX_MESSAGE:
        raise ProtocolError(f"message of {len(body)} bytes exceeds the "
                            f"{MAX_MESSAGE} byte cap")
    return struct.pack(">I", len(body)) + body


def _read_exact(sock: socket.socket, n: int):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_message(sock: socket.socket):
    """One framed message off the socket; None on clean end of stream."""
    head = _read_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head)
    if length > MAX_MESSAGE:
        raise ProtocolError(f"declared length {length} exceeds the cap")
    body = _read_exact(sock, length)
    if body is None:
        raise ProtocolError("stream ended inside a message")
    return json.loads(body.decode("utf-8"))


class _Connection:
    """One accepted socket; sends are serialized so pushes stay whole."""

    def __init__(self, sock):
        self.sock = sock
        self.lock = threading.Lock()
        self.alive = True

    def send(self, obj) -> bool:
        try:
            data = encode_message(obj)
            with self.lock:
                self.sock.sendall(data)
            return True
        except (OSError, ProtocolError):
            self.alive = False
            return False

    def close(self):
        self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass


class _Subscriber:
    """Bounded fan-out queue for one subscription.

    A slow consumer loses the oldest queued messages, and a "gap" push
    carrying the drop count goes out before the next delivered one.
    The driver thread never blocks here.
    """

    def __init__(self, conn: _Connection, session_id: str,
                 limit=SUBSCRIBER_QUEUE):
        self.conn = conn
        self.session = session_id
        self.limit = limit
        self.items = collections.deque()
        self.dropped = 0
        self.seq = 0
        self.closed = False
        self.cond = threading.Condition()
        self.thread = threading.Thread(target=self._pump, daemon=True,
                                       name=f"sub-{session_id}")
        self.thread.start()

    def push(self, type_: str, payload: dict):
        with self.cond:
            if self.closed:
                return
            if len(self.items) >= self.limit:
                self.items.popleft()
                self.dropped += 1
            self.items.append((type_, payload))
            self.cond.notify()

    def close(self):
        with self.cond:
            self.closed = True
            self.cond.notify()

    def _pump(self):
        while True:
            with self.cond:
                while not self.items and not self.closed:
                    self.cond.wait()
                if self.closed and not self.items:
                    return
                gap = self.dropped
                self.dropped = 0
                type_, payload = self.items.popleft()
            if gap:
                self.seq += 1
                if not self.conn.send({"type": "gap", "session": self.session,
                                       "seq": self.seq,
                                       "payload": {"dropped": gap}}):
                    self.close()
                    return
            self.seq += 1
            if not self.conn.send({"type": type_, "session": self.session,
                                   "seq": self.seq, "payload": payload}):
                self.close()
                return


class SessionDriver(threading.Thread):
    """One thread owning all mutable state of one session.

    Sockets talk to it through an inbox of (kind, data, reply) items;
    between control cycles it drains the inbox, so every command lands
    exactly on a cycle boundary and no frame ever reflects half of one.
    """

    def __init__(self, session_id: str, scenario, telemetry_path=None):
        super().__init__(daemon=True, name=f"session-{session_id}")
        self.id = session_id
        self.scenario = scenario
        self.telemetry_path = (
            None if telemetry_path is None else Path(telemetry_path))
        self.inbox = queue.Queue()
        self.state = CONFIGURED
        self.cycle = 0
        self.step_budget = 0
        self.subscribers = []
        self.catalog = list(scenario.catalog)
        self.metrics = None
        self.aborted = None
        self.extra_events = {}
        self._completed = False
        self._stop = threading.Event()

        inspect = scenario.task.kind is TaskKind.INSPECT
        self.points = generate_points(scenario.task.point_count) \
            if inspect else []
        self.normals = points_array(self.points)
        ncycles = scenario.cycles
        self.runs = []
        self.walkers = []
        self.policy_kinds = []
        self._override = []
        for i, dep in enumerate(scenario.deputies):
            spec = dep.policy
            if spec.kind is PolicyKind.RANDOM_POLICY:
                # same seed folding as the library runner, so a headless
                # session reproduces run_episode exactly
                spec = replace(spec,
                               seed=spec.seed + 1000003 * scenario.seed + i)
            policy = make_policy(spec, scenario.vehicle)
            run = _DeputyRun(ncycles, 1)
            run.insp_done = np.zeros(len(self.points), np.bool_)
            run.insp_time = np.full(len(self.points), -1.0)
            self.runs.append(run)
            self.walkers.append(
                StepwiseDeputy(scenario, dep, policy, self.normals, run, 1))
            self.policy_kinds.append(dep.policy.kind.value)
            self._override.append(collections.deque())

    # -- public interface for the server threads --------------------------

    def submit(self, kind: str, data, reply) -> None:
        self.inbox.put((kind, data, reply))

    def stop(self) -> None:
        self._stop.set()
        self.inbox.put(("noop", None, None))

    def describe(self) -> dict:
        # read by server threads; single attribute reads are atomic and
        # a slightly stale cycle count is fine for a listing
        return {
            "session": self.id,
            "name": self.scenario.name,
            "state": self.state,
            "cycle": self.cycle,
            "cycles_total": self.scenario.cycles,
            "task": self.scenario.task.kind.value,
        }

    # -- driver loop -------------------------------------------------------

    def run(self):
        while not self._stop.is_set():
            if self.state in (FINISHED, ABORTED):
                self._serve_terminal()
                return
            live = self.state == RUNNING or (
                self.step_budget > 0 and self.state == PAUSED)
            if not live:
                try:
                    item = self.inbox.get(timeout=0.2)
                except queue.Empty:
                    continue
                self._handle(item)
                continue
            while True:
                try:
                    item = self.inbox.get_nowait()
                except queue.Empty:
                    break
                self._handle(item)
            if self.cycle >= self.scenario.cycles:
                # degenerate scenario with zero cycles to run
                self._finish()
            elif self.state == RUNNING:
                self._cycle()
            elif self.step_budget > 0 and self.state == PAUSED:
                self._cycle()
                self.step_budget -= 1

    def _serve_terminal(self):
        """Keep answering snapshots and subscriptions after the end."""
        while not self._stop.is_set():
            try:
                kind, data, reply = self.inbox.get(timeout=0.5)
            except queue.Empty:
                continue
            if kind == "subscribe":
                data.push("snapshot", self._snapshot())
                data.push("finished", self._finished_payload())
                if reply:
                    reply("ack", {"kind": "Subscribe",
                                  "session": self.id})
            elif kind == "command" and data.get("kind") == "RequestSnapshot":
                reply("ack", {"kind": "RequestSnapshot",
                              "snapshot": self._snapshot()})
            elif kind == "command":
                if reply:
                    reply("rejected", {"kind": data.get("kind"),
                                       "reason": f"session is {self.state}"})

    def _cycle(self):
        c = self.cycle
        abort = _k.ABORT_NONE
        for i, walker in enumerate(self.walkers):
            t = walker.t0 + c * walker.ctrl_dt
            vec = None
            q = self._override[i]
            while q and q[0][0] <= t:
                vec = q.popleft()[1]
            scripted = None if vec is None else ControlCommand.from_vector(vec)
            code = walker.advance(c, scripted=scripted,
                                  override=scripted is not None)
            if code != _k.ABORT_NONE and abort == _k.ABORT_NONE:
                abort = code
        self.cycle = c + 1

        events = list(self.extra_events.get(c, ()))
        inspected = None
        if self.points:
            done = self.runs[0].insp_done.copy()
            for run in self.runs[1:]:
                done |= run.insp_done
            inspected = int(np.count_nonzero(done))
        if not self._completed:
            tval = self._completion_now(inspected)
            if tval is not None:
                self._completed = True
                events.append({"kind": "TaskComplete", "t": tval})
        if abort != _k.ABORT_NONE:
            events.append({"kind": "Abort", "code": ABORT_NAMES[abort]})
        frame = frame_dict(self.runs, c, inspected=inspected,
                           events=events or None)
        self._broadcast("frame", frame)
        if abort != _k.ABORT_NONE or self.cycle >= self.scenario.cycles:
            self._finish()

    def _completion_now(self, inspected):
        # mirrors the end-of-episode reduction: first full union coverage
        # for inspection, earliest deputy arrival for docking
        if self.points:
            if inspected == len(self.points):
                times = self.runs[0].insp_time.copy()
                for run in self.runs[1:]:
                    hit = run.insp_time >= 0.0
                    better = hit & ((times < 0.0) | (run.insp_time < times))
                    times[better] = run.insp_time[better]
                return float(times.max())
            return None
        if self.scenario.task.kind is TaskKind.DOCK:
            docked = [r.completion for r in self.runs if r.completion >= 0.0]
            if docked:
                return min(docked)
        return None

    def _finish(self):
        for walker in self.walkers:
            walker.finish()
        metrics, flip_times, aborted, _ = finalize_episode(
            self.scenario, self.runs, self.points, 1)
        self.metrics = metrics
        self.aborted = aborted
        self.state = ABORTED if aborted else FINISHED
        if self.telemetry_path is not None:
            write_episode(self.telemetry_path, self.scenario, self.runs,
                          aborted, metrics, flip_times,
                          extra_events=self.extra_events)
        self._broadcast("finished", self._finished_payload())

    def _finished_payload(self):
        return {
            "state": self.state,
            "aborted": self.aborted,
            "metrics": None if self.metrics is None
            else metrics_to_dict(self.metrics),
            "telemetry_path": None if self.telemetry_path is None
            else str(self.telemetry_path),
        }

    def _broadcast(self, type_: str, payload: dict):
        dead = [s for s in self.subscribers if s.closed or not s.conn.alive]
        for sub in dead:
            sub.close()
            self.subscribers.remove(sub)
        for sub in self.subscribers:
            sub.push(type_, payload)

    # -- command handling (driver thread only) -----------------------------

    def _handle(self, item):
        kind, data, reply = item
        if kind == "noop":
            return
        if kind == "subscribe":
            data.push("snapshot", self._snapshot())
            self.subscribers.append(data)
            if reply:
                reply("ack", {"kind": "Subscribe", "session": self.id})
            return
        if kind != "command":
            return
        try:
            name = data.get("kind")
            handler = self._COMMANDS.get(name)
            if handler is None:
                reply("rejected", {"kind": name,
                                   "reason": f"unknown command kind {name!r}"})
                return
            ok, extra = handler(self, data)
        except (KeyError, TypeError, ValueError) as bad:
            reply("rejected", {"kind": data.get("kind"),
                               "reason": f"malformed command: {bad}"})
            return
        if ok:
            body = {"kind": name, "applies_at_cycle": self.cycle}
            body.update(extra)
            reply("ack", body)
        else:
            reply("rejected", {"kind": name, "reason": extra})

    def _cmd_pause(self, p):
        if self.state != RUNNING:
            return False, f"cannot pause in state {self.state}"
        self.state = PAUSED
        return True, {"state": self.state}

    def _cmd_resume(self, p):
        if self.state not in (CONFIGURED, PAUSED):
            return False, f"cannot resume in state {self.state}"
        self.state = RUNNING
        return True, {"state": self.state}

    def _cmd_step(self, p):
        if self.state not in (CONFIGURED, PAUSED):
            return False, f"cannot step in state {self.state}"
        n = int(p.get("n", 1))
        if n < 1:
            return False, "n: must be a positive cycle count"
        n = min(n, self.scenario.cycles - self.cycle)
        self.state = PAUSED
        self.step_budget += n
        return True, {"cycles": n, "state": self.state}

    def _cmd_snapshot(self, p):
        return True, {"snapshot": self._snapshot()}

    def _cmd_set_constraint(self, p):
        staged = list(self.catalog)

        def locate(cid):
            for idx, spec in enumerate(staged):
                if spec.id is cid:
                    return idx
            raise CatalogError(f"{cid.wire_name} is not in the catalog")

        try:
            if "ranking" in p:
                ranking = p["ranking"]
                if not isinstance(ranking, dict) or not ranking:
                    return False, "ranking: expected a non-empty mapping"
                for name, rank in ranking.items():
                    idx = locate(ConstraintId.from_wire(name))
                    staged[idx] = staged[idx].with_updates(priority=int(rank))
            else:
                cid = ConstraintId.from_wire(p["id"])
                idx = locate(cid)
                staged[idx] = staged[idx].with_updates(
                    enabled=p.get("enabled"),
                    priority=p.get("priority"),
                    params=p.get("params"))
            validate_catalog(staged)
        except CatalogError as bad:
            return False, str(bad)
        self.catalog = staged
        for walker in self.walkers:
            walker.pipe.replace_catalog(staged)
        event = {"kind": "CatalogChange",
                 "catalog": [spec_to_dict(s) for s in staged]}
        self.extra_events.setdefault(self.cycle, []).append(event)
        return True, {"catalog": event["catalog"]}

    def _cmd_select_policy(self, p):
        d = int(p["deputy"])
        if not 0 <= d < len(self.walkers):
            return False, f"deputy: index {d} out of range"
        try:
            spec = policy_from_dict(p["policy"], "policy")
        except ScenarioError as bad:
            return False, str(bad)
        if spec.kind is PolicyKind.RANDOM_POLICY:
            spec = replace(
                spec, seed=spec.seed + 1000003 * self.scenario.seed + d)
        self.walkers[d].policy = make_policy(spec, self.scenario.vehicle)
        self.policy_kinds[d] = spec.kind.value
        event = {"kind": "PolicyChange", "deputy": d,
                 "policy": spec.kind.value}
        self.extra_events.setdefault(self.cycle, []).append(event)
        return True, {"deputy": d, "policy": spec.kind.value}

    def _cmd_override(self, p):
        d = int(p["deputy"])
        if not 0 <= d < len(self.walkers):
            return False, f"deputy: index {d} out of range"
        script = p["script"]
        if not isinstance(script, list) or not script:
            return False, "script: expected a non-empty list of [t, command]"
        entries = []
        last_t = -np.inf
        for k, entry in enumerate(script):
            t, cmd = entry
            t = float(t)
            if t < last_t:
                return False, f"script[{k}]: times must be non-decreasing"
            last_t = t
            vec = np.asarray(cmd, float)
            if vec.shape != (6,) or not np.all(np.isfinite(vec)):
                return False, f"script[{k}]: command must be 6 finite floats"
            entries.append((t, vec))
        # a fresh script replaces whatever of the previous one is unspent
        self._override[d] = collections.deque(entries)
        return True, {"deputy": d, "entries": len(entries)}

    def _cmd_preview(self, p):
        d = int(p.get("deputy", 0))
        if not 0 <= d < len(self.walkers):
            return False, f"deputy: index {d} out of range"
        cycles = min(PREVIEW_CAP, max(1, int(p.get("cycles", 50))))
        walker = self.walkers[d]
        policy = walker.policy
        s = walker.s.copy()
        done = walker.done.copy()
        peeked = policy.peek(cycles) \
            if isinstance(policy, RandomPolicy) else None
        ts, positions, modes = [], [], []
        for k in range(cycles):
            t = walker.t0 + (self.cycle + k) * walker.ctrl_dt
            state = FullState.from_vector(s, time=t)
            if peeked is not None:
                u = ControlCommand.from_vector(peeked[k])
            else:
                u = policy.command(state, points=self.normals, done=done)
            decision, nxt = walker.pipe.step(state, u)
            ts.append(t)
            positions.append([float(s[0]), float(s[1]), float(s[2])])
            modes.append(decision.mode.value)
            if nxt is None:
                break
            if self.points:
                sun = (np.cos(walker.n * t), -np.sin(walker.n * t), 0.0)
                for pt in _flips(self.normals, done, s[:3], sun,
                                 walker.chief_radius):
                    done[pt] = True
            s = nxt.to_vector()
        return True, {"deputy": d, "t": ts, "positions": positions,
                      "modes": modes}

    _COMMANDS = {
        "Pause": _cmd_pause,
        "Resume": _cmd_resume,
        "Step": _cmd_step,
        "RequestSnapshot": _cmd_snapshot,
        "SetConstraint": _cmd_set_constraint,
        "SelectPolicy": _cmd_select_policy,
        "Override": _cmd_override,
        "Preview": _cmd_preview,
    }

    def _snapshot(self) -> dict:
        sc = self.scenario
        t0 = sc.deputies[0].state.time
        deputies = []
        for i, walker in enumerate(self.walkers):
            deputies.append({
                "state": [float(v) for v in walker.s],
                "policy": self.policy_kinds[i],
                "fuel_used": float(walker.s[_k.IFUEL]),
            })
        inspected = None
        points = None
        if self.points:
            done = self.runs[0].insp_done.copy()
            for run in self.runs[1:]:
                done |= run.insp_done
            inspected = int(np.count_nonzero(done))
            points = [{"normal": [float(v) for v in self.normals[k]],
                       "inspected": bool(done[k])}
                      for k in range(len(self.points))]
        return {
            "session": self.id,
            "name": sc.name,
            "state": self.state,
            "cycle": self.cycle,
            "cycles_total": sc.cycles,
            "t": t0 + self.cycle * sc.control_dt,
            "control_dt": sc.control_dt,
            "task": sc.task.kind.value,
            "catalog": [spec_to_dict(s) for s in self.catalog],
            "vehicle": vehicle_to_dict(sc.vehicle),
            "deputies": deputies,
            "inspected": inspected,
            "total_points": len(self.points) if self.points else None,
            "points": points,
            "metrics": None if self.metrics is None
            else metrics_to_dict(self.metrics),
            "aborted": self.aborted,
            "telemetry_path": None if self.telemetry_path is None
            else str(self.telemetry_path),
        }


class GatewayServer:
    """Socket front end; sessions and their drivers live behind it."""

    def __init__(self, port=0, host="127.0.0.1", log_dir=None):
        self.host = host
        self.log_dir = None if log_dir is None else Path(log_dir)
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        self._sock = socket.create_server((host, port))
        self.port = self._sock.getsockname()[1]
        self._sessions = {}
        self._order = []
        self._next_id = 1
        self._lock = threading.Lock()
        self._conns = []
        self._accepting = False
        self._thread = None

    def start(self):
        self._accepting = True
        self._thread = threading.Thread(target=self._accept_loop,
                                        daemon=True, name="gateway-accept")
        self._thread.start()
        return self

    def serve_forever(self):
        self.start()
        try:
            self._thread.join()
        except KeyboardInterrupt:
            self.shutdown()

    def shutdown(self):
        self._accepting = False
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            drivers = list(self._sessions.values())
            conns = list(self._conns)
        for driver in drivers:
            driver.stop()
        for conn in conns:
            conn.close()

    def _accept_loop(self):
        while self._accepting:
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            conn = _Connection(sock)
            with self._lock:
                self._conns.append(conn)
            threading.Thread(target=self._serve_client, args=(conn,),
                             daemon=True, name="gateway-client").start()

    def _serve_client(self, conn: _Connection):
        try:
            while True:
                try:
                    msg = read_message(conn.sock)
                except (json.JSONDecodeError, UnicodeDecodeError) as bad:
                    conn.send({"type": "error", "session": None, "seq": 0,
                               "payload": {"reason": f"invalid JSON: {bad}"}})
                    continue
                if msg is None:
                    return
                self._dispatch(conn, msg)
        except (OSError, ProtocolError):
            return
        finally:
            conn.close()
            with self._lock:
                if conn in self._conns:
                    self._conns.remove(conn)

    def _dispatch(self, conn: _Connection, msg):
        if not isinstance(msg, dict):
            conn.send({"type": "error", "session": None, "seq": 0,
                       "payload": {"reason": "envelope must be an object"}})
            return
        seq = msg.get("seq", 0)
        sid = msg.get("session")
        type_ = msg.get("type")
        payload = msg.get("payload") or {}

        def error(reason):
            conn.send({"type": "error", "session": sid, "seq": seq,
                       "payload": {"reason": reason}})

        if not isinstance(seq, int) or not isinstance(payload, dict):
            return error("seq must be an integer and payload an object")

        if type_ == "create_session":
            self._create_session(conn, seq, payload, error)
        elif type_ == "list_sessions":
            with self._lock:
                rows = [self._sessions[s].describe() for s in self._order]
            conn.send({"type": "sessions", "session": None, "seq": seq,
                       "payload": {"sessions": rows}})
        elif type_ in ("command", "subscribe"):
            with self._lock:
                driver = self._sessions.get(sid)
            if driver is None:
                return error(f"unknown session {sid!r}")

            def reply(rtype, body):
                conn.send({"type": rtype, "session": sid, "seq": seq,
                           "payload": body})

            if type_ == "command":
                if not isinstance(payload.get("kind"), str):
                    return error("command payload needs a string kind")
                driver.submit("command", payload, reply)
            else:
                driver.submit("subscribe", _Subscriber(conn, sid), reply)
        else:
            error(f"unknown message type {type_!r}")

    def _create_session(self, conn, seq, payload, error):
        try:
            if "scenario" in payload:
                scenario = scenario_from_dict(payload["scenario"])
            elif "scenario_path" in payload:
                scenario = load_scenario(payload["scenario_path"])
            else:
                return error("payload needs scenario or scenario_path")
        except ScenarioError as bad:
            return error(f"scenario invalid: {bad}")
        with self._lock:
            sid = f"s{self._next_id}"
            self._next_id += 1
        path = None
        if self.log_dir is not None:
            path = self.log_dir / f"{sid}.jsonl"
        driver = SessionDriver(sid, scenario, telemetry_path=path)
        with self._lock:
            self._sessions[sid] = driver
            self._order.append(sid)
        driver.start()
        conn.send({"type": "session_created", "session": sid, "seq": seq,
                   "payload": {"session": sid, "state": driver.state,
                               "name": scenario.name,
                               "cycles_total": scenario.cycles,
                               "control_dt": scenario.control_dt,
                               "telemetry_path": None if path is None
                               else str(path)}})


class GatewayClient:
    """Small blocking client for tests and scripting.

    request() sends one envelope and returns the matching reply; stream
    pushes that arrive in between are buffered for next_push().
    """

    def __init__(self, port, host="127.0.0.1", timeout=30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._seq = 0
        self.pushes = collections.deque()

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def request(self, type_: str, payload=None, session=None) -> dict:
        self._seq += 1
        seq = self._seq
        self.sock.sendall(encode_message({
            "type": type_, "session": session, "seq": seq,
            "payload": payload or {}}))
        while True:
            msg = read_message(self.sock)
            if msg is None:
                raise ProtocolError("connection closed awaiting a reply")
            if msg.get("type") in REPLY_TYPES and msg.get("seq") == seq:
                return msg
            self.pushes.append(msg)

    def command(self, session: str, kind: str, **fields) -> dict:
        payload = {"kind": kind}
        payload.update(fields)
        return self.request("command", payload, session=session)

    def next_push(self, want=None) -> dict:
        """Next buffered or incoming push, optionally of one type."""
        while True:
            if self.pushes:
                msg = self.pushes.popleft()
            else:
                msg = read_message(self.sock)
                if msg is None:
                    raise ProtocolError("connection closed mid stream")
            if want is None or msg.get("type") == want:
                return msg


def run_service(port=0, host="127.0.0.1", log_dir=None) -> GatewayServer:
    """Bind and start serving; raises ConfigError when the port is busy."""
    try:
        server = GatewayServer(port=port, host=host, log_dir=log_dir)
    except OSError as bad:
        raise ConfigError(f"cannot bind {host}:{port}: {bad}") from None
    return server.start()
