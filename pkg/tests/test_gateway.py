"""Session gateway: wire protocol, command semantics, stream parity."""

import json
import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitguard.constraints import ConstraintId
from orbitguard.dynamics import FullState, VehicleParams
from orbitguard.errors import ProtocolError
from orbitguard.gateway import (
    MAX_MESSAGE,
    GatewayClient,
    _Subscriber,
    encode_message,
    read_message,
    run_service,
)
from orbitguard.mission import metrics_to_dict, run_episode
from orbitguard.policies import make_policy
from orbitguard.scenario_io import policy_from_dict, scenario_from_dict
from orbitguard.telemetry import replay_check


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    srv = run_service(port=0, log_dir=tmp_path_factory.mktemp("sessions"))
    yield srv
    srv.shutdown()


@pytest.fixture()
def client(server):
    c = GatewayClient(server.port)
    yield c
    c.close()


def dock_doc(name="wire-dock", seed=3, duration=120.0):
    # the approach crosses the separation sphere and is never passively
    # safe, so those two rows stay off, as in the bundled dock scenario
    return {
        "name": name, "seed": seed, "duration": duration,
        "filter_rate": 1.0,
        "catalog": {"SafeSeparation": {"enabled": False},
                    "PassiveSafety": {"enabled": False}},
        "task": {"kind": "Dock"},
        "deputies": [{"state": {"position": [200.0, 0.0, 0.0],
                                "velocity": [0.0, 0.0, 0.0]},
                      "policy": {"kind": "ScriptedDock"}}],
    }


def random_doc(name="wire-random", seed=11, duration=40.0):
    return {
        "name": name, "seed": seed, "duration": duration,
        "filter_rate": 1.0,
        "task": {"kind": "None"},
        "deputies": [{"state": {"position": [300.0, 0.0, 0.0],
                                "velocity": [0.0, 0.0, 0.0]},
                      "policy": {"kind": "RandomPolicy", "seed": 4}}],
    }


def create(client, doc):
    reply = client.request("create_session", {"scenario": doc})
    assert reply["type"] == "session_created", reply
    return reply["payload"]["session"]


def drive(client, sid, subscribe=True):
    """Resume a session and gather its stream until it finishes."""
    if subscribe:
        assert client.request("subscribe", session=sid)["type"] == "ack"
        snap = client.next_push("snapshot")["payload"]
        assert snap["state"] in ("Configured", "Paused", "Running")
    assert client.command(sid, "Resume")["type"] == "ack"
    frames = []
    while True:
        msg = client.next_push()
        if msg["session"] != sid:
            continue
        if msg["type"] == "frame":
            frames.append(msg["payload"])
        elif msg["type"] == "finished":
            return frames, msg["payload"]


def frame_bytes(frame) -> str:
    return json.dumps(frame, allow_nan=False, separators=(",", ":"))


def test_wire_run_matches_library(client, tmp_path):
    doc = dock_doc()
    sid = create(client, doc)
    frames, fin = drive(client, sid)

    lib_path = tmp_path / "lib.jsonl"
    result = run_episode(scenario_from_dict(doc), telemetry_path=lib_path)
    assert fin["state"] == "Finished"
    assert fin["aborted"] is None
    assert fin["metrics"] == metrics_to_dict(result.metrics)

    # command-free session file is byte-identical to the library's, and
    # every streamed frame payload is character-identical to its line
    with open(fin["telemetry_path"], "rb") as fh:
        wire = fh.read()
    assert wire == lib_path.read_bytes()
    lines = wire.decode().splitlines()[1:]
    assert len(lines) == len(frames) == result.cycles
    for frame, line in zip(frames, lines):
        assert frame_bytes(frame) == line


def test_concurrent_sessions_match_serial_runs(server, tmp_path):
    a = GatewayClient(server.port)
    b = GatewayClient(server.port)
    doc_a = random_doc("wire-a", seed=21)
    doc_b = random_doc("wire-b", seed=22)
    sid_a = create(a, doc_a)
    sid_b = create(b, doc_b)
    assert a.command(sid_a, "Resume")["type"] == "ack"
    assert b.command(sid_b, "Resume")["type"] == "ack"
    assert a.request("subscribe", session=sid_a)["type"] == "ack"
    assert b.request("subscribe", session=sid_b)["type"] == "ack"
    fin_a = a.next_push("finished")["payload"]
    fin_b = b.next_push("finished")["payload"]
    a.close()
    b.close()

    for doc, fin, tag in ((doc_a, fin_a, "a"), (doc_b, fin_b, "b")):
        path = tmp_path / f"{tag}.jsonl"
        run_episode(scenario_from_dict(doc), telemetry_path=path)
        got = open(fin["telemetry_path"], "rb").read()
        want = path.read_bytes()
        # interleaved execution must not leak between the sessions
        assert got == want
    assert fin_a["metrics"]["delta_v"] != fin_b["metrics"]["delta_v"]


def test_subscribe_midrun_gets_snapshot_then_monotone_frames(server, client):
    sid = create(client, random_doc("wire-mid", seed=5))
    assert client.request("subscribe", session=sid)["type"] == "ack"
    client.next_push("snapshot")
    assert client.command(sid, "Step", n=10)["type"] == "ack"
    for _ in range(10):
        client.next_push("frame")

    # a second console joins mid run and picks up at the paused cycle
    late = GatewayClient(server.port)
    assert late.request("subscribe", session=sid)["type"] == "ack"
    snap = late.next_push("snapshot")["payload"]
    assert snap["cycle"] == 10
    assert snap["state"] == "Paused"
    assert client.command(sid, "Step", n=5)["type"] == "ack"
    ts = [late.next_push("frame")["payload"]["t"] for _ in range(5)]
    assert ts == [10.0, 11.0, 12.0, 13.0, 14.0]
    late.close()


def test_set_constraint_disables_rows_at_boundary(client):
    sid = create(client, random_doc("wire-keepin", seed=7))
    assert client.request("subscribe", session=sid)["type"] == "ack"
    client.next_push("snapshot")
    assert client.command(sid, "Step", n=5)["type"] == "ack"
    before = [client.next_push("frame")["payload"] for _ in range(5)]

    reply = client.command(sid, "SetConstraint", id="KeepIn", enabled=False)
    assert reply["type"] == "ack"
    assert reply["payload"]["applies_at_cycle"] == 5

    frames, fin = drive(client, sid, subscribe=False)
    assert all(isinstance(f["deputies"][0]["margins"]["KeepIn"], float)
               for f in before)
    assert all(f["deputies"][0]["margins"]["KeepIn"] is None for f in frames)

    boundary = frames[0]
    kinds = [e["kind"] for e in boundary.get("events", ())]
    assert kinds == ["CatalogChange"]
    row = next(r for r in boundary["events"][0]["catalog"]
               if r["id"] == "KeepIn")
    assert row["enabled"] is False

    report = replay_check(fin["telemetry_path"])
    assert report.mismatches == 0
    assert report.frames == 40


def test_rejected_catalog_edits_leave_state_unchanged(client):
    sid = create(client, random_doc("wire-reject", seed=8))
    snap0 = client.command(sid, "RequestSnapshot")["payload"]["snapshot"]

    swap = client.command(sid, "SetConstraint", id="SafeSeparation",
                          priority=2)
    assert swap["type"] == "rejected"
    assert "unique" in swap["payload"]["reason"]

    unknown = client.command(sid, "SetConstraint", id="KeepOut", enabled=True)
    assert unknown["type"] == "rejected"
    assert "KeepOut" in unknown["payload"]["reason"]

    out_of_range = client.command(sid, "SetConstraint", id="Battery",
                                  params={"q_min": 5.0})
    assert out_of_range["type"] == "rejected"
    assert "q_min" in out_of_range["payload"]["reason"]

    stray = client.command(sid, "SetConstraint", id="Battery",
                           params={"charge": 0.5})
    assert stray["type"] == "rejected"
    assert "charge" in stray["payload"]["reason"]

    snap1 = client.command(sid, "RequestSnapshot")["payload"]["snapshot"]
    assert snap1["catalog"] == snap0["catalog"]
    assert snap1["cycle"] == 0


def test_ranking_update_applies_to_snapshot(client):
    sid = create(client, random_doc("wire-rank", seed=9))
    reply = client.command(sid, "SetConstraint",
                           ranking={"SafeSeparation": 2, "DynamicSpeed": 1})
    assert reply["type"] == "ack"
    snap = client.command(sid, "RequestSnapshot")["payload"]["snapshot"]
    ranks = {row["id"]: row["priority"] for row in snap["catalog"]}
    assert ranks["SafeSeparation"] == 2
    assert ranks["DynamicSpeed"] == 1
    assert ranks["KeepIn"] == 3

    # the full-ranking form hits the same uniqueness validation
    bad = client.command(sid, "SetConstraint", ranking={"KeepIn": 1})
    assert bad["type"] == "rejected"
    assert "unique" in bad["payload"]["reason"]


def test_select_policy_changes_u_des_at_boundary(client):
    sid = create(client, random_doc("wire-swap", seed=13))
    assert client.request("subscribe", session=sid)["type"] == "ack"
    client.next_push("snapshot")
    assert client.command(sid, "Step", n=6)["type"] == "ack"
    before = [client.next_push("frame")["payload"] for _ in range(6)]

    reply = client.command(sid, "SelectPolicy", deputy=0,
                           policy={"kind": "ScriptedDock"})
    assert reply["type"] == "ack"
    assert reply["payload"]["applies_at_cycle"] == 6

    frames, fin = drive(client, sid, subscribe=False)
    boundary = frames[0]
    assert [e["kind"] for e in boundary.get("events", ())] == ["PolicyChange"]
    assert boundary["events"][0] == {"kind": "PolicyChange", "deputy": 0,
                                     "policy": "ScriptedDock"}

    # from the boundary on, u_des is the docking law of the logged state
    policy = make_policy(policy_from_dict({"kind": "ScriptedDock"}),
                         VehicleParams())
    for frame in (boundary, frames[1]):
        state = FullState.from_vector(
            np.asarray(frame["deputies"][0]["state"]), time=frame["t"])
        want = policy.command(state).to_vector()
        assert frame["deputies"][0]["u_des"] == [float(v) for v in want]
    state5 = FullState.from_vector(
        np.asarray(before[5]["deputies"][0]["state"]), time=before[5]["t"])
    dock5 = policy.command(state5).to_vector()
    assert before[5]["deputies"][0]["u_des"] != [float(v) for v in dock5]


def test_override_script_runs_then_autonomy_resumes(client):
    sid = create(client, random_doc("wire-override", seed=15))
    reply = client.command(
        sid, "Override", deputy=0,
        script=[[7.0, [0.5, 0.0, 0.0, 0.0, 0.0, 0.0]],
                [9.0, [0.0, 0.5, 0.0, 0.0, 0.0, 0.0]]])
    assert reply["type"] == "ack"
    assert reply["payload"]["entries"] == 2

    bad = client.command(sid, "Override", deputy=0,
                         script=[[5.0, [0, 0, 0, 0, 0, 0]],
                                 [1.0, [0, 0, 0, 0, 0, 0]]])
    assert bad["type"] == "rejected"
    assert "non-decreasing" in bad["payload"]["reason"]

    # the rejected script must not displace the accepted one
    frames, _ = drive(client, sid)
    by_t = {f["t"]: f["deputies"][0] for f in frames}
    assert by_t[7.0]["mode"] == "Override"
    assert by_t[7.0]["u_des"] == [0.5, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert by_t[9.0]["mode"] == "Override"
    assert by_t[9.0]["u_des"] == [0.0, 0.5, 0.0, 0.0, 0.0, 0.0]
    # one cycle per entry; autonomy holds everywhere else
    assert all(d["mode"] != "Override" for t, d in by_t.items()
               if t not in (7.0, 9.0))


def test_pause_resume_step_rules(client):
    # long enough that the pause lands while the session is still running
    sid = create(client, random_doc("wire-rules", seed=16, duration=600.0))
    assert client.command(sid, "Pause")["type"] == "rejected"
    assert client.request("subscribe", session=sid)["type"] == "ack"
    client.next_push("snapshot")

    assert client.command(sid, "Resume")["type"] == "ack"
    assert client.command(sid, "Resume")["type"] == "rejected"
    step_while_running = client.command(sid, "Step", n=2)
    assert step_while_running["type"] == "rejected"
    assert "Running" in step_while_running["payload"]["reason"]

    assert client.command(sid, "Pause")["type"] == "ack"
    snap = client.command(sid, "RequestSnapshot")["payload"]["snapshot"]
    assert snap["state"] == "Paused"
    cycle = snap["cycle"]

    assert client.command(sid, "Step", n=3)["type"] == "ack"
    seen = 0
    while seen < 3:
        msg = client.next_push("frame")
        if msg["payload"]["t"] >= cycle:
            seen += 1
    snap = client.command(sid, "RequestSnapshot")["payload"]["snapshot"]
    assert snap["state"] == "Paused"
    assert snap["cycle"] == cycle + 3

    _, fin = drive(client, sid, subscribe=False)
    assert fin["state"] == "Finished"
    assert client.command(sid, "Pause")["type"] == "rejected"
    assert client.command(sid, "Resume")["type"] == "rejected"
    terminal = client.command(sid, "RequestSnapshot")
    assert terminal["type"] == "ack"
    assert terminal["payload"]["snapshot"]["state"] == "Finished"
    assert terminal["payload"]["snapshot"]["metrics"] is not None


def test_abort_ends_session_with_event(client):
    doc = random_doc("wire-abort", seed=17, duration=30.0)
    doc["catalog"] = {cid.wire_name: {"enabled": False}
                      for cid in ConstraintId}
    doc["deputies"][0]["state"]["velocity"] = [1.6e308, 0.0, 0.0]
    sid = create(client, doc)
    frames, fin = drive(client, sid)
    assert fin["state"] == "Aborted"
    assert fin["aborted"] == "NonFiniteState"
    assert frames[-1]["events"][-1] == {"kind": "Abort",
                                        "code": "NonFiniteState"}
    with open(fin["telemetry_path"]) as fh:
        last = json.loads(fh.read().splitlines()[-1])
    assert last["events"] == frames[-1]["events"]
    assert client.command(sid, "Step", n=1)["type"] == "rejected"


def test_preview_is_read_only(server, tmp_path):
    a = GatewayClient(server.port)
    b = GatewayClient(server.port)
    doc = random_doc("wire-preview", seed=19, duration=30.0)
    sid_a = create(a, doc)
    sid_b = create(b, doc)

    assert a.request("subscribe", session=sid_a)["type"] == "ack"
    a.next_push("snapshot")
    assert a.command(sid_a, "Step", n=4)["type"] == "ack"
    for _ in range(4):
        a.next_push("frame")
    reply = a.command(sid_a, "Preview", deputy=0, cycles=8)
    assert reply["type"] == "ack"
    body = reply["payload"]
    assert len(body["positions"]) == 8
    assert len(body["modes"]) == 8
    assert body["t"][0] == 4.0
    snap = a.command(sid_a, "RequestSnapshot")["payload"]["snapshot"]
    assert body["positions"][0] == snap["deputies"][0]["state"][:3]

    _, fin_a = drive(a, sid_a, subscribe=False)
    _, fin_b = drive(b, sid_b)
    a.close()
    b.close()
    # the look-ahead consumed nothing: both sessions wrote the same log
    with open(fin_a["telemetry_path"], "rb") as fa, \
            open(fin_b["telemetry_path"], "rb") as fb:
        assert fa.read() == fb.read()


def test_list_sessions_and_create_from_path(client):
    sid1 = create(client, random_doc("wire-list-1", seed=23))
    reply = client.request("create_session",
                           {"scenario_path": "scenarios/dock.yaml"})
    assert reply["type"] == "session_created"
    sid2 = reply["payload"]["session"]

    rows = client.request("list_sessions")["payload"]["sessions"]
    by_id = {r["session"]: r for r in rows}
    assert by_id[sid1]["state"] == "Configured"
    assert by_id[sid2]["name"] == "dock"
    assert by_id[sid2]["task"] == "Dock"
    order = [r["session"] for r in rows]
    assert order.index(sid1) < order.index(sid2)


def test_malformed_messages_get_structured_errors(server, client):
    sid = create(client, random_doc("wire-robust", seed=25))
    raw = socket.create_connection(("127.0.0.1", server.port), timeout=10)

    def roundtrip(data: bytes):
        raw.sendall(struct.pack(">I", len(data)) + data)
        return read_message(raw)

    bad_json = roundtrip(b"{nope")
    assert bad_json["type"] == "error"
    assert "invalid JSON" in bad_json["payload"]["reason"]

    not_object = roundtrip(b"[1,2]")
    assert not_object["payload"]["reason"] == "envelope must be an object"

    unknown_type = roundtrip(json.dumps(
        {"type": "warp", "session": None, "seq": 4, "payload": {}}).encode())
    assert unknown_type["type"] == "error"
    assert unknown_type["seq"] == 4

    missing_session = roundtrip(json.dumps(
        {"type": "command", "session": "s999", "seq": 5,
         "payload": {"kind": "Pause"}}).encode())
    assert "unknown session" in missing_session["payload"]["reason"]

    bad_scenario = roundtrip(json.dumps(
        {"type": "create_session", "session": None, "seq": 6,
         "payload": {"scenario": {"name": "broken"}}}).encode())
    assert bad_scenario["type"] == "error"
    assert "missing required key" in bad_scenario["payload"]["reason"]
    raw.close()

    # the session shrugged all of that off
    unknown_kind = client.command(sid, "SelfDestruct")
    assert unknown_kind["type"] == "rejected"
    snap = client.command(sid, "RequestSnapshot")
    assert snap["payload"]["snapshot"]["cycle"] == 0


def test_inspect_session_reports_points(client):
    doc = {
        "name": "wire-inspect", "seed": 29, "duration": 60.0,
        "filter_rate": 1.0,
        "task": {"kind": "Inspect", "point_count": 6},
        "deputies": [{"state": {"position": [80.0, 0.0, 0.0],
                                "velocity": [0.0, 0.0, 0.0]},
                      "policy": {"kind": "ScriptedInspect",
                                 "standoff": 50.0}}],
    }
    sid = create(client, doc)
    assert client.request("subscribe", session=sid)["type"] == "ack"
    snap = client.next_push("snapshot")["payload"]
    assert snap["total_points"] == 6
    assert snap["inspected"] == 0
    assert len(snap["points"]) == 6
    assert all(not p["inspected"] for p in snap["points"])

    frames, fin = drive(client, sid, subscribe=False)
    counts = [f["inspected"] for f in frames]
    assert counts == sorted(counts)
    snap = client.command(sid, "RequestSnapshot")["payload"]["snapshot"]
    assert snap["inspected"] == counts[-1]
    assert sum(p["inspected"] for p in snap["points"]) == counts[-1]


json_values = st.recursive(
    st.none() | st.booleans()
    | st.integers(min_value=-2**31, max_value=2**31)
    | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=12),
    lambda inner: st.lists(inner, max_size=3)
    | st.dictionaries(st.text(max_size=6), inner, max_size=3),
    max_leaves=12)

envelopes = st.fixed_dictionaries({
    "type": st.sampled_from(["command", "subscribe", "frame", "ack"]),
    "session": st.none() | st.text(max_size=6),
    "seq": st.integers(min_value=0, max_value=2**31),
    "payload": st.dictionaries(st.text(max_size=6), json_values, max_size=4),
})


@settings(max_examples=60, deadline=None)
@given(envelopes)
def test_wire_roundtrip_is_identity(msg):
    left, right = socket.socketpair()
    try:
        left.sendall(encode_message(msg))
        assert read_message(right) == msg
    finally:
        left.close()
        right.close()


def test_framing_rejects_oversize_and_truncation():
    with pytest.raises(ProtocolError):
        encode_message({"pad": "x" * (MAX_MESSAGE + 1)})

    left, right = socket.socketpair()
    try:
        left.sendall(struct.pack(">I", MAX_MESSAGE + 1))
        with pytest.raises(ProtocolError, match="exceeds the cap"):
            read_message(right)
    finally:
        left.close()
        right.close()

    left, right = socket.socketpair()
    try:
        left.sendall(struct.pack(">I", 10) + b"{}")
        left.close()
        with pytest.raises(ProtocolError, match="ended inside"):
            read_message(right)
    finally:
        right.close()

    left, right = socket.socketpair()
    try:
        left.close()
        assert read_message(right) is None
    finally:
        right.close()


class _RecordingConn:
    """Stand-in connection whose first send blocks until released."""

    def __init__(self, gate):
        self.gate = gate
        self.sent = []
        self.alive = True
        self.first = True

    def send(self, obj):
        if self.first:
            self.first = False
            self.gate.wait(timeout=10)
        self.sent.append(obj)
        return True


def test_slow_subscriber_drops_oldest_with_gap_marker():
    import threading
    import time

    gate = threading.Event()
    conn = _RecordingConn(gate)
    sub = _Subscriber(conn, "s1", limit=4)
    sub.push("frame", {"n": 0})
    while conn.first:
        time.sleep(0.005)
    for n in range(1, 10):
        sub.push("frame", {"n": n})
    gate.set()
    deadline = time.time() + 5
    while len(conn.sent) < 6 and time.time() < deadline:
        time.sleep(0.01)
    sub.close()

    types = [m["type"] for m in conn.sent]
    assert types == ["frame", "gap", "frame", "frame", "frame", "frame"]
    assert conn.sent[1]["payload"] == {"dropped": 5}
    # the freshest items survive, the oldest queued ones were shed
    assert [m["payload"]["n"] for m in conn.sent if m["type"] == "frame"] \
        == [0, 6, 7, 8, 9]
    seqs = [m["seq"] for m in conn.sent]
    assert seqs == sorted(seqs)


def test_zero_cycle_scenario_finishes_immediately(client):
    doc = random_doc("wire-empty", seed=31, duration=0.4)
    sid = create(client, doc)
    assert client.request("subscribe", session=sid)["type"] == "ack"
    client.next_push("snapshot")
    assert client.command(sid, "Resume")["type"] == "ack"
    fin = client.next_push("finished")["payload"]
    assert fin["state"] == "Finished"
    with open(fin["telemetry_path"]) as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["name"] == "wire-empty"
