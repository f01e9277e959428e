"""Wire codec: round-trip fidelity, error taxonomy, and framing resync."""

import json
import math
import socket

import numpy as np
import pytest

from handmimic import messages as wire
from handmimic.fusion import KeypointCandidate
from handmimic.geometry import Pose, quat_from_axis_angle
from handmimic.pipeline import _read_lines


def random_pose(rng) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    q = quat_from_axis_angle(axis, float(rng.uniform(-math.pi, math.pi)))
    return Pose(q, rng.uniform(-0.5, 0.5, size=3))


def random_message(rng, kind: str):
    t = float(rng.uniform(0.0, 1e4))
    if kind == "joint":
        return wire.HandStateMessage(
            t=t, palm_pose=random_pose(rng), q_h=rng.uniform(-2.0, 2.0, size=wire.Q_H_DIM)
        )
    if kind == "keypoints":
        cands = ()
        if rng.random() < 0.5:
            cands = tuple(
                KeypointCandidate(
                    keypoint_id=int(rng.integers(0, 23)),
                    camera_id=int(rng.integers(0, 4)),
                    position=rng.uniform(-0.3, 0.3, size=3),
                    confidence=float(rng.uniform(0.0, 0.01)),
                )
                for _ in range(rng.integers(1, 6))
            )
        return wire.HandStateMessage(
            t=t, keypoints=rng.uniform(-0.3, 0.3, size=(23, 3)), candidates=cands
        )
    if kind == "command":
        return wire.RobotCommandMessage(
            t_source=t,
            t_emit=t + float(rng.uniform(0.0, 0.1)),
            q_a=rng.uniform(-1.0, 2.0, size=wire.Q_A_DIM),
            palm_target=random_pose(rng),
            diagnostics={"solve_ms": float(rng.uniform(0.0, 30.0)), "iters": int(rng.integers(1, 40))},
        )
    if kind == "handshake":
        return wire.HandshakeMessage(
            schema=wire.SCHEMA_VERSION,
            model_hashes={"human": wire.content_hash(rng.bytes(16)), "robot": wire.content_hash(rng.bytes(16))},
            config_hash=wire.content_hash(rng.bytes(16)),
        )
    return wire.ControlMessage(action="re_register")


KINDS = ("joint", "keypoints", "command", "handshake", "control")


def test_round_trip_fuzz_10k():
    # acceptance-level contract: 10000 encode/decode cycles, zero mismatches
    rng = np.random.default_rng(991)
    mismatches = 0
    for i in range(10_000):
        msg = random_message(rng, KINDS[i % len(KINDS)])
        line = wire.encode_message(msg)
        back = wire.decode_message(line)
        if not wire.messages_equal(msg, back):
            mismatches += 1
    assert mismatches == 0


def test_exact_float_round_trip():
    # shortest-repr JSON floats must survive bit for bit, extremes included
    q = np.zeros(wire.Q_H_DIM)
    q[:8] = [0.1, 1.0 / 3.0, math.pi, -0.0, 1e-300, 1e300, 5e-324, -1.2345678901234567]
    msg = wire.HandStateMessage(t=1.0000000000000002, palm_pose=Pose.identity(), q_h=q)
    back = wire.decode_message(wire.encode_message(msg))
    assert back.q_h.tobytes() == q.tobytes()
    assert back.t == 1.0000000000000002


def test_encoded_line_framing():
    rng = np.random.default_rng(5)
    line = wire.encode_message(random_message(rng, "keypoints"))
    assert line.endswith(b"\n")
    assert b"\n" not in line[:-1]
    # canonical JSON, no whitespace padding
    assert b": " not in line and b", " not in line


def test_unknown_keys_ignored():
    rng = np.random.default_rng(17)
    for kind in KINDS:
        msg = random_message(rng, kind)
        doc = wire.message_to_doc(msg)
        doc["future_field"] = {"nested": [1, 2, 3]}
        doc["another"] = "ignored"
        back = wire.decode_message(json.dumps(doc))
        assert wire.messages_equal(msg, back)
    # extra keys inside a pose payload are ignored too
    msg = random_message(rng, "command")
    doc = wire.message_to_doc(msg)
    doc["palm_target"]["frame_id"] = "camera0"
    assert wire.messages_equal(msg, wire.decode_message(json.dumps(doc)))


@pytest.mark.parametrize(
    "raw",
    [
        b"\xff\xfe not utf8 {",
        "this is not json",
        '{"v": 1, "type": "hand_state"',  # truncated object
        "[1, 2, 3]",
        "42",
        '"just a string"',
    ],
)
def test_malformed_lines(raw):
    with pytest.raises(wire.MalformedMessage):
        wire.decode_message(raw)


def test_schema_version_checked():
    rng = np.random.default_rng(3)
    doc = wire.message_to_doc(random_message(rng, "joint"))
    for bad in (0, 2, "1", None):
        d = dict(doc)
        if bad is None:
            d.pop("v")
        else:
            d["v"] = bad
        with pytest.raises(wire.SchemaMismatch):
            wire.decode_message(json.dumps(d))


def _joint_doc(rng):
    return wire.message_to_doc(random_message(rng, "joint"))


def _cmd_doc(rng):
    return wire.message_to_doc(random_message(rng, "command"))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d, r: d.update(type="telemetry"),
        lambda d, r: d.pop("type"),
        lambda d, r: d.pop("t"),
        lambda d, r: d.update(t="noon"),
        lambda d, r: d.update(keypoints=[[0.0, 0.0, 0.0]] * 23),  # both variants
        lambda d, r: (d.pop("q_h"), d.pop("palm_pose")),  # no payload
        lambda d, r: d.update(q_h=[0.0] * 7),
        lambda d, r: d.update(q_h=["a"] * 20),
        lambda d, r: d.update(palm_pose="not a pose"),
        lambda d, r: d.update(palm_pose={"rotation": [1.0, 0.0, 0.0], "translation": [0.0, 0.0, 0.0]}),
    ],
)
def test_hand_state_payload_violations(mutate):
    rng = np.random.default_rng(11)
    doc = _joint_doc(rng)
    mutate(doc, rng)
    with pytest.raises(wire.PayloadViolation):
        wire.decode_message(json.dumps(doc))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("t_source"),
        lambda d: d.pop("t_emit"),
        lambda d: d.pop("q_a"),
        lambda d: d.pop("palm_target"),
        lambda d: d.update(q_a=[0.0] * 5),
        lambda d: d.update(diagnostics=[1, 2]),
    ],
)
def test_robot_command_payload_violations(mutate):
    rng = np.random.default_rng(12)
    doc = _cmd_doc(rng)
    mutate(doc)
    with pytest.raises(wire.PayloadViolation):
        wire.decode_message(json.dumps(doc))


def test_keypoint_payload_violations():
    base = {"v": 1, "type": "hand_state", "t": 0.5}
    for kp in ([[0.0, 0.0, 0.0]] * 10, [[0.0, 0.0]] * 23, [[0.0] * 3] * 22 + [[0.0] * 2]):
        with pytest.raises(wire.PayloadViolation):
            wire.decode_message(json.dumps({**base, "keypoints": kp}))
    good_kp = [[0.0, 0.0, 0.0]] * 23
    for cand in (
        [{"camera_id": 0, "position": [0, 0, 0], "confidence": 0.001}],  # id missing
        [{"keypoint_id": 40, "camera_id": 0, "position": [0, 0, 0], "confidence": 0.001}],
        [{"keypoint_id": 1, "camera_id": 0, "position": [0, 0], "confidence": 0.001}],
        [{"keypoint_id": 1, "camera_id": 0, "position": [0, 0, 0], "confidence": -1.0}],
    ):
        with pytest.raises(wire.PayloadViolation):
            wire.decode_message(json.dumps({**base, "keypoints": good_kp, "candidates": cand}))


def test_handshake_and_control_violations():
    for key in ("schema", "models", "config"):
        doc = {"v": 1, "type": "handshake", "schema": 1, "models": {}, "config": "sha256:x"}
        doc.pop(key)
        with pytest.raises(wire.PayloadViolation):
            wire.decode_message(json.dumps(doc))
    with pytest.raises(wire.PayloadViolation):
        wire.decode_message(json.dumps({"v": 1, "type": "handshake", "schema": 1, "models": [], "config": "x"}))
    with pytest.raises(wire.PayloadViolation):
        wire.decode_message(json.dumps({"v": 1, "type": "control", "action": "self_destruct"}))
    with pytest.raises(wire.PayloadViolation):
        wire.decode_message(json.dumps({"v": 1, "type": "control"}))


def test_construction_guards():
    rng = np.random.default_rng(8)
    pose = random_pose(rng)
    with pytest.raises(wire.PayloadViolation):
        wire.HandStateMessage(t=float("nan"), palm_pose=pose, q_h=np.zeros(20))
    with pytest.raises(wire.PayloadViolation):
        wire.HandStateMessage(t=0.0, palm_pose=pose, q_h=np.full(20, np.nan))
    with pytest.raises(wire.PayloadViolation):
        wire.HandStateMessage(t=0.0, palm_pose=pose, q_h=np.zeros(20), keypoints=np.zeros((23, 3)))
    with pytest.raises(wire.PayloadViolation):
        wire.HandStateMessage(t=0.0)
    cand = KeypointCandidate(0, 0, np.zeros(3), 0.001)
    with pytest.raises(wire.PayloadViolation):
        wire.HandStateMessage(t=0.0, palm_pose=pose, q_h=np.zeros(20), candidates=(cand,))
    with pytest.raises(wire.PayloadViolation):
        wire.RobotCommandMessage(0.0, 0.0, np.full(16, np.inf), pose)
    with pytest.raises(wire.PayloadViolation):
        wire.RobotCommandMessage(0.0, 0.0, np.zeros(16), palm_target={"rotation": []})
    with pytest.raises(TypeError):
        wire.encode_message({"v": 1, "type": "hand_state"})


def test_error_hierarchy():
    for exc in (wire.MalformedMessage, wire.SchemaMismatch, wire.PayloadViolation):
        assert issubclass(exc, wire.WireError)
    assert issubclass(wire.WireError, ValueError)


def test_truncated_frame_resyncs_at_next_newline():
    # dropping the tail of one frame glues it to the next line; exactly that
    # merged line fails and every later frame decodes normally
    rng = np.random.default_rng(23)
    msgs = [random_message(rng, "joint") for _ in range(6)]
    lines = [wire.encode_message(m) for m in msgs]
    stream = b"".join(lines[:2]) + lines[2][: len(lines[2]) // 2] + b"".join(lines[3:])
    decoded, errors = [], 0
    for line in stream.split(b"\n"):
        if not line:
            continue
        try:
            decoded.append(wire.decode_message(line))
        except wire.WireError:
            errors += 1
    assert errors == 1
    expect = msgs[:2] + msgs[4:]  # frame 2 truncated, frame 3 swallowed by the merge
    assert len(decoded) == len(expect)
    assert all(wire.messages_equal(a, b) for a, b in zip(decoded, expect))


def test_line_reader_reassembles_split_chunks():
    rng = np.random.default_rng(29)
    lines = [wire.encode_message(random_message(rng, "command")) for _ in range(8)]
    payload = b"".join(lines)
    a, b = socket.socketpair()
    try:
        # ship in awkward chunk sizes so lines straddle recv boundaries
        i = 0
        for size in (3, 40, 7, 1000, 11):
            a.sendall(payload[i : i + size])
            i += size
        a.sendall(payload[i:-5])  # final line arrives truncated, then the socket closes
        a.close()
        got = [line for line in _read_lines(b)]
    finally:
        b.close()
    assert got == [ln[:-1] for ln in lines[:-1]]  # newline stripped, partial tail dropped


def test_messages_equal_discriminates():
    rng = np.random.default_rng(31)
    m = random_message(rng, "command")
    same = wire.decode_message(wire.encode_message(m))
    assert wire.messages_equal(m, same)
    bumped = wire.RobotCommandMessage(m.t_source + 1e-9, m.t_emit, m.q_a, m.palm_target, m.diagnostics)
    assert not wire.messages_equal(m, bumped)
    other = random_message(rng, "joint")
    assert not wire.messages_equal(m, other)


def test_content_hash_addressing():
    assert wire.content_hash("abc") == wire.content_hash(b"abc")
    assert wire.content_hash(b"abc").startswith("sha256:")
    assert wire.content_hash(b"abc") != wire.content_hash(b"abd")
    a = wire.config_content_hash({"x": 1, "y": [1, 2]})
    b = wire.config_content_hash({"y": [1, 2], "x": 1})
    assert a == b


def test_handshake_wire_keys_and_check():
    hs = wire.HandshakeMessage(1, {"human": "sha256:aa", "robot": "sha256:bb"}, "sha256:cc")
    doc = wire.message_to_doc(hs)
    assert set(doc) == {"v", "type", "schema", "models", "config"}
    back = wire.decode_message(wire.encode_message(hs))
    assert wire.messages_equal(hs, back)
    wire.check_handshake(back, hs)  # identical peers agree
    for other in (
        wire.HandshakeMessage(2, hs.model_hashes, hs.config_hash),
        wire.HandshakeMessage(1, {"human": "sha256:aa", "robot": "sha256:zz"}, hs.config_hash),
        wire.HandshakeMessage(1, hs.model_hashes, "sha256:zz"),
    ):
        with pytest.raises(wire.SchemaMismatch):
            wire.check_handshake(other, hs)
