"""Wire protocol: newline-delimited UTF-8 JSON messages with a handshake.

Every line is one JSON object carrying a schema version and a type tag.
Decoders ignore unknown keys so fields can be added without breaking older
peers; a truncated or garbled line raises and the stream resynchronizes at
the next newline. The handshake line pins the schema version plus hashes of
the model files and config, so both ends provably run the same setup.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .fusion import N_KEYPOINTS, KeypointCandidate
from .geometry import Pose

SCHEMA_VERSION = 1
Q_H_DIM = 20  # human joint angles on the wire
Q_A_DIM = 16  # robot joint angles on the wire


class WireError(ValueError):
    """Base for every decode failure."""


class MalformedMessage(WireError):
    pass


class SchemaMismatch(WireError):
    pass


class PayloadViolation(WireError):
    pass


@dataclass(frozen=True)
class HandStateMessage:
    """One observed human hand state.

    Exactly one payload variant: a palm pose with joint angles, or a raw
    23-keypoint set (optionally with the per-camera candidates behind it).
    """

    t: float
    palm_pose: Pose | None = None
    q_h: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    candidates: tuple = ()

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise PayloadViolation("timestamp must be finite")
        joint_variant = self.palm_pose is not None or self.q_h is not None
        keypoint_variant = self.keypoints is not None
        if joint_variant and keypoint_variant:
            raise PayloadViolation("message carries both payload variants")
        if joint_variant:
            if self.palm_pose is None or self.q_h is None:
                raise PayloadViolation("joint payload needs palm_pose and q_h together")
            q = np.asarray(self.q_h, dtype=float)
            if q.shape != (Q_H_DIM,):
                raise PayloadViolation(f"q_h must hold {Q_H_DIM} angles, got {q.shape}")
            if not np.all(np.isfinite(q)):
                raise PayloadViolation("q_h must be finite")
            object.__setattr__(self, "q_h", q)
            if self.candidates:
                raise PayloadViolation("candidates belong to the keypoint variant")
        elif keypoint_variant:
            k = np.asarray(self.keypoints, dtype=float)
            if k.shape != (N_KEYPOINTS, 3):
                raise PayloadViolation(
                    f"keypoints must be ({N_KEYPOINTS}, 3), got {k.shape}"
                )
            if not np.all(np.isfinite(k)):
                raise PayloadViolation("keypoints must be finite")
            object.__setattr__(self, "keypoints", k)
            object.__setattr__(self, "candidates", tuple(self.candidates))
        else:
            raise PayloadViolation("message carries no payload")


@dataclass(frozen=True)
class RobotCommandMessage:
    """One robot hand command: filtered joint angles plus a palm pose target."""

    t_source: float
    t_emit: float
    q_a: np.ndarray
    palm_target: Pose
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("t_source", "t_emit"):
            if not np.isfinite(getattr(self, name)):
                raise PayloadViolation(f"{name} must be finite")
        q = np.asarray(self.q_a, dtype=float)
        if q.shape != (Q_A_DIM,):
            raise PayloadViolation(f"q_a must hold {Q_A_DIM} angles, got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise PayloadViolation("q_a must be finite")
        object.__setattr__(self, "q_a", q)
        if not isinstance(self.palm_target, Pose):
            raise PayloadViolation("palm_target must be a pose")
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))


@dataclass(frozen=True)
class HandshakeMessage:
    """Stream opener: schema version plus content hashes both ends must share."""

    schema: int
    model_hashes: dict  # e.g. {"human": "sha256:...", "robot": "sha256:..."}
    config_hash: str

    def __post_init__(self):
        object.__setattr__(self, "model_hashes", dict(self.model_hashes))


_CONTROL_ACTIONS = ("re_register",)


@dataclass(frozen=True)
class ControlMessage:
    """In-band operator command, e.g. redo registration on the next frame."""

    action: str

    def __post_init__(self):
        if self.action not in _CONTROL_ACTIONS:
            raise PayloadViolation(f"unknown control action {self.action!r}")


def content_hash(data) -> str:
    """Stable content address for files and canonical config dumps."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return "sha256:" + hashlib.sha256(data).hexdigest()


def config_content_hash(doc: dict) -> str:
    return content_hash(json.dumps(doc, sort_keys=True, separators=(",", ":")))


# -- encoding ----------------------------------------------------------------


def _pose_to_doc(pose: Pose) -> dict:
    return pose.as_dict()


def _candidate_to_doc(c: KeypointCandidate) -> dict:
    return {
        "keypoint_id": c.keypoint_id,
        "camera_id": c.camera_id,
        "position": [float(v) for v in c.position],
        "confidence": float(c.confidence),
    }


def message_to_doc(msg) -> dict:
    if isinstance(msg, HandStateMessage):
        doc = {"v": SCHEMA_VERSION, "type": "hand_state", "t": float(msg.t)}
        if msg.q_h is not None:
            doc["palm_pose"] = _pose_to_doc(msg.palm_pose)
            doc["q_h"] = [float(v) for v in msg.q_h]
        else:
            doc["keypoints"] = [[float(v) for v in row] for row in msg.keypoints]
            if msg.candidates:
                doc["candidates"] = [_candidate_to_doc(c) for c in msg.candidates]
        return doc
    if isinstance(msg, RobotCommandMessage):
        return {
            "v": SCHEMA_VERSION,
            "type": "robot_command",
            "t_source": float(msg.t_source),
            "t_emit": float(msg.t_emit),
            "q_a": [float(v) for v in msg.q_a],
            "palm_target": _pose_to_doc(msg.palm_target),
            "diagnostics": msg.diagnostics,
        }
    if isinstance(msg, HandshakeMessage):
        return {
            "v": SCHEMA_VERSION,
            "type": "handshake",
            "schema": msg.schema,
            "models": msg.model_hashes,
            "config": msg.config_hash,
        }
    if isinstance(msg, ControlMessage):
        return {"v": SCHEMA_VERSION, "type": "control", "action": msg.action}
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def encode_message(msg) -> bytes:
    """One message as a complete line: UTF-8 JSON plus trailing newline."""
    return (
        json.dumps(message_to_doc(msg), separators=(",", ":"), allow_nan=False) + "\n"
    ).encode("utf-8")


# -- decoding ----------------------------------------------------------------


def _doc_pose(doc, key) -> Pose:
    raw = doc.get(key)
    if not isinstance(raw, dict):
        raise PayloadViolation(f"missing pose field {key!r}")
    try:
        return Pose.from_dict(raw)
    except (KeyError, TypeError, ValueError) as e:
        raise PayloadViolation(f"bad pose in {key!r}: {e}") from None


def _doc_candidates(raw) -> tuple:
    out = []
    for entry in raw:
        try:
            out.append(
                KeypointCandidate(
                    keypoint_id=int(entry["keypoint_id"]),
                    camera_id=int(entry["camera_id"]),
                    position=np.asarray(entry["position"], dtype=float),
                    confidence=float(entry["confidence"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise PayloadViolation(f"bad keypoint candidate: {e}") from None
    return tuple(out)


def decode_message(line):
    """Parse one line (bytes or str) into a message object.

    Raises MalformedMessage for JSON/framing problems, SchemaMismatch for a
    wrong schema version, PayloadViolation for structurally invalid payloads.
    Unknown keys are ignored.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedMessage(f"not UTF-8: {e}") from None
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedMessage(f"bad JSON: {e.msg}") from None
    if not isinstance(doc, dict):
        raise MalformedMessage("message line must hold a JSON object")
    version = doc.get("v")
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"schema version {version!r}, expected {SCHEMA_VERSION}")
    mtype = doc.get("type")
    if mtype == "hand_state":
        if "t" not in doc:
            raise PayloadViolation("hand_state needs a timestamp")
        try:
            t = float(doc["t"])
        except (TypeError, ValueError):
            raise PayloadViolation("timestamp must be a number") from None
        if "keypoints" in doc:
            if "palm_pose" in doc or "q_h" in doc:
                raise PayloadViolation("message carries both payload variants")
            try:
                keypoints = np.asarray(doc["keypoints"], dtype=float)
            except (TypeError, ValueError):
                raise PayloadViolation("keypoints must be numeric") from None
            return HandStateMessage(
                t=t,
                keypoints=keypoints,
                candidates=_doc_candidates(doc.get("candidates", [])),
            )
        if "palm_pose" in doc or "q_h" in doc:
            try:
                q_h = np.asarray(doc.get("q_h"), dtype=float)
            except (TypeError, ValueError):
                raise PayloadViolation("q_h must be numeric") from None
            return HandStateMessage(t=t, palm_pose=_doc_pose(doc, "palm_pose"), q_h=q_h)
        raise PayloadViolation("message carries no payload")
    if mtype == "robot_command":
        for key in ("t_source", "t_emit", "q_a", "palm_target"):
            if key not in doc:
                raise PayloadViolation(f"robot_command needs {key!r}")
        try:
            q_a = np.asarray(doc["q_a"], dtype=float)
            t_source = float(doc["t_source"])
            t_emit = float(doc["t_emit"])
        except (TypeError, ValueError):
            raise PayloadViolation("robot_command fields must be numeric") from None
        diagnostics = doc.get("diagnostics", {})
        if not isinstance(diagnostics, dict):
            raise PayloadViolation("diagnostics must be an object")
        return RobotCommandMessage(
            t_source=t_source,
            t_emit=t_emit,
            q_a=q_a,
            palm_target=_doc_pose(doc, "palm_target"),
            diagnostics=diagnostics,
        )
    if mtype == "handshake":
        for key in ("schema", "models", "config"):
            if key not in doc:
                raise PayloadViolation(f"handshake needs {key!r}")
        if not isinstance(doc["models"], dict):
            raise PayloadViolation("handshake models must be an object")
        return HandshakeMessage(
            schema=int(doc["schema"]),
            model_hashes=doc["models"],
            config_hash=str(doc["config"]),
        )
    if mtype == "control":
        if "action" not in doc:
            raise PayloadViolation("control needs 'action'")
        return ControlMessage(action=str(doc["action"]))
    raise PayloadViolation(f"unknown message type {mtype!r}")


def messages_equal(a, b) -> bool:
    """Exact structural equality, arrays and poses compared bit-for-bit."""
    if type(a) is not type(b):
        return False
    if isinstance(a, HandStateMessage):
        if a.t != b.t:
            return False
        if (a.q_h is None) != (b.q_h is None):
            return False
        if a.q_h is not None:
            return (
                np.array_equal(a.q_h, b.q_h)
                and np.array_equal(a.palm_pose.rotation, b.palm_pose.rotation)
                and np.array_equal(a.palm_pose.translation, b.palm_pose.translation)
            )
        if not np.array_equal(a.keypoints, b.keypoints):
            return False
        if len(a.candidates) != len(b.candidates):
            return False
        return all(
            ca.keypoint_id == cb.keypoint_id
            and ca.camera_id == cb.camera_id
            and np.array_equal(ca.position, cb.position)
            and ca.confidence == cb.confidence
            for ca, cb in zip(a.candidates, b.candidates)
        )
    if isinstance(a, RobotCommandMessage):
        return (
            a.t_source == b.t_source
            and a.t_emit == b.t_emit
            and np.array_equal(a.q_a, b.q_a)
            and np.array_equal(a.palm_target.rotation, b.palm_target.rotation)
            and np.array_equal(a.palm_target.translation, b.palm_target.translation)
            and a.diagnostics == b.diagnostics
        )
    if isinstance(a, HandshakeMessage):
        return (
            a.schema == b.schema
            and a.model_hashes == b.model_hashes
            and a.config_hash == b.config_hash
        )
    if isinstance(a, ControlMessage):
        return a.action == b.action
    raise TypeError(f"not a wire message: {type(a).__name__}")


def check_handshake(received: HandshakeMessage, expected: HandshakeMessage) -> None:
    """Raise SchemaMismatch when the peer's handshake disagrees with ours."""
    if received.schema != expected.schema:
        raise SchemaMismatch(
            f"peer schema {received.schema}, expected {expected.schema}"
        )
    if received.model_hashes != expected.model_hashes:
        raise SchemaMismatch("peer model hashes differ")
    if received.config_hash != expected.config_hash:
        raise SchemaMismatch("peer config hash differs")
