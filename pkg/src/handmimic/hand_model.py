"""Articulated hand models: JSON parsing, validation, and forward kinematics.

A model file is UTF-8 JSON describing a kinematic tree of links connected by
revolute or fixed joints, plus named frames (fingertips, palm) attached to
links and finger role annotations. All angles are radians, lengths meters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_multiply, quat_rotate

AXIS_TOL = 1e-9

FINGER_ROLES = ("thumb", "primary", "other")


class ModelError(Exception):
    """Base for model file problems. ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class ModelSyntaxError(ModelError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        where = f" at line {line}, column {col}" if line is not None else ""
        super().__init__("syntax", message + where)
        self.line = line
        self.col = col


class ModelSemanticError(ModelError):
    pass


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str  # "revolute" | "fixed"
    parent: str
    child: str
    origin: Pose
    origin_xyz: tuple
    origin_rpy: tuple
    axis: np.ndarray | None = None
    lower: float = 0.0
    upper: float = 0.0
    coupled_to: str | None = None


@dataclass(frozen=True)
class NamedFrame:
    name: str
    link: str
    origin: Pose
    origin_xyz: tuple
    origin_rpy: tuple


@dataclass(frozen=True)
class FingerSpec:
    name: str
    tip_frame: str
    role: str


@dataclass(frozen=True)
class JointVector:
    """Ordered joint angles (radians) bound to a named model."""

    model: str
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


@dataclass
class FkResult:
    """World-frame kinematics for one configuration.

    frames maps frame name to Pose in root coordinates. joint_axes / joint_origins
    give each revolute joint's rotation axis and position in root coordinates,
    indexed by q index; frame_ancestors lists the q indices on the root-to-frame path.
    """

    frames: dict
    joint_axes: np.ndarray
    joint_origins: np.ndarray
    frame_ancestors: dict


class FkNative:
    """FK output as plain float tuples, for tight solver loops."""

    __slots__ = ("frame_rot", "frame_pos", "joint_axes", "joint_origins")

    def __init__(self, frame_rot, frame_pos, joint_axes, joint_origins):
        self.frame_rot = frame_rot
        self.frame_pos = frame_pos
        self.joint_axes = joint_axes
        self.joint_origins = joint_origins


class HandModel:
    """Immutable parsed kinematic tree. Safe to share across threads."""

    def __init__(self, name, root_link, links, joints, frames, fingers):
        self.name = name
        self.root_link = root_link
        self.links = list(links)
        self.joints = list(joints)
        self.frames = {f.name: f for f in frames}
        self.frame_list = list(frames)
        self.fingers = list(fingers)
        self._validate_tree()

        revolute = [j for j in self.joints if j.kind == "revolute"]
        self.dof = len(revolute)
        self._q_index = {j.name: i for i, j in enumerate(revolute)}
        self.joint_names = [j.name for j in revolute]
        self.lower = np.array([j.lower for j in revolute])
        self.upper = np.array([j.upper for j in revolute])

        # FK order: joints sorted so a parent link's pose is ready before its children
        self._fk_order = self._topological_joints()
        self._link_ancestors = self._ancestor_table()
        self._setup_coupling(revolute)
        self._finger_by_name = {f.name: f for f in self.fingers}
        self._compile()

    # -- validation ---------------------------------------------------------

    def _validate_tree(self):
        link_set = set(self.links)
        if len(link_set) != len(self.links):
            raise ModelSemanticError("duplicate-name", "duplicate link names")
        seen = set()
        child_of = {}
        for j in self.joints:
            if j.name in seen:
                raise ModelSemanticError("duplicate-name", f"duplicate joint name {j.name!r}")
            seen.add(j.name)
            for ln in (j.parent, j.child):
                if ln not in link_set:
                    raise ModelSemanticError(
                        "dangling-link", f"joint {j.name!r} references undeclared link {ln!r}"
                    )
            if j.child in child_of:
                raise ModelSemanticError("cycle", f"link {j.child!r} has more than one parent joint")
            child_of[j.child] = j
            if j.kind == "revolute":
                if abs(np.linalg.norm(j.axis) - 1.0) > AXIS_TOL:
                    raise ModelSemanticError("non-unit-axis", f"joint {j.name!r} axis is not unit length")
                if j.lower > j.upper:
                    raise ModelSemanticError(
                        "inverted-limits", f"joint {j.name!r} limits {j.lower} > {j.upper}"
                    )
        if self.root_link not in link_set:
            raise ModelSemanticError("dangling-link", f"root link {self.root_link!r} not declared")
        if self.root_link in child_of:
            raise ModelSemanticError("cycle", f"root link {self.root_link!r} is a joint child")
        roots = [ln for ln in self.links if ln not in child_of]
        if roots != [self.root_link]:
            extra = [r for r in roots if r != self.root_link]
            raise ModelSemanticError(
                "multiple-roots", f"links {extra} are not reachable from root {self.root_link!r}"
            )
        # reachability: walking up from every link must terminate at the root
        for ln in self.links:
            hops = 0
            cur = ln
            while cur != self.root_link:
                cur = child_of[cur].parent
                hops += 1
                if hops > len(self.links):
                    raise ModelSemanticError("cycle", f"cycle detected at link {ln!r}")
        names = set()
        for f in self.frame_list:
            if f.name in names:
                raise ModelSemanticError("duplicate-name", f"duplicate frame name {f.name!r}")
            names.add(f.name)
            if f.link not in link_set:
                raise ModelSemanticError(
                    "dangling-link", f"frame {f.name!r} references undeclared link {f.link!r}"
                )
        for fg in self.fingers:
            if fg.role not in FINGER_ROLES:
                raise ModelSemanticError("bad-role", f"finger {fg.name!r} role {fg.role!r} invalid")
            if fg.tip_frame not in names:
                raise ModelSemanticError(
                    "dangling-link", f"finger {fg.name!r} tip frame {fg.tip_frame!r} does not exist"
                )

    def _topological_joints(self):
        by_parent = {}
        for j in self.joints:
            by_parent.setdefault(j.parent, []).append(j)
        order = []
        stack = [self.root_link]
        while stack:
            link = stack.pop()
            for j in by_parent.get(link, []):
                order.append(j)
                stack.append(j.child)
        return order

    def _ancestor_table(self):
        parent_joint = {j.child: j for j in self.joints}
        table = {self.root_link: ()}
        for j in self._fk_order:
            chain = table[j.parent]
            if j.kind == "revolute":
                chain = chain + (self._q_index[j.name],)
            table[j.child] = chain
        return table

    def _setup_coupling(self, revolute):
        followers = {}
        masters = set()
        for j in revolute:
            if j.coupled_to is None:
                continue
            if j.coupled_to not in self._q_index:
                raise ModelSemanticError(
                    "unknown-coupling", f"joint {j.name!r} coupled to unknown joint {j.coupled_to!r}"
                )
            followers[self._q_index[j.name]] = self._q_index[j.coupled_to]
            masters.add(j.coupled_to)
        for name in masters:
            if self._q_index[name] in followers:
                raise ModelSemanticError("unknown-coupling", f"coupling chain through {name!r}")
        self.coupling = dict(sorted(followers.items()))
        self.free_indices = np.array(
            [i for i in range(self.dof) if i not in self.coupling], dtype=int
        )
        self.reduced_dof = len(self.free_indices)

    def _compile(self):
        # flatten the tree into tuple programs so FK avoids ndarray overhead
        link_idx = {ln: i for i, ln in enumerate(self.links)}
        self._root_idx = link_idx[self.root_link]
        self._fk_program = []
        for j in self._fk_order:
            q = j.origin.rotation
            t = j.origin.translation
            self._fk_program.append(
                (
                    j.kind == "revolute",
                    link_idx[j.parent],
                    link_idx[j.child],
                    self._q_index[j.name] if j.kind == "revolute" else -1,
                    (q[0], q[1], q[2], q[3]),
                    (t[0], t[1], t[2]),
                    tuple(j.axis) if j.axis is not None else None,
                )
            )
        self._frame_program = []
        for f in self.frame_list:
            q = f.origin.rotation
            t = f.origin.translation
            self._frame_program.append(
                (f.name, link_idx[f.link], (q[0], q[1], q[2], q[3]), (t[0], t[1], t[2]))
            )

    # -- accessors ----------------------------------------------------------

    def finger(self, name: str) -> FingerSpec:
        return self._finger_by_name[name]

    def primary_tip_frames(self) -> list[str]:
        return [f.tip_frame for f in self.fingers if f.role == "primary"]

    def thumb_tip_frame(self) -> str:
        for f in self.fingers:
            if f.role == "thumb":
                return f.tip_frame
        raise KeyError(f"model {self.name!r} declares no thumb")

    def joint_index(self, joint_name: str) -> int:
        """Position of a revolute joint in the q vector."""
        try:
            return self._q_index[joint_name]
        except KeyError:
            raise KeyError(f"unknown revolute joint {joint_name!r} in model {self.name!r}") from None

    def frame_ancestors(self, frame_name: str) -> tuple:
        """Indices of the revolute joints on the root path of a frame's link."""
        f = self.frames.get(frame_name)
        if f is None:
            raise KeyError(f"unknown frame {frame_name!r} in model {self.name!r}")
        return self._link_ancestors[f.link]

    def check_q(self, q) -> np.ndarray:
        if isinstance(q, JointVector):
            if q.model != self.name:
                raise ValueError(f"joint vector bound to {q.model!r}, expected {self.name!r}")
            q = q.values
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dof,):
            raise ValueError(f"expected {self.dof} joint values for {self.name!r}, got {q.shape}")
        return q


# -- parsing / serialization ------------------------------------------------


def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ModelSyntaxError(f"missing key {key!r} in {ctx}")
    return obj[key]


def _vec(raw, n, ctx) -> tuple:
    if not isinstance(raw, (list, tuple)) or len(raw) != n:
        raise ModelSyntaxError(f"{ctx} must be a list of {n} numbers")
    try:
        return tuple(float(v) for v in raw)
    except (TypeError, ValueError):
        raise ModelSyntaxError(f"{ctx} must be a list of {n} numbers") from None


def _origin(raw: dict, ctx: str) -> tuple:
    xyz = _vec(raw.get("xyz", [0.0, 0.0, 0.0]), 3, f"{ctx}.xyz")
    rpy = _vec(raw.get("rpy", [0.0, 0.0, 0.0]), 3, f"{ctx}.rpy")
    return Pose.from_xyz_rpy(xyz, rpy), xyz, rpy


def parse_model(text: str) -> HandModel:
    """Parse a model file. Raises ModelSyntaxError / ModelSemanticError."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelSyntaxError(e.msg, e.lineno, e.colno) from None
    if not isinstance(doc, dict):
        raise ModelSyntaxError("model file must contain a JSON object")

    name = _require(doc, "name", "model")
    root = _require(doc, "root_link", "model")
    links = _require(doc, "links", "model")
    if not isinstance(links, list) or not all(isinstance(x, str) for x in links):
        raise ModelSyntaxError("links must be a list of strings")

    joints = []
    for i, jr in enumerate(doc.get("joints", [])):
        ctx = f"joints[{i}]"
        jname = _require(jr, "name", ctx)
        kind = _require(jr, "kind", ctx)
        if kind not in ("revolute", "fixed"):
            raise ModelSyntaxError(f"{ctx}.kind must be 'revolute' or 'fixed'")
        origin, xyz, rpy = _origin(jr.get("origin", {}), f"{ctx}.origin")
        axis = None
        lower = upper = 0.0
        if kind == "revolute":
            axis = np.array(_vec(_require(jr, "axis", ctx), 3, f"{ctx}.axis"))
            limits = _require(jr, "limits", ctx)
            lower = float(_require(limits, "lower", f"{ctx}.limits"))
            upper = float(_require(limits, "upper", f"{ctx}.limits"))
        joints.append(
            Joint(
                name=jname,
                kind=kind,
                parent=_require(jr, "parent", ctx),
                child=_require(jr, "child", ctx),
                origin=origin,
                origin_xyz=xyz,
                origin_rpy=rpy,
                axis=axis,
                lower=lower,
                upper=upper,
                coupled_to=jr.get("coupled_to"),
            )
        )

    frames = []
    for i, fr in enumerate(doc.get("frames", [])):
        ctx = f"frames[{i}]"
        origin, xyz, rpy = _origin(fr.get("origin", {}), f"{ctx}.origin")
        frames.append(
            NamedFrame(
                name=_require(fr, "name", ctx),
                link=_require(fr, "link", ctx),
                origin=origin,
                origin_xyz=xyz,
                origin_rpy=rpy,
            )
        )

    fingers = []
    for i, gr in enumerate(doc.get("fingers", [])):
        ctx = f"fingers[{i}]"
        fingers.append(
            FingerSpec(
                name=_require(gr, "name", ctx),
                tip_frame=_require(gr, "tip_frame", ctx),
                role=_require(gr, "role", ctx),
            )
        )

    return HandModel(name, root, links, joints, frames, fingers)


def load_model(path) -> HandModel:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model(fh.read())


def serialize_model(model: HandModel) -> str:
    """Emit the model as JSON with keys in schema order (stable fixtures)."""
    doc = {
        "name": model.name,
        "root_link": model.root_link,
        "links": model.links,
        "joints": [],
        "frames": [],
        "fingers": [],
    }
    for j in model.joints:
        jr = {
            "name": j.name,
            "kind": j.kind,
            "parent": j.parent,
            "child": j.child,
            "origin": {"xyz": list(j.origin_xyz), "rpy": list(j.origin_rpy)},
        }
        if j.kind == "revolute":
            jr["axis"] = [float(v) for v in j.axis]
            jr["limits"] = {"lower": j.lower, "upper": j.upper}
            if j.coupled_to is not None:
                jr["coupled_to"] = j.coupled_to
        doc["joints"].append(jr)
    for f in model.frame_list:
        doc["frames"].append(
            {"name": f.name, "link": f.link, "origin": {"xyz": list(f.origin_xyz), "rpy": list(f.origin_rpy)}}
        )
    for g in model.fingers:
        doc["fingers"].append({"name": g.name, "tip_frame": g.tip_frame, "role": g.role})
    return json.dumps(doc, indent=2) + "\n"


# -- kinematics -------------------------------------------------------------


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _qrot(q, v):
    w, qx, qy, qz = q
    vx, vy, vz = v
    tx = 2.0 * (qy * vz - qz * vy)
    ty = 2.0 * (qz * vx - qx * vz)
    tz = 2.0 * (qx * vy - qy * vx)
    return (
        vx + w * tx + qy * tz - qz * ty,
        vy + w * ty + qz * tx - qx * tz,
        vz + w * tz + qx * ty - qy * tx,
    )


def fk_native(model: HandModel, q) -> FkNative:
    """FK over plain floats. ~100x faster than the Pose-based path; used by solvers."""
    q = model.check_q(q).tolist()
    nlinks = len(model.links)
    rot = [None] * nlinks
    pos = [None] * nlinks
    rot[model._root_idx] = (1.0, 0.0, 0.0, 0.0)
    pos[model._root_idx] = (0.0, 0.0, 0.0)
    axes = [None] * model.dof
    origins = [None] * model.dof
    for is_rev, pi, ci, qi, oq, ot, axis in model._fk_program:
        pq = rot[pi]
        base_q = _qmul(pq, oq)
        dx, dy, dz = _qrot(pq, ot)
        px, py, pz = pos[pi]
        base_t = (px + dx, py + dy, pz + dz)
        if is_rev:
            axes[qi] = _qrot(base_q, axis)
            origins[qi] = base_t
            half = 0.5 * q[qi]
            s = math.sin(half)
            ax, ay, az = axis
            rot[ci] = _qmul(base_q, (math.cos(half), s * ax, s * ay, s * az))
        else:
            rot[ci] = base_q
        pos[ci] = base_t
    frot = {}
    fpos = {}
    for name, li, oq, ot in model._frame_program:
        lq = rot[li]
        frot[name] = _qmul(lq, oq)
        dx, dy, dz = _qrot(lq, ot)
        px, py, pz = pos[li]
        fpos[name] = (px + dx, py + dy, pz + dz)
    return FkNative(frot, fpos, axes, origins)


def compute_fk(model: HandModel, q) -> FkResult:
    """Forward kinematics with per-joint world axes, for Jacobian assembly."""
    native = fk_native(model, q)
    frames = {
        name: Pose(np.array(native.frame_rot[name]), np.array(native.frame_pos[name]))
        for name in native.frame_rot
    }
    ancestors = {f.name: model._link_ancestors[f.link] for f in model.frame_list}
    return FkResult(
        frames,
        np.array(native.joint_axes, dtype=float).reshape(model.dof, 3),
        np.array(native.joint_origins, dtype=float).reshape(model.dof, 3),
        ancestors,
    )


def forward_kinematics(model: HandModel, q) -> dict:
    """Poses of all named frames in root (palm) coordinates."""
    return compute_fk(model, q).frames


def forward_kinematics_batch(model: HandModel, Q: np.ndarray) -> dict:
    """Frame poses for a batch of configurations.

    Q has shape (B, dof); returns {frame: (quat (B, 4), pos (B, 3))}.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != model.dof:
        raise ValueError(f"expected (B, {model.dof}) batch, got {Q.shape}")
    B = Q.shape[0]
    ident_q = np.zeros((B, 4))
    ident_q[:, 0] = 1.0
    link_q = {model.root_link: ident_q}
    link_t = {model.root_link: np.zeros((B, 3))}
    for j in model._fk_order:
        pq, pt = link_q[j.parent], link_t[j.parent]
        oq = np.broadcast_to(j.origin.rotation, (B, 4))
        base_q = quat_multiply(pq, oq)
        base_t = pt + quat_rotate(pq, np.broadcast_to(j.origin.translation, (B, 3)))
        if j.kind == "revolute":
            half = 0.5 * Q[:, model._q_index[j.name]]
            jq = np.empty((B, 4))
            jq[:, 0] = np.cos(half)
            jq[:, 1:] = np.sin(half)[:, None] * j.axis
            link_q[j.child] = quat_multiply(base_q, jq)
            link_t[j.child] = base_t
        else:
            link_q[j.child] = base_q
            link_t[j.child] = base_t
    out = {}
    for f in model.frame_list:
        lq, lt = link_q[f.link], link_t[f.link]
        fq = quat_multiply(lq, np.broadcast_to(f.origin.rotation, (B, 4)))
        ft = lt + quat_rotate(lq, np.broadcast_to(f.origin.translation, (B, 3)))
        out[f.name] = (fq, ft)
    return out


def task_vector(model: HandModel, q, origin_frame: str, target_frame: str) -> np.ndarray:
    """Vector from origin_frame to target_frame, expressed in origin_frame coordinates."""
    native = fk_native(model, q)
    for name in (origin_frame, target_frame):
        if name not in native.frame_rot:
            raise KeyError(f"unknown frame {name!r} in model {model.name!r}")
    w, x, y, z = native.frame_rot[origin_frame]
    ox, oy, oz = native.frame_pos[origin_frame]
    tx, ty, tz = native.frame_pos[target_frame]
    return np.array(_qrot((w, -x, -y, -z), (tx - ox, ty - oy, tz - oz)))


def clamp_to_limits(model: HandModel, q):
    """Componentwise clamp into joint limits. Idempotent."""
    values = np.clip(model.check_q(q), model.lower, model.upper)
    if isinstance(q, JointVector):
        return JointVector(q.model, values)
    return values
