"""Kinematic retargeting of human-hand joint angles onto a robot hand.

The mapping works in task space: a configured set of inter-fingertip (and
palm-to-fingertip) vectors is measured on the human hand, rescaled by a
distance-dependent switching rule, and a robot configuration is solved for
whose matching vectors reproduce the rescaled targets. Near-contact vectors
get large weights and tiny target lengths so pinches close crisply; vectors
between two fingers that are both pinching the thumb get pushed apart to a
minimum separation instead, which keeps multi-finger grasps from jamming.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .geometry import quat_conjugate, quat_rotate
from .hand_model import HandModel, JointVector, _qrot, fk_native, forward_kinematics_batch

CLASS_NORMAL = "NORMAL"
CLASS_S1 = "S1"
CLASS_S2 = "S2"

KIND_THUMB_PRIMARY = "thumb_primary"
KIND_PRIMARY_PRIMARY = "primary_primary"
KIND_PALM_FINGER = "palm_finger"
_KINDS = (KIND_THUMB_PRIMARY, KIND_PRIMARY_PRIMARY, KIND_PALM_FINGER)


@dataclass(frozen=True)
class SolverSettings:
    max_iters: int = 150
    cost_tol: float = 1e-10
    step_tol: float = 1e-10
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        for name in ("cost_tol", "step_tol", "fd_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class VectorSpec:
    """One retargeting vector: a frame pair on each hand plus its kind."""

    id: str
    kind: str
    human: tuple  # (origin frame, target frame) on the human model
    robot: tuple  # (origin frame, target frame) on the robot model

    def __post_init__(self):
        if not self.id:
            raise ValueError("vector spec id must be non-empty")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown vector kind {self.kind!r}")
        for attr in ("human", "robot"):
            pair = getattr(self, attr)
            if len(pair) != 2 or not all(isinstance(f, str) and f for f in pair):
                raise ValueError(f"{attr} frame pair must be two frame names")
            object.__setattr__(self, attr, tuple(pair))


@dataclass(frozen=True)
class VectorState:
    """Classified measurement of one vector on the human hand."""

    spec_id: str
    kind: str
    d: float  # vector length, meters
    r_hat: np.ndarray  # unit direction in the origin frame (zero if d == 0)
    label: str  # CLASS_NORMAL | CLASS_S1 | CLASS_S2


@dataclass(frozen=True)
class RetargetConfig:
    epsilon: float = 0.05  # projection threshold, meters
    beta: float = 1.6  # human-to-robot length scale
    eta1: float = 1e-4  # pinch closing distance, meters
    eta2: float = 3e-2  # pinched-pair separation distance, meters
    gamma: float = 2.5e-3  # regularizer weight toward zero angles
    weight_normal: float = 1.0
    weight_s1: float = 200.0
    weight_s2: float = 400.0
    filter_alpha: float = 0.4  # output low-pass blend per frame
    solver: SolverSettings = field(default_factory=SolverSettings)
    vector_specs: tuple = ()

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < self.eta1 < self.eta2:
            raise ValueError("eta thresholds must satisfy 0 < eta1 < eta2")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        for name in ("weight_normal", "weight_s1", "weight_s2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.filter_alpha <= 1:
            raise ValueError("filter_alpha must lie in (0, 1]")
        object.__setattr__(self, "vector_specs", tuple(self.vector_specs))
        seen = set()
        for spec in self.vector_specs:
            if spec.id in seen:
                raise ValueError(f"duplicate vector spec id {spec.id!r}")
            seen.add(spec.id)


@dataclass
class SolveState:
    """Per-stream solver memory: warm start plus output filter state."""

    q_a: np.ndarray | None = None  # previous solution, reduced coordinates
    filter_y: np.ndarray | None = None  # low-pass state, full robot dof
    initialized: bool = False


# -- configuration I/O -------------------------------------------------------


def config_to_dict(config: RetargetConfig) -> dict:
    return {
        "epsilon": config.epsilon,
        "beta": config.beta,
        "eta1": config.eta1,
        "eta2": config.eta2,
        "gamma": config.gamma,
        "weight_normal": config.weight_normal,
        "weight_s1": config.weight_s1,
        "weight_s2": config.weight_s2,
        "filter_alpha": config.filter_alpha,
        "solver": {
            "max_iters": config.solver.max_iters,
            "cost_tol": config.solver.cost_tol,
            "step_tol": config.solver.step_tol,
            "fd_step": config.solver.fd_step,
        },
        "vector_specs": [
            {
                "id": s.id,
                "kind": s.kind,
                "human": list(s.human),
                "robot": list(s.robot),
            }
            for s in config.vector_specs
        ],
    }


def config_from_dict(doc: dict) -> RetargetConfig:
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    base = RetargetConfig()
    solver_doc = doc.get("solver", {})
    if not isinstance(solver_doc, dict):
        raise ValueError("config solver section must be an object")
    solver = SolverSettings(
        max_iters=int(solver_doc.get("max_iters", base.solver.max_iters)),
        cost_tol=float(solver_doc.get("cost_tol", base.solver.cost_tol)),
        step_tol=float(solver_doc.get("step_tol", base.solver.step_tol)),
        fd_step=float(solver_doc.get("fd_step", base.solver.fd_step)),
    )
    specs = []
    for raw in doc.get("vector_specs", []):
        if not isinstance(raw, dict):
            raise ValueError("each vector spec must be an object")
        try:
            specs.append(
                VectorSpec(
                    id=str(raw["id"]),
                    kind=str(raw["kind"]),
                    human=tuple(raw["human"]),
                    robot=tuple(raw["robot"]),
                )
            )
        except KeyError as e:
            raise ValueError(f"vector spec missing key {e.args[0]!r}") from None
    kwargs = {}
    for name in (
        "epsilon",
        "beta",
        "eta1",
        "eta2",
        "gamma",
        "weight_normal",
        "weight_s1",
        "weight_s2",
        "filter_alpha",
    ):
        if name in doc:
            kwargs[name] = float(doc[name])
    return RetargetConfig(solver=solver, vector_specs=tuple(specs), **kwargs)


def save_config(config: RetargetConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")


def load_config(path) -> RetargetConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def default_vector_specs(human: HandModel, robot: HandModel) -> tuple:
    """Standard vector set: each primary tip to the thumb tip, primary pairs,
    and palm to every fingertip, restricted to fingers both hands share."""
    robot_fingers = {f.name for f in robot.fingers}
    primaries = [
        f.name for f in human.fingers if f.role == "primary" and f.name in robot_fingers
    ]
    thumbs = [f.name for f in human.fingers if f.role == "thumb" and f.name in robot_fingers]
    if not thumbs or not primaries:
        raise ValueError("models share no thumb/primary fingers to build vectors from")
    thumb = thumbs[0]

    def tip(model, finger):
        return model.finger(finger).tip_frame

    def palm_frame(model):
        for f in model.frame_list:
            if f.link == model.root_link:
                return f.name
        raise ValueError(f"model {model.name!r} has no frame on its root link")

    specs = [
        VectorSpec(
            id=f"{name}-{thumb}",
            kind=KIND_THUMB_PRIMARY,
            human=(tip(human, name), tip(human, thumb)),
            robot=(tip(robot, name), tip(robot, thumb)),
        )
        for name in primaries
    ]
    for i, a in enumerate(primaries):
        for b in primaries[i + 1 :]:
            specs.append(
                VectorSpec(
                    id=f"{a}-{b}",
                    kind=KIND_PRIMARY_PRIMARY,
                    human=(tip(human, a), tip(human, b)),
                    robot=(tip(robot, a), tip(robot, b)),
                )
            )
    hp, rp = palm_frame(human), palm_frame(robot)
    for name in [thumb] + primaries:
        specs.append(
            VectorSpec(
                id=f"palm-{name}",
                kind=KIND_PALM_FINGER,
                human=(hp, tip(human, name)),
                robot=(rp, tip(robot, name)),
            )
        )
    return tuple(specs)


def default_config(human: HandModel, robot: HandModel) -> RetargetConfig:
    return RetargetConfig(vector_specs=default_vector_specs(human, robot))


def validate_config_frames(config: RetargetConfig, human: HandModel, robot: HandModel) -> None:
    """Check every configured frame resolves in its model. Raises KeyError."""
    for spec in config.vector_specs:
        for model, pair in ((human, spec.human), (robot, spec.robot)):
            for name in pair:
                if name not in model.frames:
                    raise KeyError(
                        f"vector {spec.id!r}: unknown frame {name!r} in model {model.name!r}"
                    )


# -- classification ----------------------------------------------------------


def _native_vector(native, origin: str, target: str, model_name: str):
    try:
        ow, oxyz = native.frame_rot[origin], native.frame_pos[origin]
        txyz = native.frame_pos[target]
    except KeyError as e:
        raise KeyError(f"unknown frame {e.args[0]!r} in model {model_name!r}") from None
    w, x, y, z = ow
    ox, oy, oz = oxyz
    tx, ty, tz = txyz
    return _qrot((w, -x, -y, -z), (tx - ox, ty - oy, tz - oz))


def classify_vectors(human: HandModel, q_h, config: RetargetConfig) -> list:
    """Measure and label every configured vector on the human hand.

    Two passes: first, fingertip-to-thumb vectors shorter than epsilon become
    S1 (pinch). Then a vector between two primary fingertips becomes S2 only
    when it is short and both of its endpoints already hold an S1 pinch.
    Everything else, palm vectors included, stays NORMAL.
    """
    native = fk_native(human, q_h)
    measured = []
    s1_tips = set()
    for spec in config.vector_specs:
        rx, ry, rz = _native_vector(native, spec.human[0], spec.human[1], human.name)
        d = (rx * rx + ry * ry + rz * rz) ** 0.5
        r_hat = np.array((rx / d, ry / d, rz / d)) if d > 0 else np.zeros(3)
        measured.append((spec, d, r_hat))
        if spec.kind == KIND_THUMB_PRIMARY and d <= config.epsilon:
            s1_tips.add(spec.human[0])

    states = []
    for spec, d, r_hat in measured:
        label = CLASS_NORMAL
        if spec.kind == KIND_THUMB_PRIMARY and d <= config.epsilon:
            label = CLASS_S1
        elif (
            spec.kind == KIND_PRIMARY_PRIMARY
            and d <= config.epsilon
            and spec.human[0] in s1_tips
            and spec.human[1] in s1_tips
        ):
            label = CLASS_S2
        states.append(VectorState(spec.id, spec.kind, d, r_hat, label))
    if __debug__:
        for st in states:
            assert st.label != CLASS_S2 or st.kind == KIND_PRIMARY_PRIMARY
    return states


def switching_weight(state: VectorState, config: RetargetConfig) -> float:
    """Residual weight for one classified vector."""
    if state.label == CLASS_S1:
        return config.weight_s1
    if state.label == CLASS_S2:
        return config.weight_s2
    return config.weight_normal


def distancing(state: VectorState, config: RetargetConfig) -> float:
    """Target length for one classified vector, meters."""
    if state.label == CLASS_S1:
        return config.eta1
    if state.label == CLASS_S2:
        return config.eta2
    return config.beta * state.d


# -- cost and gradient -------------------------------------------------------


def expand_coupling(model: HandModel, q_reduced) -> np.ndarray:
    """Fill follower joints from their masters: reduced -> full coordinates."""
    q_reduced = np.asarray(q_reduced, dtype=float)
    if q_reduced.shape != (model.reduced_dof,):
        raise ValueError(
            f"expected {model.reduced_dof} reduced values for {model.name!r}, got {q_reduced.shape}"
        )
    q_full = np.empty(model.dof)
    q_full[model.free_indices] = q_reduced
    for follower, master in model.coupling.items():
        q_full[follower] = q_full[master]
    return q_full


def reduce_coupling(model: HandModel, q_full) -> np.ndarray:
    """Drop follower joints: full -> reduced coordinates."""
    q_full = model.check_q(q_full)
    return q_full[model.free_indices].copy()


class _Targets:
    """Weights, target vectors, and robot frame paths fixed for one q_h."""

    __slots__ = ("specs", "weights", "targets", "paths")

    def __init__(self, states, config: RetargetConfig, robot: HandModel):
        self.specs = []
        self.weights = []
        self.targets = []
        self.paths = []
        by_id = {s.id: s for s in config.vector_specs}
        for st in states:
            spec = by_id[st.spec_id]
            self.specs.append(spec)
            self.weights.append(switching_weight(st, config))
            self.targets.append(distancing(st, config) * st.r_hat)
            anc_o = set(robot.frame_ancestors(spec.robot[0]))
            anc_t = set(robot.frame_ancestors(spec.robot[1]))
            plus = tuple(sorted(anc_t - anc_o))
            minus = tuple(sorted(anc_o - anc_t))
            self.paths.append((plus, minus))


def _residual_cost(targets: _Targets, native, gamma: float, q_full, robot_name: str) -> float:
    c = 0.0
    for spec, w, tgt in zip(targets.specs, targets.weights, targets.targets):
        rx, ry, rz = _native_vector(native, spec.robot[0], spec.robot[1], robot_name)
        ex, ey, ez = rx - tgt[0], ry - tgt[1], rz - tgt[2]
        c += 0.5 * w * (ex * ex + ey * ey + ez * ez)
    return c + gamma * float(np.dot(q_full, q_full))


def _cost_and_gradient(targets: _Targets, config, robot: HandModel, q_reduced):
    q_full = expand_coupling(robot, q_reduced)
    native = fk_native(robot, q_full)
    axes, origins = native.joint_axes, native.joint_origins
    grad_full = 2.0 * config.gamma * q_full
    c = config.gamma * float(np.dot(q_full, q_full))
    for spec, w, tgt, (plus, minus) in zip(
        targets.specs, targets.weights, targets.targets, targets.paths
    ):
        o_name, t_name = spec.robot
        qw, qx, qy, qz = native.frame_rot[o_name]
        conj = (qw, -qx, -qy, -qz)
        ox, oy, oz = native.frame_pos[o_name]
        tx, ty, tz = native.frame_pos[t_name]
        rx, ry, rz = _qrot(conj, (tx - ox, ty - oy, tz - oz))
        ex, ey, ez = rx - tgt[0], ry - tgt[1], rz - tgt[2]
        c += 0.5 * w * (ex * ex + ey * ey + ez * ez)
        for sign, path in ((w, plus), (-w, minus)):
            for j in path:
                ax, ay, az = axes[j]
                jx, jy, jz = origins[j]
                # world-frame velocity of the target point under joint j
                vx, vy, vz = tx - jx, ty - jy, tz - jz
                wx = ay * vz - az * vy
                wy = az * vx - ax * vz
                wz = ax * vy - ay * vx
                dx, dy, dz = _qrot(conj, (wx, wy, wz))
                grad_full[j] += sign * (ex * dx + ey * dy + ez * dz)
    g = grad_full
    for follower, master in robot.coupling.items():
        g[master] += g[follower]
    return c, g[robot.free_indices]


def cost(q_h, q_a_reduced, config: RetargetConfig, human: HandModel, robot: HandModel) -> float:
    """Retargeting cost at reduced robot coordinates, classified from q_h."""
    states = classify_vectors(human, q_h, config)
    targets = _Targets(states, config, robot)
    q_full = expand_coupling(robot, q_a_reduced)
    native = fk_native(robot, q_full)
    return _residual_cost(targets, native, config.gamma, q_full, robot.name)


def cost_gradient(
    q_h, q_a_reduced, config: RetargetConfig, human: HandModel, robot: HandModel
) -> np.ndarray:
    """Analytic gradient of cost with respect to the reduced coordinates."""
    states = classify_vectors(human, q_h, config)
    targets = _Targets(states, config, robot)
    return _cost_and_gradient(targets, config, robot, np.asarray(q_a_reduced, float))[1]


def cost_batch(
    q_h, Q_reduced, config: RetargetConfig, human: HandModel, robot: HandModel
) -> np.ndarray:
    """Vectorized cost over a (B, reduced_dof) batch of robot configurations."""
    Q_reduced = np.asarray(Q_reduced, dtype=float)
    if Q_reduced.ndim != 2 or Q_reduced.shape[1] != robot.reduced_dof:
        raise ValueError(f"expected (B, {robot.reduced_dof}) batch, got {Q_reduced.shape}")
    states = classify_vectors(human, q_h, config)
    targets = _Targets(states, config, robot)
    B = Q_reduced.shape[0]
    Q_full = np.empty((B, robot.dof))
    Q_full[:, robot.free_indices] = Q_reduced
    for follower, master in robot.coupling.items():
        Q_full[:, follower] = Q_full[:, master]
    frames = forward_kinematics_batch(robot, Q_full)
    c = config.gamma * np.sum(Q_full * Q_full, axis=1)
    for spec, w, tgt in zip(targets.specs, targets.weights, targets.targets):
        oq, op = frames[spec.robot[0]]
        _, tp = frames[spec.robot[1]]
        r = quat_rotate(quat_conjugate(oq), tp - op)
        diff = r - tgt
        c += 0.5 * w * np.sum(diff * diff, axis=1)
    return c


# -- solving -----------------------------------------------------------------


class _SmallStep(Exception):
    pass


def _solve_once(x0, targets, config: RetargetConfig, robot: HandModel, lo, hi):
    """One SLSQP descent from x0. Returns (x, cost, iterations, converged)."""

    def objective(x):
        return _cost_and_gradient(targets, config, robot, x)

    trace = {"iters": 0, "last_x": None}

    def callback(xk):
        prev = trace["last_x"]
        trace["iters"] += 1
        trace["last_x"] = xk.copy()
        if prev is not None and np.max(np.abs(xk - prev)) < config.solver.step_tol:
            raise _SmallStep

    converged = True
    with warnings.catch_warnings():
        # scipy's SLSQP clips trial points to the bounds itself and warns; the
        # clipped iterate is exactly what we want, so silence the chatter
        warnings.filterwarnings("ignore", message="Values in x were outside bounds")
        try:
            res = minimize(
                objective,
                x0,
                jac=True,
                method="SLSQP",
                bounds=list(zip(lo, hi)),
                callback=callback,
                options={"maxiter": config.solver.max_iters, "ftol": config.solver.cost_tol},
            )
            x = np.asarray(res.x, dtype=float)
            # status 0 is clean convergence; 9 is the iteration cap
            converged = bool(res.success)
        except _SmallStep:
            x = trace["last_x"]

    x = np.clip(x, lo, hi)
    best_cost, _ = _cost_and_gradient(targets, config, robot, x)
    # never return worse than the last accepted iterate
    if trace["last_x"] is not None and not np.array_equal(trace["last_x"], x):
        alt = np.clip(trace["last_x"], lo, hi)
        alt_cost, _ = _cost_and_gradient(targets, config, robot, alt)
        if alt_cost < best_cost:
            x, best_cost = alt, alt_cost
    return x, float(best_cost), trace["iters"], converged


def solve_retarget(
    q_h,
    state: SolveState,
    config: RetargetConfig,
    human: HandModel,
    robot: HandModel,
):
    """Minimize the retargeting cost for one human pose.

    Warm-starts from the previous solution held in state; a cold first call
    descends from both the zero pose and the mid-range pose and keeps the
    lower-cost result, which avoids the worst local minima. Honors joint
    limits on the reduced coordinates and expands the result through the
    coupling. Returns (JointVector, diagnostics).
    """
    t0 = time.perf_counter()
    q_h = human.check_q(q_h)
    if not np.all(np.isfinite(q_h)):
        raise ValueError("human joint vector contains non-finite values")

    states = classify_vectors(human, q_h, config)
    targets = _Targets(states, config, robot)
    lo = robot.lower[robot.free_indices]
    hi = robot.upper[robot.free_indices]
    if state.initialized and state.q_a is not None:
        starts = [np.clip(np.asarray(state.q_a, dtype=float), lo, hi)]
    else:
        starts = [np.clip(np.zeros(robot.reduced_dof), lo, hi), 0.5 * (lo + hi)]

    x = best_cost = converged = None
    iters_total = 0
    for x0 in starts:
        xs, cs, iters, conv = _solve_once(x0, targets, config, robot, lo, hi)
        iters_total += iters
        if best_cost is None or cs < best_cost:
            x, best_cost, converged = xs, cs, conv

    state.q_a = x.copy()
    state.initialized = True
    q_full = expand_coupling(robot, x)
    diagnostics = {
        "cost": float(best_cost),
        "iters": int(iters_total),
        "solve_time": time.perf_counter() - t0,
        "converged": bool(converged),
    }
    return JointVector(robot.name, q_full), diagnostics


# -- output filtering --------------------------------------------------------


def lowpass_step(y, x, alpha: float) -> np.ndarray:
    """One first-order low-pass update: y + alpha * (x - y).

    Pass y=None for the first sample; the filter initializes to x.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    if y is None:
        return x.copy()
    y = np.asarray(y, dtype=float)
    if y.shape != x.shape:
        raise ValueError(f"filter state shape {y.shape} does not match input {x.shape}")
    return y + alpha * (x - y)


def filter_command(state: SolveState, q_full, alpha: float) -> np.ndarray:
    """Stateful low-pass over successive solver outputs."""
    state.filter_y = lowpass_step(state.filter_y, q_full, alpha)
    return state.filter_y.copy()
