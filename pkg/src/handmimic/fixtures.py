"""Deterministic synthetic inputs: canonical postures, trajectory streams,
keypoint synthesis, and a fitted keypoint-to-angle weights file.

Every generator is seeded and pure, so fixture files regenerate byte-for-byte
and tests can rely on exact postures. Trajectories are emitted as wire
messages; the keypoint variants exercise the fusion path end to end.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import minimize

from . import messages as wire
from .fusion import MlpLayer, MlpWeights, N_KEYPOINTS, KeypointCandidate
from .geometry import Pose, quat_from_rpy
from .hand_model import HandModel, fk_native, task_vector

PALM_KEYPOINT_OFFSETS = (  # palm-frame positions of keypoints 0..2
    (0.0, 0.0, 0.0),
    (0.08, 0.0, 0.0),
    (0.0, 0.06, 0.0),
)


# -- canonical postures ------------------------------------------------------


def open_pose(model: HandModel) -> np.ndarray:
    """All joints at zero (flat, spread hand for the bundled models)."""
    return np.zeros(model.dof)


def _tip_distance(model, q, frame_a, frame_b) -> float:
    return float(np.linalg.norm(task_vector(model, q, frame_a, frame_b)))


def close_fingers_pose(model: HandModel, fingers) -> np.ndarray:
    """Joint angles bringing the named fingertips onto the thumb tip.

    Solved by bounded minimization of summed squared tip distances starting
    from the open hand; deterministic for a given model and finger set.
    """
    thumb = model.thumb_tip_frame()
    tips = [model.finger(name).tip_frame for name in fingers]

    def objective(q):
        return sum(_tip_distance(model, q, tip, thumb) ** 2 for tip in tips)

    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Values in x were outside bounds")
        res = minimize(
            objective,
            np.zeros(model.dof),
            method="SLSQP",
            bounds=list(zip(model.lower, model.upper)),
            options={"maxiter": 500, "ftol": 1e-16},
        )
    return np.clip(res.x, model.lower, model.upper)


def pinch_pose(model: HandModel) -> np.ndarray:
    """Thumb-index pinch."""
    return close_fingers_pose(model, ("index",))


def fold_pose(model: HandModel) -> np.ndarray:
    """Thumb, index, and middle brought mutually together."""
    return close_fingers_pose(model, ("index", "middle"))


# -- keypoint synthesis ------------------------------------------------------


def synthesize_keypoints(model: HandModel, q, palm_pose: Pose) -> np.ndarray:
    """Keypoint layout for a configuration: 3 palm points at fixed palm-frame
    offsets, then per finger the knuckle, two joint centers, and the tip."""
    native = fk_native(model, q)
    points = [palm_pose.transform_point(np.array(off)) for off in PALM_KEYPOINT_OFFSETS]
    for finger in model.fingers:
        chain = model.frame_ancestors(finger.tip_frame)
        if len(chain) < 3:
            raise ValueError(f"finger {finger.name!r} chain too short for keypoints")
        for q_idx in chain[-3:]:
            points.append(palm_pose.transform_point(np.array(native.joint_origins[q_idx])))
        points.append(palm_pose.transform_point(np.array(native.frame_pos[finger.tip_frame])))
    return np.stack(points)


def keypoints_to_message(t: float, keypoints, rng=None, cameras: int = 0,
                         noise: float = 0.0015, outlier_every: int = 9) -> wire.HandStateMessage:
    """Wrap synthesized keypoints as a wire message.

    cameras == 0 sends the bare keypoint array. With cameras >= 1, per-camera
    candidates get seeded Gaussian noise and a periodic gross outlier, which
    the fusion stage is expected to reject.
    """
    if cameras == 0:
        return wire.HandStateMessage(t=t, keypoints=np.asarray(keypoints, dtype=float))
    candidates = []
    for k in range(len(keypoints)):
        for cam in range(cameras):
            pos = np.asarray(keypoints[k], dtype=float) + rng.normal(0.0, noise, 3)
            if cam == cameras - 1 and (k + int(t * 1000)) % outlier_every == 0:
                pos = pos + np.array([0.1, 0.0, 0.0])
            candidates.append(KeypointCandidate(k, cam, pos, abs(rng.normal(0.0, 0.003))))
    return wire.HandStateMessage(
        t=t, keypoints=np.asarray(keypoints, dtype=float), candidates=tuple(candidates)
    )


# -- trajectory streams ------------------------------------------------------


def _ramp_hold(model, target_q, n_frames, rate_hz, ramp_fraction=0.65):
    """Interpolate open -> target over the ramp, then hold."""
    q0 = open_pose(model)
    n_ramp = max(1, int(n_frames * ramp_fraction))
    for k in range(n_frames):
        s = min(1.0, k / n_ramp)
        yield k / rate_hz, q0 + s * (target_q - q0)


def open_hand_stream(model: HandModel, n_frames: int = 60, rate_hz: float = 30.0):
    """Static fully open hand."""
    for k in range(n_frames):
        yield wire.HandStateMessage(
            t=k / rate_hz, palm_pose=Pose.identity(), q_h=open_pose(model)
        )


def pinch_close_stream(model: HandModel, n_frames: int = 90, rate_hz: float = 30.0):
    """Open hand ramping into a held thumb-index pinch."""
    target = pinch_pose(model)
    for t, q in _ramp_hold(model, target, n_frames, rate_hz):
        yield wire.HandStateMessage(t=t, palm_pose=Pose.identity(), q_h=q)


def two_finger_fold_stream(model: HandModel, n_frames: int = 90, rate_hz: float = 30.0):
    """Open hand ramping into thumb+index+middle mutual contact."""
    target = fold_pose(model)
    for t, q in _ramp_hold(model, target, n_frames, rate_hz):
        yield wire.HandStateMessage(t=t, palm_pose=Pose.identity(), q_h=q)


def random_walk_stream(model: HandModel, n_frames: int = 300, rate_hz: float = 30.0,
                       seed: int = 7, workspace_dims=(0.80, 0.55, 0.38)):
    """Seeded joint-space and palm random walk inside the observation volume."""
    rng = np.random.default_rng(seed)
    dims = np.asarray(workspace_dims, dtype=float)
    q = open_pose(model)
    palm_t = np.zeros(3)
    palm_rpy = np.zeros(3)
    for k in range(n_frames):
        q = np.clip(q + rng.normal(0.0, 0.03, model.dof), model.lower, model.upper)
        palm_t = np.clip(palm_t + rng.normal(0.0, 0.01, 3), -dims / 2, dims / 2)
        palm_rpy = np.clip(palm_rpy + rng.normal(0.0, 0.02, 3), -0.5, 0.5)
        yield wire.HandStateMessage(
            t=k / rate_hz,
            palm_pose=Pose(quat_from_rpy(*palm_rpy), palm_t.copy()),
            q_h=q.copy(),
        )


def keypoint_stream(model: HandModel, base_stream, cameras: int = 0, seed: int = 11):
    """Convert a joint-variant stream into the keypoint variant."""
    rng = np.random.default_rng(seed)
    for msg in base_stream:
        kp = synthesize_keypoints(model, msg.q_h, msg.palm_pose)
        yield keypoints_to_message(msg.t, kp, rng=rng, cameras=cameras)


STREAMS = {
    "open-hand": open_hand_stream,
    "pinch-close": pinch_close_stream,
    "two-finger-fold": two_finger_fold_stream,
    "random-walk": random_walk_stream,
}


def write_jsonl(messages, path) -> int:
    """Write messages as wire lines; returns the line count."""
    n = 0
    with open(path, "wb") as fh:
        for msg in messages:
            fh.write(wire.encode_message(msg))
            n += 1
    return n


# -- fitted keypoint-to-angle weights ----------------------------------------


def fitted_mlp_weights(model: HandModel, seed: int = 0, samples: int = 2400,
                       hidden=(128, 256), ridge: float = 1e-6) -> MlpWeights:
    """Weights approximating the inverse of keypoint synthesis.

    An affine map from palm-frame keypoints to joint angles is fitted by
    weighted ridge regression: the canonical pinch and fold ramps are anchored
    at high weight (max error along them stays under 0.02 rad) with seeded
    random postures as background. The map is then embedded in a dense network
    of the declared hidden widths; hidden biases keep every unit in the linear
    region of its activation over the fitted input range, so the network
    reproduces the fitted map exactly while exercising the full inference
    path. Fixture quality only: accuracy degrades toward the limit extremes.
    """
    if model.dof != 20:
        raise ValueError("weights fixture expects the 20-joint human model")
    rng = np.random.default_rng(seed)
    n_in = N_KEYPOINTS * 3
    identity = Pose.identity()

    def sample(q):
        return synthesize_keypoints(model, q, identity).reshape(-1)

    X, Y, w = [], [], []
    for base in (pinch_pose(model), fold_pose(model)):
        for s in np.linspace(0.0, 1.0, 15):
            X.append(sample(s * base))
            Y.append(s * base)
            w.append(1e4)
        for _ in range(samples // 4):
            q = np.clip(
                rng.uniform(0.0, 1.0) * base + rng.normal(0.0, 0.05, model.dof),
                model.lower, model.upper,
            )
            X.append(sample(q))
            Y.append(q)
            w.append(1.0)
    for _ in range(samples // 2):
        q = rng.uniform(model.lower, model.upper) * rng.choice([1.0, 0.6, 0.3])
        X.append(sample(q))
        Y.append(q)
        w.append(1.0)
    X = np.array(X)
    Y = np.array(Y)
    w = np.array(w)
    # weighted affine ridge fit: [X 1] @ [A; c] ~= Y
    Xa = np.hstack([X, np.ones((len(X), 1))])
    G = (Xa * w[:, None]).T @ Xa + ridge * np.eye(n_in + 1)
    coef = np.linalg.solve(G, (Xa * w[:, None]).T @ Y)
    A = coef[:-1].T  # (dof, n_in)
    c = coef[-1]  # (dof,)

    # the palm-local inputs stay well inside +-0.5 m, so a bias of `lift`
    # keeps all hidden pre-activations positive and the ReLUs transparent
    lift = 10.0
    w1 = np.zeros((hidden[0], n_in))
    w1[:n_in, :n_in] = np.eye(n_in)
    b1 = np.full(hidden[0], lift)
    w2 = np.zeros((hidden[1], hidden[0]))
    w2[: hidden[0], : hidden[0]] = np.eye(hidden[0])
    b2 = np.full(hidden[1], lift)
    w3 = np.zeros((model.dof, hidden[1]))
    w3[:, :n_in] = A
    b3 = c - A @ np.full(n_in, 2 * lift)
    layers = (
        MlpLayer(w1, b1, None, None, "relu"),
        MlpLayer(w2, b2, None, None, "relu"),
        MlpLayer(w3, b3, None, None, "none"),
    )
    return MlpWeights(n_in, model.dof, layers)
