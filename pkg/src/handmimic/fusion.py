"""Fusing noisy multi-view 3D keypoint candidates into stable hand state.

Per keypoint and frame, candidate positions from any number of cameras pass a
confidence gate, then a softmax over distances to the previous fused position
rejects outliers. Survivors enter a short rolling buffer whose geometric
median is the fused position. Separate helpers estimate a palm frame from
three keypoints, crop a point cloud to a hand-centered box, score test-time
augmentation spread, and run a small dense network mapping the 23 fused
keypoints to 20 joint angles.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, matrix_to_quat

N_KEYPOINTS = 23
COINCIDENCE_TOL = 1e-12  # iterate-on-data-point threshold in the median


@dataclass(frozen=True)
class KeypointCandidate:
    """One camera's estimate of one keypoint."""

    keypoint_id: int
    camera_id: int
    position: np.ndarray  # meters
    confidence: float  # standard deviation, meters; lower is better

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.position.shape != (3,):
            raise ValueError("candidate position must be a 3-vector")
        if not np.all(np.isfinite(self.position)):
            raise ValueError("candidate position must be finite")
        if not 0 <= self.keypoint_id < N_KEYPOINTS:
            raise ValueError(f"keypoint id {self.keypoint_id} outside 0..{N_KEYPOINTS - 1}")
        if not (np.isfinite(self.confidence) and self.confidence >= 0):
            raise ValueError("confidence must be a non-negative number")


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 500.0  # softmax sharpness, 1/meters
    p_min: float = 0.2  # acceptance probability threshold
    confidence_max: float = 0.01  # TTA std gate, meters
    buffer_capacity: int = 5
    median_tol: float = 1e-9  # meters
    median_max_iters: int = 100

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.p_min < 1:
            raise ValueError("p_min must lie in [0, 1)")
        if self.confidence_max <= 0:
            raise ValueError("confidence_max must be positive")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be at least 1")
        if self.median_tol <= 0 or self.median_max_iters < 1:
            raise ValueError("median settings must be positive")


class RollingBuffer:
    """FIFO of the most recent accepted positions for one keypoint."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, position) -> None:
        position = np.asarray(position, dtype=float)
        if position.shape != (3,):
            raise ValueError("buffer stores 3-vectors")
        self._items.append(position.copy())

    def points(self) -> np.ndarray:
        if not self._items:
            return np.empty((0, 3))
        return np.stack(list(self._items))

    def __len__(self) -> int:
        return len(self._items)


# -- candidate selection -----------------------------------------------------


def softmax_probabilities(distances, alpha: float = 500.0) -> np.ndarray:
    """Probabilities favoring small distances: exp(-alpha*(d - min d)), normalized."""
    d = np.asarray(distances, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("distances must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    z = np.exp(-alpha * (d - d.min()))
    return z / z.sum()


def select_candidates(candidates, previous_position, config: FusionConfig) -> np.ndarray:
    """Gate candidates on confidence, then on softmax probability of their
    distance to the previous fused position. Returns accepted positions (k, 3).

    With no previous position (bootstrap) every confidence-passing candidate
    is accepted. An empty result is valid and means the frame contributed
    nothing for this keypoint.
    """
    passing = [c for c in candidates if c.confidence <= config.confidence_max]
    if not passing:
        return np.empty((0, 3))
    positions = np.stack([c.position for c in passing])
    if previous_position is None:
        return positions
    previous_position = np.asarray(previous_position, dtype=float)
    d = np.linalg.norm(positions - previous_position, axis=1)
    p = softmax_probabilities(d, config.alpha)
    return positions[p > config.p_min]


# -- geometric median --------------------------------------------------------


@dataclass(frozen=True)
class MedianResult:
    point: np.ndarray
    objective: float  # sum of distances at point
    iters: int
    converged: bool


def _median_objective(y, points) -> float:
    return float(np.linalg.norm(points - y, axis=1).sum())


def geometric_median(
    points, tol: float = 1e-9, max_iters: int = 200, trace: list | None = None
) -> MedianResult:
    """Point minimizing the sum of Euclidean distances to the inputs.

    Weiszfeld iteration from the centroid. When an iterate lands on an input
    point the plain update divides by zero; the step then shifts along the
    residual direction of the remaining points, and stops if that point is
    itself optimal (residual norm within the point's multiplicity).

    If ``trace`` is a list, the objective value of every iterate (starting
    point included) is appended to it; the sequence is non-increasing.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] != 3:
        raise ValueError("points must be a non-empty (n, 3) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")

    y = pts.mean(axis=0)
    obj = _median_objective(y, pts)
    if trace is not None:
        trace.append(obj)
    for it in range(1, max_iters + 1):
        dist = np.linalg.norm(pts - y, axis=1)
        on_point = dist <= COINCIDENCE_TOL
        m = int(np.count_nonzero(on_point))
        if m == 0:
            w = 1.0 / dist
            y_next = (pts * w[:, None]).sum(axis=0) / w.sum()
        else:
            off = ~on_point
            if not np.any(off):
                return MedianResult(y.copy(), _median_objective(y, pts), it, True)
            w = 1.0 / dist[off]
            residual = ((pts[off] - y) * w[:, None]).sum(axis=0)
            r = float(np.linalg.norm(residual))
            if r <= m:
                # the shared vertex is the minimizer
                return MedianResult(y.copy(), _median_objective(y, pts), it, True)
            t = (pts[off] * w[:, None]).sum(axis=0) / w.sum()
            lam = m / r
            y_next = (1.0 - lam) * t + lam * y
        obj_next = _median_objective(y_next, pts)
        if __debug__:
            assert obj_next <= obj + 1e-9, "median objective must not increase"
        if trace is not None:
            trace.append(obj_next)
        step = float(np.linalg.norm(y_next - y))
        y, obj = y_next, obj_next
        if step < tol:
            return MedianResult(y.copy(), obj, it, True)
    return MedianResult(y.copy(), obj, max_iters, False)


# -- palm frame and segmentation ---------------------------------------------


def frame_from_palm_keypoints(p_a, p_b, p_c) -> Pose:
    """Right-handed palm pose from three keypoints: origin at p_a, x toward
    p_b, z normal to the keypoint plane."""
    p_a = np.asarray(p_a, dtype=float)
    p_b = np.asarray(p_b, dtype=float)
    p_c = np.asarray(p_c, dtype=float)
    ab = p_b - p_a
    ac = p_c - p_a
    normal = np.cross(ab, ac)
    if 0.5 * np.linalg.norm(normal) <= 1e-10:
        raise ValueError("palm keypoints are collinear or coincident")
    x = ab / np.linalg.norm(ab)
    z = np.cross(x, ac)
    z = z / np.linalg.norm(z)
    y = np.cross(z, x)
    rot = np.column_stack((x, y, z))
    return Pose(matrix_to_quat(rot), p_a)


def segment_hand_points(points, hand_pose: Pose, box_dims) -> np.ndarray:
    """Keep points inside the closed, hand-centered axis-aligned box."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    dims = np.asarray(box_dims, dtype=float)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise ValueError("box_dims must be three positive extents")
    local = (pts - hand_pose.translation) @ hand_pose.rotation_matrix()
    keep = np.all(np.abs(local) <= dims / 2.0, axis=1)
    return pts[keep]


# -- keypoint-to-angle network -----------------------------------------------


@dataclass(frozen=True)
class MlpLayer:
    weight: np.ndarray  # (out, in), row-major
    bias: np.ndarray  # (out,)
    scale: np.ndarray | None  # folded normalization affine, (out,)
    shift: np.ndarray | None
    activation: str  # "relu" | "none"

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=float))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=float))
        if self.weight.ndim != 2:
            raise ValueError("layer weight must be a matrix")
        out_dim = self.weight.shape[0]
        if self.bias.shape != (out_dim,):
            raise ValueError("bias length must match weight rows")
        for attr in ("scale", "shift"):
            v = getattr(self, attr)
            if v is not None:
                v = np.asarray(v, dtype=float)
                object.__setattr__(self, attr, v)
                if v.shape != (out_dim,):
                    raise ValueError(f"{attr} length must match weight rows")
        if (self.scale is None) != (self.shift is None):
            raise ValueError("affine needs both scale and shift")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class MlpWeights:
    input_dim: int
    output_dim: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.weight.shape[1] != dim:
                raise ValueError(
                    f"layer {i} expects input {layer.weight.shape[1]}, chain gives {dim}"
                )
            dim = layer.weight.shape[0]
        if dim != self.output_dim:
            raise ValueError(f"last layer emits {dim}, declared output_dim {self.output_dim}")


def mlp_weights_from_dict(doc: dict) -> MlpWeights:
    try:
        layers = []
        for raw in doc["layers"]:
            affine = raw.get("affine")
            layers.append(
                MlpLayer(
                    weight=np.array(raw["weights"], dtype=float),
                    bias=np.array(raw["bias"], dtype=float),
                    scale=None if affine is None else np.array(affine["scale"], dtype=float),
                    shift=None if affine is None else np.array(affine["shift"], dtype=float),
                    activation=raw.get("activation", "none"),
                )
            )
        return MlpWeights(int(doc["input_dim"]), int(doc["output_dim"]), tuple(layers))
    except KeyError as e:
        raise ValueError(f"weights file missing key {e.args[0]!r}") from None


def mlp_weights_to_dict(weights: MlpWeights) -> dict:
    layers = []
    for layer in weights.layers:
        affine = None
        if layer.scale is not None:
            affine = {"scale": layer.scale.tolist(), "shift": layer.shift.tolist()}
        layers.append(
            {
                "weights": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
                "affine": affine,
                "activation": layer.activation,
            }
        )
    return {"input_dim": weights.input_dim, "output_dim": weights.output_dim, "layers": layers}


def load_mlp_weights(path) -> MlpWeights:
    with open(path, encoding="utf-8") as fh:
        return mlp_weights_from_dict(json.load(fh))


def save_mlp_weights(weights: MlpWeights, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp_weights_to_dict(weights), fh)
        fh.write("\n")


def mlp_forward(weights: MlpWeights, x) -> np.ndarray:
    """Run the dense network on one flattened keypoint vector."""
    h = np.asarray(x, dtype=float)
    if h.shape != (weights.input_dim,):
        raise ValueError(f"expected input of length {weights.input_dim}, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("network input must be finite")
    for layer in weights.layers:
        h = layer.weight @ h + layer.bias
        if layer.scale is not None:
            h = layer.scale * h + layer.shift
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def tta_confidence(predictions) -> tuple:
    """Mean position and scalar spread of an augmentation prediction set.

    The spread is the root of the mean per-axis population variance, so a set
    of identical predictions scores exactly zero.
    """
    pts = np.asarray(predictions, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("prediction set must be non-empty")
    mean = pts.mean(axis=0)
    var = ((pts - mean) ** 2).mean(axis=0)
    return mean, float(np.sqrt(var.mean()))


# -- per-stream orchestration ------------------------------------------------


class KeypointFuser:
    """Stateful fusion across frames for all keypoints of one hand stream."""

    def __init__(self, config: FusionConfig | None = None):
        self.config = config or FusionConfig()
        self._buffers = {}
        self._fused = {}

    def update(self, candidates) -> dict:
        """Fold one frame of candidates in; returns {keypoint_id: fused position}.

        Keypoints with no accepted candidate this frame keep their previous
        fused position. The returned dict covers every keypoint seen so far.
        """
        by_id = {}
        for c in candidates:
            by_id.setdefault(c.keypoint_id, []).append(c)
        for kp_id, group in sorted(by_id.items()):
            accepted = select_candidates(group, self._fused.get(kp_id), self.config)
            if accepted.shape[0] == 0:
                continue
            buf = self._buffers.get(kp_id)
            if buf is None:
                buf = self._buffers[kp_id] = RollingBuffer(self.config.buffer_capacity)
            for pos in accepted:
                buf.push(pos)
            med = geometric_median(
                buf.points(), self.config.median_tol, self.config.median_max_iters
            )
            self._fused[kp_id] = med.point
        return {k: v.copy() for k, v in self._fused.items()}

    def fused_array(self) -> np.ndarray:
        """All fused positions as (N_KEYPOINTS, 3); unseen keypoints are NaN."""
        out = np.full((N_KEYPOINTS, 3), np.nan)
        for k, v in self._fused.items():
            out[k] = v
        return out
