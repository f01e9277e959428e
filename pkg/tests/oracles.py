"""Independent reference implementations used to check the library.

Everything here is deliberately written the slow, obvious way with different
math than the package: homogeneous matrices instead of quaternions, explicit
Python loops instead of vectorized algebra, subgradient descent instead of
fixed-point iteration.
"""

import numpy as np


# -- homogeneous-matrix forward kinematics -----------------------------------


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _mat(xyz, rpy):
    T = np.eye(4)
    T[:3, :3] = _rz(rpy[2]) @ _ry(rpy[1]) @ _rx(rpy[0])
    T[:3, 3] = xyz
    return T


def _axis_rotation(axis, angle):
    # Rodrigues formula
    k = np.asarray(axis, dtype=float)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    T = np.eye(4)
    T[:3, :3] = R
    return T


def matrix_fk(model, q):
    """Frame poses as 4x4 matrices, built only from the raw xyz/rpy fields."""
    q = np.asarray(q, dtype=float)
    T = {model.root_link: np.eye(4)}
    pending = list(model.joints)
    while pending:
        progressed = False
        for j in list(pending):
            if j.parent not in T:
                continue
            M = T[j.parent] @ _mat(j.origin_xyz, j.origin_rpy)
            if j.kind == "revolute":
                M = M @ _axis_rotation(j.axis, q[model.joint_index(j.name)])
            T[j.child] = M
            pending.remove(j)
            progressed = True
        assert progressed, "disconnected model"
    frames = {}
    for f in model.frame_list:
        frames[f.name] = T[f.link] @ _mat(f.origin_xyz, f.origin_rpy)
    return frames


def quat_to_matrix_reference(q):
    # direct expansion, written without reusing the package's helper
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# -- geometric median by subgradient descent ---------------------------------


def median_objective(y, points):
    return float(sum(np.linalg.norm(y - p) for p in points))


def subgradient_median(points, steps=100000, seed=None):
    """Plain normalized subgradient descent with best-iterate tracking.

    Step size c/sqrt(k) with c scaled to the point spread; slow but makes no
    use of the Weiszfeld update.
    """
    points = np.asarray(points, dtype=float)
    y = points.mean(axis=0)
    best = y.copy()
    best_obj = median_objective(y, points)
    spread = max(np.linalg.norm(points - y, axis=1).max(), 1e-12)
    c = 0.5 * spread
    for k in range(1, steps + 1):
        g = np.zeros(3)
        for p in points:
            diff = y - p
            n = np.linalg.norm(diff)
            if n > 1e-15:
                g += diff / n
        gn = np.linalg.norm(g)
        if gn < 1e-14:
            return y, median_objective(y, points)
        y = y - (c / np.sqrt(k)) * g / gn
        obj = median_objective(y, points)
        if obj < best_obj:
            best_obj = obj
            best = y.copy()
    return best, best_obj


def batched_subgradient_median(point_sets, steps):
    """Subgradient descent on the sum-of-distances objective, one set per row.

    Same method as subgradient_median but vectorized across sets (padded to
    the largest set with a validity mask) so large step counts stay tractable:
    normalized subgradient, c/k schedule with c = half the initial spread,
    best-iterate tracking. Returns (points, objectives) as (m, 3) and (m,).
    """
    m = len(point_sets)
    nmax = max(p.shape[0] for p in point_sets)
    pts = np.zeros((m, nmax, 3))
    mask = np.zeros((m, nmax), dtype=bool)
    for i, p in enumerate(point_sets):
        pts[i, : p.shape[0]] = p
        mask[i, : p.shape[0]] = True
    counts = mask.sum(axis=1)

    y = pts.sum(axis=1) / counts[:, None]
    spread = np.zeros(m)
    for i, p in enumerate(point_sets):
        spread[i] = np.linalg.norm(p - y[i], axis=1).max()
    c = 0.5 * np.maximum(spread, 1e-12)

    best_y = y.copy()
    best_obj = np.full(m, np.inf)
    for k in range(1, steps + 1):
        diff = y[:, None, :] - pts  # (m, nmax, 3)
        d = np.sqrt((diff * diff).sum(axis=2))
        obj = np.where(mask, d, 0.0).sum(axis=1)
        better = obj < best_obj
        best_obj = np.where(better, obj, best_obj)
        best_y[better] = y[better]
        safe = np.where(d > 1e-15, d, 1.0)
        g = (diff / safe[:, :, None] * mask[:, :, None]).sum(axis=1)
        gn = np.linalg.norm(g, axis=1)
        gsafe = np.where(gn > 1e-15, gn, 1.0)
        y = y - (c / k)[:, None] * (g / gsafe[:, None])
    return best_y, best_obj


# -- dense-loop network inference --------------------------------------------


def mlp_forward_loops(weights, x):
    """Layer-by-layer inference with explicit Python loops."""
    h = [float(v) for v in x]
    for layer in weights.layers:
        out = []
        rows = layer.weight.shape[0]
        for i in range(rows):
            acc = float(layer.bias[i])
            for j in range(layer.weight.shape[1]):
                acc += float(layer.weight[i, j]) * h[j]
            if layer.scale is not None:
                acc = float(layer.scale[i]) * acc + float(layer.shift[i])
            if layer.activation == "relu" and acc < 0.0:
                acc = 0.0
            out.append(acc)
        h = out
    return np.array(h)


# -- finite differences ------------------------------------------------------


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g
