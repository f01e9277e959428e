"""Streaming control pipeline: hand states in, paced robot commands out.

Three stages own all mutable state: ingest (decode + count), map (fusion,
palm frame, registration, workspace check), and solve (retarget + low-pass).
Bounded drop-oldest queues connect them so a fast source degrades to fresh
frames instead of growing latency. Replay mode drives the same stages from a
virtual clock derived from input timestamps, which makes offline runs
bitwise reproducible; live mode paces output with the monotonic clock.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import messages as wire
from .fusion import (
    FusionConfig,
    KeypointCandidate,
    KeypointFuser,
    MlpWeights,
    frame_from_palm_keypoints,
    mlp_forward,
)
from .geometry import Pose
from .hand_model import HandModel, clamp_to_limits
from .retarget import (
    RetargetConfig,
    SolveState,
    config_from_dict,
    config_to_dict,
    filter_command,
    solve_retarget,
    validate_config_frames,
)

DEFAULT_WORKSPACE_DIMS = (0.80, 0.55, 0.38)  # meters


@dataclass(frozen=True)
class Registration:
    """Rigid map from the human observation frame to the robot base frame."""

    T: Pose


def compute_registration(human_pose_0: Pose, robot_pose_0: Pose) -> Registration:
    """Registration such that the initial human palm maps exactly onto the
    assumed initial robot palm; later palm motion maps direction-preserving."""
    for name, pose in (("human", human_pose_0), ("robot", robot_pose_0)):
        if not isinstance(pose, Pose):
            raise ValueError(f"{name} pose must be a Pose")
    return Registration(robot_pose_0 * human_pose_0.inverse())


def map_palm_pose(reg: Registration, human_pose: Pose) -> Pose:
    if reg is None:
        raise ValueError("registration missing: no initial frame seen yet")
    return reg.T * human_pose


def validate_workspace(pose: Pose, bounds=DEFAULT_WORKSPACE_DIMS, center=None) -> bool:
    """True when the palm position lies inside the closed observation box."""
    dims = np.asarray(bounds, dtype=float)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise ValueError("workspace bounds must be three positive extents")
    center = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    return bool(np.all(np.abs(pose.translation - center) <= dims / 2.0))


# -- queues ------------------------------------------------------------------


class BoundedQueue:
    """Thread-safe FIFO that evicts the oldest item instead of blocking."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.dropped = 0
        self._items = deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            assert len(self._items) <= self.capacity
            self._cond.notify()

    def get(self, timeout=None):
        """Oldest item, or None on timeout / closed-and-empty."""
        with self._cond:
            if not self._items and not self._closed:
                self._cond.wait(timeout)
            if self._items:
                return self._items.popleft()
            return None

    def take_newest(self):
        """Newest item, dropping (and counting) everything older."""
        with self._cond:
            if not self._items:
                return None
            newest = self._items.pop()
            self.dropped += len(self._items)
            self._items.clear()
            return newest

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


# -- configuration bundle ----------------------------------------------------


@dataclass(frozen=True)
class PipelineSettings:
    rate_hz: float = 30.0
    queue_capacity: int = 8
    workspace_dims: tuple = DEFAULT_WORKSPACE_DIMS
    palm_keypoint_ids: tuple = (0, 1, 2)
    robot_base_pose: Pose = field(default_factory=Pose.identity)
    weights_file: str | None = None

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be at least 1")
        dims = tuple(float(v) for v in self.workspace_dims)
        if len(dims) != 3 or any(v <= 0 for v in dims):
            raise ValueError("workspace_dims must be three positive extents")
        object.__setattr__(self, "workspace_dims", dims)
        ids = tuple(int(v) for v in self.palm_keypoint_ids)
        if len(ids) != 3 or len(set(ids)) != 3:
            raise ValueError("palm_keypoint_ids must be three distinct keypoints")
        object.__setattr__(self, "palm_keypoint_ids", ids)


@dataclass(frozen=True)
class FullConfig:
    """Everything one run needs: retargeting, fusion, and pipeline settings."""

    retarget: RetargetConfig = field(default_factory=RetargetConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)


def full_config_to_dict(config: FullConfig) -> dict:
    doc = config_to_dict(config.retarget)
    doc["fusion"] = {
        "alpha": config.fusion.alpha,
        "p_min": config.fusion.p_min,
        "confidence_max": config.fusion.confidence_max,
        "buffer_capacity": config.fusion.buffer_capacity,
        "median_tol": config.fusion.median_tol,
        "median_max_iters": config.fusion.median_max_iters,
    }
    doc["pipeline"] = {
        "rate_hz": config.pipeline.rate_hz,
        "queue_capacity": config.pipeline.queue_capacity,
        "workspace_dims": list(config.pipeline.workspace_dims),
        "palm_keypoint_ids": list(config.pipeline.palm_keypoint_ids),
        "robot_base_pose": config.pipeline.robot_base_pose.as_dict(),
        "weights_file": config.pipeline.weights_file,
    }
    return doc


def full_config_from_dict(doc: dict) -> FullConfig:
    retarget = config_from_dict(doc)
    fus = doc.get("fusion", {})
    fusion = FusionConfig(
        alpha=float(fus.get("alpha", 500.0)),
        p_min=float(fus.get("p_min", 0.2)),
        confidence_max=float(fus.get("confidence_max", 0.01)),
        buffer_capacity=int(fus.get("buffer_capacity", 5)),
        median_tol=float(fus.get("median_tol", 1e-9)),
        median_max_iters=int(fus.get("median_max_iters", 100)),
    )
    pip = doc.get("pipeline", {})
    base = pip.get("robot_base_pose")
    pipeline = PipelineSettings(
        rate_hz=float(pip.get("rate_hz", 30.0)),
        queue_capacity=int(pip.get("queue_capacity", 8)),
        workspace_dims=tuple(pip.get("workspace_dims", DEFAULT_WORKSPACE_DIMS)),
        palm_keypoint_ids=tuple(pip.get("palm_keypoint_ids", (0, 1, 2))),
        robot_base_pose=Pose.identity() if base is None else Pose.from_dict(base),
        weights_file=pip.get("weights_file"),
    )
    return FullConfig(retarget=retarget, fusion=fusion, pipeline=pipeline)


def save_full_config(config: FullConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(full_config_to_dict(config), fh, indent=2)
        fh.write("\n")


def load_full_config(path) -> FullConfig:
    with open(path, encoding="utf-8") as fh:
        return full_config_from_dict(json.load(fh))


def config_hash(config: FullConfig) -> str:
    return wire.config_content_hash(full_config_to_dict(config))


# -- run report --------------------------------------------------------------


@dataclass
class RunReport:
    input_count: int = 0
    published: int = 0
    dropped: int = 0
    errors: int = 0
    out_of_volume: int = 0
    latency_ms: dict = field(default_factory=lambda: {"p50": 0.0, "p95": 0.0, "max": 0.0})
    achieved_rate_hz: float = 0.0
    solve_ms: dict = field(default_factory=lambda: {"mean": 0.0, "max": 0.0})
    model_hashes: dict = field(default_factory=dict)
    config_hash: str = ""

    def reconciles(self) -> bool:
        return self.published + self.dropped + self.errors == self.input_count

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "published": self.published,
            "dropped": self.dropped,
            "errors": self.errors,
            "out_of_volume": self.out_of_volume,
            "latency_ms": dict(self.latency_ms),
            "achieved_rate_hz": self.achieved_rate_hz,
            "solve_ms": dict(self.solve_ms),
            "model_hashes": dict(self.model_hashes),
            "config_hash": self.config_hash,
        }


def _finish_report(report: RunReport, latencies, solve_times, emit_times) -> RunReport:
    if latencies:
        lat = np.asarray(latencies) * 1000.0
        report.latency_ms = {
            "p50": float(np.percentile(lat, 50)),
            "p95": float(np.percentile(lat, 95)),
            "max": float(lat.max()),
        }
    if solve_times:
        st = np.asarray(solve_times) * 1000.0
        report.solve_ms = {"mean": float(st.mean()), "max": float(st.max())}
    if len(emit_times) > 1:
        span = emit_times[-1] - emit_times[0]
        if span > 0:
            report.achieved_rate_hz = float((len(emit_times) - 1) / span)
    return report


# -- stages ------------------------------------------------------------------


class FrameError(Exception):
    """A frame that cannot be processed; counted, never fatal."""


@dataclass
class MappedFrame:
    t: float
    q_h: np.ndarray
    palm_target: Pose
    workspace_ok: bool


class HandStateMapper:
    """Fuse/map stage: raw hand state to joint angles plus a palm target."""

    def __init__(self, human: HandModel, config: FullConfig, mlp: MlpWeights | None = None):
        self.human = human
        self.config = config
        self.mlp = mlp
        self.fuser = KeypointFuser(config.fusion)
        self.registration = None
        self._workspace_center = None
        self._reregister = False
        self._seen_era = 0

    def request_reregistration(self) -> None:
        self._reregister = True

    def _register(self, human_palm: Pose) -> None:
        self.registration = compute_registration(
            human_palm, self.config.pipeline.robot_base_pose
        )
        self._workspace_center = human_palm.translation.copy()

    def _keypoints_to_state(self, msg: wire.HandStateMessage):
        if msg.candidates:
            candidates = msg.candidates
        else:
            candidates = [
                KeypointCandidate(k, 0, msg.keypoints[k], 0.0)
                for k in range(msg.keypoints.shape[0])
            ]
        self.fuser.update(candidates)
        fused = self.fuser.fused_array()
        ids = self.config.pipeline.palm_keypoint_ids
        if not np.all(np.isfinite(fused[list(ids)])):
            raise FrameError("palm keypoints not yet fused")
        try:
            palm = frame_from_palm_keypoints(*(fused[i] for i in ids))
        except ValueError as e:
            raise FrameError(str(e)) from None
        if self.mlp is None:
            raise FrameError("keypoint frame received but no network weights loaded")
        if not np.all(np.isfinite(fused)):
            raise FrameError("incomplete keypoint set")
        # feed palm-relative coordinates so the mapping is pose-invariant
        local = (fused - palm.translation) @ palm.rotation_matrix()
        q_h = mlp_forward(self.mlp, local.reshape(-1))
        return palm, q_h

    def process(self, msg: wire.HandStateMessage, era: int = 0) -> MappedFrame:
        """Map one hand state; era counts re-register controls seen at ingest,
        so a request only lands on frames that arrived after it, never on a
        stale queued frame."""
        if msg.q_h is not None:
            palm, q_h = msg.palm_pose, msg.q_h
        else:
            palm, q_h = self._keypoints_to_state(msg)
        q_h = clamp_to_limits(self.human, q_h)
        if self.registration is None or self._reregister or era > self._seen_era:
            self._register(palm)
            self._reregister = False
        self._seen_era = max(self._seen_era, era)
        workspace_ok = validate_workspace(
            palm, self.config.pipeline.workspace_dims, self._workspace_center
        )
        return MappedFrame(
            t=msg.t,
            q_h=np.asarray(q_h, dtype=float),
            palm_target=map_palm_pose(self.registration, palm),
            workspace_ok=workspace_ok,
        )


class CommandSolver:
    """Solve/filter stage: mapped frame to a robot command payload."""

    def __init__(self, human: HandModel, robot: HandModel, config: FullConfig):
        self.human = human
        self.robot = robot
        self.config = config
        self.state = SolveState()

    def process(self, frame: MappedFrame, t_emit: float, dropped_so_far: int, replay: bool):
        try:
            q_cmd, diag = solve_retarget(
                frame.q_h, self.state, self.config.retarget, self.human, self.robot
            )
        except ValueError as e:
            raise FrameError(f"solve failed: {e}") from None
        q_filtered = filter_command(
            self.state, q_cmd.values, self.config.retarget.filter_alpha
        )
        msg = wire.RobotCommandMessage(
            t_source=frame.t,
            t_emit=t_emit,
            q_a=q_filtered,
            palm_target=frame.palm_target,
            diagnostics={
                "cost": diag["cost"],
                "solve_ms": 0.0 if replay else diag["solve_time"] * 1000.0,
                "dropped_frames": dropped_so_far,
                "workspace_ok": frame.workspace_ok,
            },
        )
        return msg, diag["solve_time"]


# -- replay ------------------------------------------------------------------


def run_replay(lines, human, robot, config: FullConfig, out_fh, mlp=None, hashes=None) -> RunReport:
    """Drive the pipeline from an iterable of wire lines, deterministically.

    All pacing uses the input timestamps: output ticks fall every 1/rate_hz
    of source time, each consuming the newest queued frame and dropping the
    rest. Wall-clock values never reach the output, so identical inputs give
    identical output bytes.
    """
    validate_config_frames(config.retarget, human, robot)
    report = RunReport(model_hashes=dict(hashes or {}), config_hash=config_hash(config))
    mapper = HandStateMapper(human, config, mlp)
    solver = CommandSolver(human, robot, config)
    queue = BoundedQueue(config.pipeline.queue_capacity)
    period = 1.0 / config.pipeline.rate_hz
    # ticks lie on a grid anchored at the first timestamp; computing each as
    # t0 + n*period (instead of accumulating +=) keeps them ulp-stable, and
    # the slack absorbs rounding in source timestamps that sit on the grid
    slack = 1e-9
    t_first = None
    n_ticks = 0
    latencies, solve_times, emit_times = [], [], []

    def run_tick(tick_time: float) -> None:
        item = queue.take_newest()
        if item is None:
            return
        era_in, msg = item
        try:
            frame = mapper.process(msg, era=era_in)
            cmd, solve_time = solver.process(frame, tick_time, queue.dropped, replay=True)
        except FrameError:
            report.errors += 1
            return
        if not frame.workspace_ok:
            report.out_of_volume += 1
        out_fh.write(wire.encode_message(cmd))
        report.published += 1
        latencies.append(cmd.t_emit - cmd.t_source)
        solve_times.append(solve_time)
        emit_times.append(cmd.t_emit)

    last_t = None
    era = 0
    for raw in lines:
        text = raw.decode("utf-8", errors="replace") if isinstance(raw, bytes) else raw
        if not text.strip():
            continue
        try:
            msg = wire.decode_message(text)
        except wire.WireError:
            report.input_count += 1
            report.errors += 1
            continue
        if isinstance(msg, wire.HandshakeMessage):
            continue  # identity line; verified at the transport layer
        if isinstance(msg, wire.ControlMessage):
            if msg.action == "re_register":
                era += 1
            continue
        if not isinstance(msg, wire.HandStateMessage):
            report.input_count += 1
            report.errors += 1
            continue
        report.input_count += 1
        if last_t is not None and msg.t <= last_t:
            report.errors += 1  # timestamps must be strictly increasing
            continue
        last_t = msg.t
        if t_first is None:
            t_first = msg.t
        else:
            while t_first + (n_ticks + 1) * period <= msg.t + slack:
                n_ticks += 1
                run_tick(t_first + n_ticks * period)
        queue.put((era, msg))

    while len(queue) and t_first is not None:
        n_ticks += 1
        run_tick(t_first + n_ticks * period)

    report.dropped = queue.dropped
    return _finish_report(report, latencies, solve_times, emit_times)


# -- live serving ------------------------------------------------------------


def _read_lines(sock):
    """Yield complete newline-terminated lines from a stream socket."""
    buf = b""
    while True:
        try:
            chunk = sock.recv(4096)
        except OSError:
            return
        if not chunk:
            return
        buf += chunk
        while b"\n" in buf:
            line, buf = buf.split(b"\n", 1)
            yield line


def local_handshake(config: FullConfig, hashes: dict) -> wire.HandshakeMessage:
    return wire.HandshakeMessage(
        schema=wire.SCHEMA_VERSION,
        model_hashes=dict(hashes or {}),
        config_hash=config_hash(config),
    )


def serve_connection(conn, human, robot, config: FullConfig, mlp=None, hashes=None,
                     stop=None) -> RunReport:
    """Run the live pipeline over one accepted stream socket."""
    validate_config_frames(config.retarget, human, robot)
    stop = stop or threading.Event()
    report = RunReport(model_hashes=dict(hashes or {}), config_hash=config_hash(config))
    mapper = HandStateMapper(human, config, mlp)
    solver = CommandSolver(human, robot, config)
    q_in = BoundedQueue(config.pipeline.queue_capacity)
    q_cmd = BoundedQueue(config.pipeline.queue_capacity)
    period = 1.0 / config.pipeline.rate_hz
    counts_lock = threading.Lock()
    latencies, solve_times, emit_times = [], [], []

    lines = _read_lines(conn)
    try:
        first = next(lines)
    except StopIteration:
        return report
    peer = wire.decode_message(first)  # propagate handshake problems to caller
    if not isinstance(peer, wire.HandshakeMessage):
        raise wire.SchemaMismatch("first line must be a handshake")
    wire.check_handshake(peer, local_handshake(config, hashes or {}))
    conn.sendall(wire.encode_message(local_handshake(config, hashes or {})))

    def ingest():
        last_t = None
        era = 0
        for line in lines:
            if stop.is_set():
                break
            if not line.strip():
                continue
            with counts_lock:
                report.input_count += 1
            try:
                msg = wire.decode_message(line)
            except wire.WireError:
                with counts_lock:
                    report.errors += 1
                continue
            if isinstance(msg, wire.ControlMessage):
                with counts_lock:
                    report.input_count -= 1
                if msg.action == "re_register":
                    era += 1
                continue
            if not isinstance(msg, wire.HandStateMessage):
                with counts_lock:
                    report.errors += 1
                continue
            if last_t is not None and msg.t <= last_t:
                with counts_lock:
                    report.errors += 1
                continue
            last_t = msg.t
            q_in.put((time.monotonic(), era, msg))
        q_in.close()

    def work():
        while True:
            item = q_in.get(timeout=0.1)
            if item is None:
                if q_in.closed or stop.is_set():
                    break
                continue
            t_recv, era_in, msg = item
            try:
                frame = mapper.process(msg, era=era_in)
                cmd, solve_time = solver.process(
                    frame, 0.0, q_in.dropped + q_cmd.dropped, replay=False
                )
            except FrameError:
                with counts_lock:
                    report.errors += 1
                continue
            if not frame.workspace_ok:
                with counts_lock:
                    report.out_of_volume += 1
            solve_times.append(solve_time)
            q_cmd.put((t_recv, cmd))
        q_cmd.close()

    def publish():
        next_tick = time.monotonic() + period
        while True:
            drained = q_cmd.closed and len(q_cmd) == 0
            if drained:
                break
            now = time.monotonic()
            if now < next_tick and not q_cmd.closed:
                time.sleep(min(next_tick - now, 0.02))
                continue
            next_tick += period
            item = q_cmd.take_newest()
            if item is None:
                continue
            t_recv, cmd = item
            t_emit = time.monotonic()
            out = wire.RobotCommandMessage(
                t_source=cmd.t_source,
                t_emit=t_emit,
                q_a=cmd.q_a,
                palm_target=cmd.palm_target,
                diagnostics=dict(cmd.diagnostics),
            )
            try:
                conn.sendall(wire.encode_message(out))
            except OSError:
                stop.set()
                break
            with counts_lock:
                report.published += 1
            # server-side pipeline latency: socket receipt to publish
            latencies.append(t_emit - t_recv)
            emit_times.append(t_emit)

    threads = [threading.Thread(target=fn, daemon=True) for fn in (ingest, work, publish)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    report.dropped = q_in.dropped + q_cmd.dropped
    return _finish_report(report, latencies, solve_times, emit_times)


def serve(address, human, robot, config: FullConfig, mlp=None, hashes=None, stop=None,
          ready=None) -> RunReport:
    """Listen on (host, port), accept one client, run the pipeline, report."""
    stop = stop or threading.Event()
    with socket.create_server(address) as server:
        server.settimeout(0.2)
        if ready is not None:
            ready(server.getsockname())
        while not stop.is_set():
            try:
                conn, _ = server.accept()
            except socket.timeout:
                continue
            with conn:
                return serve_connection(
                    conn, human, robot, config, mlp=mlp, hashes=hashes, stop=stop
                )
    return RunReport(model_hashes=dict(hashes or {}), config_hash=config_hash(config))
