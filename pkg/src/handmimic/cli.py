"""Command-line driver: replay, serve, fk, bench, export, fixtures, config-init.

Every subcommand exits 0 on success and a documented nonzero code per error
class:

    2  usage (bad flags or arguments)
    3  I/O (missing or unwritable files, bind failures)
    4  data (model, config, weights, or message parse/validation errors)
    5  runtime (unexpected pipeline failure)
    6  protocol (handshake rejected while serving)

Machine-readable results go to stdout; diagnostics go to stderr. The replay,
bench, and export paths write PNG figures next to their delimited outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import signal
import sys
import threading
import time
from importlib.resources import files as _pkg_files
from pathlib import Path

import numpy as np

from . import fixtures, messages as wire, pipeline, retarget
from .fusion import load_mlp_weights
from .hand_model import (
    HandModel,
    ModelError,
    forward_kinematics,
    parse_model,
    task_vector,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5
EXIT_PROTOCOL = 6

SOLVE_BUDGET_MS = 33.0

_RETARGET_SCALARS = ("epsilon", "beta", "eta1", "eta2", "gamma", "filter_alpha")


def _default_model_path(which: str) -> str:
    return str(_pkg_files("handmimic.data") / f"{which}_hand.json")


def _read_model(path) -> tuple:
    """Parse a model file and hash its exact bytes."""
    raw = Path(path).read_bytes()
    return parse_model(raw.decode("utf-8")), wire.content_hash(raw)


def _load_models(args) -> tuple:
    human, h_hash = _read_model(args.human)
    robot, r_hash = _read_model(args.robot)
    return human, robot, {"human": h_hash, "robot": r_hash}


def _load_config(args, human: HandModel, robot: HandModel) -> pipeline.FullConfig:
    if getattr(args, "config", None):
        config = pipeline.load_full_config(args.config)
    else:
        config = pipeline.FullConfig(
            retarget.default_config(human, robot),
            pipeline.FusionConfig(),
            pipeline.PipelineSettings(),
        )
    overrides = {
        key: getattr(args, key)
        for key in _RETARGET_SCALARS
        if getattr(args, key, None) is not None
    }
    if overrides:
        config = dataclasses.replace(
            config, retarget=dataclasses.replace(config.retarget, **overrides)
        )
    pipe_overrides = {}
    if getattr(args, "rate_hz", None) is not None:
        pipe_overrides["rate_hz"] = args.rate_hz
    if getattr(args, "queue_capacity", None) is not None:
        pipe_overrides["queue_capacity"] = args.queue_capacity
    if pipe_overrides:
        config = dataclasses.replace(
            config, pipeline=dataclasses.replace(config.pipeline, **pipe_overrides)
        )
    retarget.validate_config_frames(config.retarget, human, robot)
    return config


def _load_weights(args):
    if getattr(args, "weights", None):
        return load_mlp_weights(args.weights)
    return None


def _add_model_options(sub) -> None:
    sub.add_argument("--human", default=_default_model_path("human"),
                     help="human hand model file")
    sub.add_argument("--robot", default=_default_model_path("robot"),
                     help="robot hand model file")


def _add_config_options(sub) -> None:
    sub.add_argument("--config", help="full config JSON (default: built-in values)")
    for key in _RETARGET_SCALARS:
        sub.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float,
                         default=None, help=f"override config key {key}")
    sub.add_argument("--rate-hz", dest="rate_hz", type=float, default=None,
                     help="override output rate")
    sub.add_argument("--queue-capacity", dest="queue_capacity", type=int,
                     default=None, help="override queue capacity")
    sub.add_argument("--weights", help="keypoint-to-angle network weights JSON")


def _print_json(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _tip_distances_mm(robot: HandModel, q_rows) -> tuple:
    """Columns of thumb-to-fingertip distances for command trajectories."""
    thumb = robot.thumb_tip_frame()
    tips = robot.primary_tip_frames()
    labels = [f"thumb-{name}" for name in
              [f.name for f in robot.fingers if f.tip_frame in tips]]
    dists = np.array(
        [[1000.0 * np.linalg.norm(task_vector(robot, q, tip, thumb)) for tip in tips]
         for q in q_rows]
    )
    return dists, labels


def _replay_figures(out_path: Path, commands, robot: HandModel) -> list:
    from . import plots

    times = [c.t_emit for c in commands]
    q_rows = [c.q_a for c in commands]
    joints = robot.joint_names
    made = [
        plots.save_joint_traces(
            out_path.with_suffix(".joints.png"), times, np.array(q_rows),
            names=joints, title="commanded joint angles",
        )
    ]
    dists, labels = _tip_distances_mm(robot, q_rows)
    made.append(
        plots.save_distance_traces(
            out_path.with_suffix(".tips.png"), times, dists, labels,
            threshold_mm=5.0, title="commanded thumb-to-fingertip distances",
        )
    )
    return made


def cmd_replay(args) -> int:
    human, robot, hashes = _load_models(args)
    config = _load_config(args, human, robot)
    mlp = _load_weights(args)
    lines = Path(args.input).read_bytes().splitlines()
    out_path = Path(args.out)
    with open(out_path, "wb") as out_fh:
        report = pipeline.run_replay(
            lines, human, robot, config, out_fh, mlp=mlp, hashes=hashes
        )
    report_path = Path(args.report) if args.report else out_path.with_suffix(".report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    doc = report.to_dict()
    doc["figures"] = []
    if not args.no_figures and report.published:
        commands = [
            wire.decode_message(line)
            for line in out_path.read_bytes().splitlines()
            if line.strip()
        ]
        doc["figures"] = _replay_figures(out_path, commands, robot)
    _print_json(doc)
    return EXIT_OK


def cmd_serve(args) -> int:
    host, _, port_text = args.listen.rpartition(":")
    if not host or not port_text:
        print(f"error: --listen must be host:port, got {args.listen!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        port = int(port_text)
    except ValueError:
        print(f"error: bad port {port_text!r}", file=sys.stderr)
        return EXIT_USAGE
    human, robot, hashes = _load_models(args)
    config = _load_config(args, human, robot)
    mlp = _load_weights(args)
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, on_signal)

    def on_ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", file=sys.stderr)

    try:
        report = pipeline.serve(
            (host, port), human, robot, config,
            mlp=mlp, hashes=hashes, stop=stop, ready=on_ready,
        )
    except wire.WireError as e:
        print(f"handshake rejected: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_fk(args) -> int:
    model, _ = _read_model(args.model)
    if args.q:
        try:
            q = np.array([float(v) for v in args.q], dtype=float)
        except ValueError as e:
            print(f"error: joint values must be numbers: {e}", file=sys.stderr)
            return EXIT_USAGE
    else:
        q = np.zeros(model.dof)
    frames = forward_kinematics(model, q)  # raises on dimension mismatch
    _print_json(
        {
            "model": model.name,
            "q": q.tolist(),
            "frames": {
                name: {
                    "position": pose.translation.tolist(),
                    "quaternion": pose.rotation.tolist(),
                }
                for name, pose in sorted(frames.items())
            },
        }
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    human, robot, hashes = _load_models(args)
    config = _load_config(args, human, robot)
    n_frames = args.frames if args.frames else max(1, int(args.seconds * 30.0))
    rng = np.random.default_rng(args.seed)
    state = retarget.SolveState()
    q_h = np.zeros(human.dof)
    rows = []
    outputs = hashlib.sha256()
    for k in range(n_frames):
        q_h = np.clip(
            q_h + rng.normal(0.0, 0.05, human.dof), human.lower, human.upper
        )
        t0 = time.perf_counter()
        q_cmd, diag = retarget.solve_retarget(
            q_h, state, config.retarget, human, robot
        )
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        outputs.update(np.ascontiguousarray(q_cmd.values).tobytes())
        rows.append(
            {
                "frame": k,
                "cost": diag["cost"],
                "iterations": diag["iters"],
                "converged": diag["converged"],
                "solve_ms": elapsed_ms,
            }
        )
    times_ms = np.array([r["solve_ms"] for r in rows])
    stats = {
        "frames": n_frames,
        "seed": args.seed,
        "solve_ms": {
            "mean": float(times_ms.mean()),
            "p95": float(np.percentile(times_ms, 95)),
            "max": float(times_ms.max()),
        },
        "budget_ms": SOLVE_BUDGET_MS,
        "within_budget": bool(times_ms.mean() <= SOLVE_BUDGET_MS),
        # seed-determined workload summary; identical across runs of one build
        "workload": {
            "mean_cost": float(np.mean([r["cost"] for r in rows])),
            "total_iterations": int(sum(r["iterations"] for r in rows)),
            "commands_sha256": outputs.hexdigest(),
        },
        "model_hashes": hashes,
    }
    if args.out:
        out_path = Path(args.out)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["frame", "cost", "iterations", "converged", "solve_ms"]
            )
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "cost": repr(row["cost"])})
        from . import plots

        stats["figures"] = [
            plots.save_timing_histogram(
                out_path.with_suffix(".png"), times_ms,
                budget_ms=SOLVE_BUDGET_MS, title="retargeting solve time",
            )
        ]
    _print_json(stats)
    return EXIT_OK


def cmd_export(args) -> int:
    robot, _ = _read_model(args.robot)
    commands = []
    for line in Path(args.input).read_bytes().splitlines():
        if not line.strip():
            continue
        msg = wire.decode_message(line)
        if isinstance(msg, wire.RobotCommandMessage):
            commands.append(msg)
    prefix = Path(args.out_prefix) if args.out_prefix else Path(args.input).with_suffix("")
    joints = robot.joint_names

    csv_path = prefix.with_suffix(".joints.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_emit", "joint", "angle"])
        for cmd in commands:
            if cmd.q_a.shape[0] != len(joints):
                raise ValueError(
                    f"command has {cmd.q_a.shape[0]} joints, model {len(joints)}"
                )
            for name, angle in zip(joints, cmd.q_a):
                writer.writerow([repr(cmd.t_emit), name, repr(float(angle))])

    tips = robot.primary_tip_frames() + [robot.thumb_tip_frame()]
    # tip positions composed with the palm target, so viewers see workspace
    # coordinates directly
    scene = {"model": robot.name, "tip_frames": tips, "frames": []}
    tracks = {tip: [] for tip in tips}
    for cmd in commands:
        fk = forward_kinematics(robot, cmd.q_a)
        entry = {"t": cmd.t_emit, "palm": cmd.palm_target.as_dict(), "tips": {}}
        for tip in tips:
            world = cmd.palm_target.transform_point(fk[tip].translation)
            entry["tips"][tip] = world.tolist()
            tracks[tip].append(world)
        scene["frames"].append(entry)
    scene_path = prefix.with_suffix(".scene.json")
    with open(scene_path, "w", encoding="utf-8") as fh:
        json.dump(scene, fh, indent=2, sort_keys=True)
        fh.write("\n")

    result = {
        "commands": len(commands),
        "csv": str(csv_path),
        "csv_rows": len(commands) * len(joints),
        "scene": str(scene_path),
        "figures": [],
    }
    if commands and not args.no_figures:
        from . import plots

        result["figures"] = [
            plots.save_tip_scene(
                prefix.with_suffix(".scene.png"),
                {tip: np.array(track) for tip, track in tracks.items()},
                title="fingertip paths (workspace frame)",
            )
        ]
    _print_json(result)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    human, _, _ = _load_models(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(fixtures.STREAMS) if args.which == "all" else [args.which]
    manifest = {}
    for name in names:
        make = fixtures.STREAMS[name]
        kwargs = {"n_frames": args.frames, "rate_hz": args.rate_hz}
        if name == "random-walk":
            kwargs["seed"] = args.seed
        stream = make(human, **kwargs)
        if args.variant != "joints":
            cameras = args.cameras if args.variant == "cameras" else 0
            stream = fixtures.keypoint_stream(
                human, stream, cameras=cameras, seed=args.seed
            )
        path = out_dir / f"{name}.jsonl"
        manifest[str(path)] = fixtures.write_jsonl(stream, path)
    if args.weights_out:
        weights = fixtures.fitted_mlp_weights(human, seed=args.seed)
        from .fusion import save_mlp_weights

        save_mlp_weights(weights, args.weights_out)
        manifest[str(args.weights_out)] = 1
    _print_json({"written": manifest})
    return EXIT_OK


def cmd_config_init(args) -> int:
    human, robot, _ = _load_models(args)
    out_path = Path(args.out)
    if out_path.exists() and not args.force:
        print(f"error: {out_path} exists (use --force to overwrite)", file=sys.stderr)
        return EXIT_IO
    config = pipeline.FullConfig(
        retarget.default_config(human, robot),
        pipeline.FusionConfig(),
        pipeline.PipelineSettings(),
    )
    pipeline.save_full_config(config, out_path)
    _print_json({"written": str(out_path), "hash": pipeline.config_hash(config)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handmimic",
        description="Hand-motion retargeting toolkit: offline replay, live "
        "serving, kinematics queries, benchmarks, and fixtures.",
    )
    subs = parser.add_subparsers(dest="command", metavar="command")

    sub = subs.add_parser("replay", help="deterministic offline replay of a "
                          "recorded hand-state stream")
    sub.add_argument("input", help="hand-state JSONL file")
    sub.add_argument("--out", required=True, help="robot-command JSONL output")
    sub.add_argument("--report", help="report JSON path (default: out with "
                     ".report.json suffix)")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip PNG rendering")
    _add_model_options(sub)
    _add_config_options(sub)
    sub.set_defaults(func=cmd_replay)

    sub = subs.add_parser("serve", help="serve one live hand-state stream over TCP")
    sub.add_argument("--listen", default="127.0.0.1:7713", help="host:port")
    _add_model_options(sub)
    _add_config_options(sub)
    sub.set_defaults(func=cmd_serve)

    sub = subs.add_parser("fk", help="print frame poses for joint values")
    sub.add_argument("--model", default=_default_model_path("robot"),
                     help="hand model file")
    sub.add_argument("q", nargs="*", help="joint values in radians "
                     "(default: all zeros)")
    sub.set_defaults(func=cmd_fk)

    sub = subs.add_parser("bench", help="benchmark the retargeting solver on a "
                          "seeded synthetic stream")
    sub.add_argument("--seconds", type=float, default=10.0,
                     help="simulated duration at 30 frames/s")
    sub.add_argument("--frames", type=int, default=None,
                     help="explicit frame count (overrides --seconds)")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", help="per-frame CSV path (histogram PNG lands "
                     "next to it)")
    _add_model_options(sub)
    _add_config_options(sub)
    sub.set_defaults(func=cmd_bench)

    sub = subs.add_parser("export", help="extract joint CSV and fingertip scene "
                          "JSON from a command stream")
    sub.add_argument("input", help="robot-command JSONL file")
    sub.add_argument("--out-prefix", help="output path prefix "
                     "(default: input path without suffix)")
    sub.add_argument("--robot", default=_default_model_path("robot"),
                     help="robot hand model file")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip PNG rendering")
    sub.set_defaults(func=cmd_export)

    sub = subs.add_parser("fixtures", help="generate deterministic trajectory "
                          "fixture files")
    sub.add_argument("--out-dir", default="fixtures")
    sub.add_argument("--which", default="all",
                     choices=["all"] + sorted(fixtures.STREAMS))
    sub.add_argument("--variant", default="joints",
                     choices=["joints", "keypoints", "cameras"],
                     help="joints: angle streams; keypoints: bare keypoint "
                     "arrays; cameras: noisy multi-camera candidates")
    sub.add_argument("--cameras", type=int, default=2,
                     help="camera count for the cameras variant")
    sub.add_argument("--frames", type=int, default=90)
    sub.add_argument("--rate-hz", dest="rate_hz", type=float, default=30.0)
    sub.add_argument("--seed", type=int, default=7)
    sub.add_argument("--weights-out", help="also fit and write network weights")
    _add_model_options(sub)
    sub.set_defaults(func=cmd_fixtures)

    sub = subs.add_parser("config-init", help="write the default config file")
    sub.add_argument("--out", default="config.json")
    sub.add_argument("--force", action="store_true")
    _add_model_options(sub)
    sub.set_defaults(func=cmd_config_init)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ModelError, wire.WireError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
