"""Command-line entry point: dataset generation, training, evaluation,
single rollouts, and report merging.

Every subcommand is fully seeded: re-running with identical inputs and
seeds reproduces byte-identical artifacts.  Each output directory gets a
meta JSON naming the resolved configuration and seed that produced it.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from doordiff.dataset import (
    DatasetError,
    DatasetManifest,
    Demonstration,
    NoiseLevels,
    SceneRanges,
    fit_normalizer,
    generate_demos,
    read_dataset,
    read_manifest,
    sample_scene_pool,
    training_arrays,
    write_dataset,
    write_manifest,
)
from doordiff.diffusion import (
    DiffusionConfig,
    DiffusionPlanner,
    Normalizer,
    NumericError,
    train,
)
from doordiff.metrics import (
    DEFAULT_THRESHOLDS,
    MetricError,
    build_report,
    report_csv,
    report_text,
)
from doordiff.nn.serialize import CheckpointError
from doordiff.runtime import (
    DiffusionPolicy,
    DisturbanceSpec,
    OraclePlanner,
    TraceError,
    evaluate_fleet,
    read_trace,
    rollout,
    write_trace,
)
from doordiff.world import GeometryError, handle_position


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo(meta: dict) -> None:
    print("config: " + json.dumps(meta, sort_keys=True))


def _parse_thresholds(text: str):
    try:
        values = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"bad threshold list {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise UsageError(f"thresholds must be positive, got {text!r}")
    return values


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    noise = NoiseLevels()

    demos, discarded = generate_demos(
        args.count, rng, pool="seen", horizon=args.horizon,
        controller_rate=args.controller_rate, noise=noise,
        record_every=args.record_every,
    )
    seen = sample_scene_pool(args.test_count, rng, pool="seen")
    unseen = sample_scene_pool(args.test_count, rng, pool="unseen")

    write_dataset(demos, out / "train.jsonl")
    for name, scenes in (("seen_test", seen), ("unseen_test", unseen)):
        pool = [Demonstration(scene=s, steps=(), termination="none") for s in scenes]
        write_dataset(pool, out / f"{name}.jsonl")

    normalization = fit_normalizer(demos).to_dict() if demos else {}
    manifest = DatasetManifest(
        global_seed=args.seed,
        horizon=args.horizon,
        controller_rate=args.controller_rate,
        record_every=args.record_every,
        counts={"train": len(demos), "seen_test": len(seen),
                "unseen_test": len(unseen)},
        discarded={"train": discarded},
        noise=dataclasses.asdict(noise),
        ranges={"seen": SceneRanges.seen().to_dict(),
                "unseen": SceneRanges.unseen().to_dict()},
        normalization=normalization,
    )
    write_manifest(manifest, out / "manifest.json")
    _echo({"subcommand": "gen-data", "seed": args.seed, "count": args.count,
           "test_count": args.test_count, "horizon": args.horizon,
           "discarded": discarded, "out": str(out)})
    return 0


# ---------------------------------------------------------------------------
# train


def _resolve_config(args) -> DiffusionConfig:
    base = DiffusionConfig().to_dict()
    if args.config:
        path = Path(args.config)
        try:
            overrides = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"config {path}: invalid JSON ({e})") from None
        unknown = set(overrides) - set(base)
        if unknown:
            raise UsageError(f"unknown config fields {sorted(unknown)}")
        base.update(overrides)
    if args.vision_only:
        base["vision_only"] = True
    return DiffusionConfig.from_dict(base)


def cmd_train(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(data / "manifest.json")
    if not manifest.normalization:
        raise DatasetError(f"{data / 'manifest.json'}: no normalization statistics "
                           "(was the dataset generated with --count 0?)")
    demos = read_dataset(data / "train.jsonl")
    plans, obs, cur, frc, groups = training_arrays(demos)

    config = _resolve_config(args)
    if config.horizon != manifest.horizon:
        raise DatasetError(
            f"config horizon {config.horizon} != dataset horizon {manifest.horizon}")
    normalizer = Normalizer.from_dict(manifest.normalization)
    planner = DiffusionPlanner(config, normalizer)
    ckpt = out / "model.ckpt"
    _echo({"subcommand": "train", "seed": args.seed, "epochs": args.epochs,
           "records": len(plans), "parameters": planner.parameter_count,
           "config": config.to_dict(), "out": str(out)})

    def checkpoint_epoch(epoch, loss):
        planner.save(str(ckpt))
        print(f"epoch {epoch}: loss {loss:.6f}", flush=True)

    try:
        curve = train(planner, plans, obs, cur, frc, epochs=args.epochs,
                      groups=groups, seed=args.seed, log=checkpoint_epoch)
    except NumericError:
        if ckpt.exists():
            print(f"numeric failure; last-good checkpoint retained at {ckpt}",
                  file=sys.stderr)
        raise
    planner.save(str(ckpt))
    _write_json(out / "loss_curve.json",
                {"seed": args.seed, "epochs": args.epochs, "losses": curve})
    _write_json(out / "train_meta.json",
                {"subcommand": "train", "seed": args.seed, "epochs": args.epochs,
                 "config": config.to_dict(), "data": str(data)})
    return 0


# ---------------------------------------------------------------------------
# eval / rollout helpers


def _load_policy(args):
    """Returns (planner object, row label)."""
    if args.planner == "oracle":
        return OraclePlanner(), "oracle"
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --planner oracle")
    planner = DiffusionPlanner.load(args.checkpoint)
    if getattr(args, "vision_only", False) and not planner.config.vision_only:
        planner = _mask_tactile(planner)
    label = "V" if planner.config.vision_only else "V+T"
    return DiffusionPolicy(planner), label


def _mask_tactile(planner: DiffusionPlanner) -> DiffusionPlanner:
    """Same weights, tactile branch disabled at inference."""
    config = dataclasses.replace(planner.config, vision_only=True)
    masked = DiffusionPlanner(config, planner.normalizer)
    for src, dst in zip(planner.params, masked.params):
        if src.name != dst.name or src.values.shape != dst.values.shape:
            raise CheckpointError("parameter mismatch while masking tactile branch")
        dst.values[...] = src.values
        masked.ema.shadow[dst.name][...] = planner.ema.shadow[src.name]
    return masked


def _scene_pool(data: Path, pool: str):
    path = data / f"{pool}_test.jsonl"
    records = read_dataset(path)
    if not records:
        raise DatasetError(f"{path}: empty scene pool")
    return [d.scene for d in records]


def _disturbance(args):
    if not args.disturbance:
        return None
    return DisturbanceSpec(seed=args.disturbance_seed)


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    thresholds = _parse_thresholds(args.thresholds)
    scenes = _scene_pool(data, args.pool)
    policy, label = _load_policy(args)
    spec = _disturbance(args)
    pool_label = args.pool + ("-disturbed" if spec else "")
    meta = {"subcommand": "eval", "seed": args.seed, "planner": label,
            "pool": pool_label, "episodes": len(scenes),
            "replan_every": args.replan_every,
            "disturbance": dataclasses.asdict(spec) if spec else None,
            "thresholds": list(thresholds),
            "checkpoint": args.checkpoint or None}
    _echo(meta)

    traces = evaluate_fleet(scenes, policy, np.random.default_rng(args.seed),
                            replan_every=args.replan_every, disturbance=spec)
    for i, trace in enumerate(traces):
        write_trace(trace, traces_dir / f"{i:04d}.jsonl")
    report = build_report(label, pool_label, traces, thresholds)
    (out / "report.csv").write_text(report_csv([report]))
    (out / "report.txt").write_text(report_text([report]))
    _write_json(out / "report.json", report.to_dict())
    _write_json(out / "eval_meta.json", meta)
    print(report_text([report]), end="")
    return 0


# ---------------------------------------------------------------------------
# rollout


def cmd_rollout(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = _scene_pool(data, args.pool)
    if not 0 <= args.scene_index < len(scenes):
        raise UsageError(f"--scene-index {args.scene_index} outside pool of {len(scenes)}")
    scene = scenes[args.scene_index]
    policy, label = _load_policy(args)
    spec = _disturbance(args)
    trace = rollout(scene, policy, np.random.default_rng(args.seed),
                    replan_every=args.replan_every, disturbance=spec)
    write_trace(trace, out / "trace.jsonl")
    meta = {"subcommand": "rollout", "seed": args.seed, "planner": label,
            "pool": args.pool, "scene_index": args.scene_index,
            "disturbance": dataclasses.asdict(spec) if spec else None,
            "termination": trace.termination}
    _write_json(out / "rollout_meta.json", meta)
    _echo(meta)
    print(f"termination: {trace.termination} after {trace.n_ticks} ticks, "
          f"max harmful {trace.harmful.max() if trace.n_ticks else 0.0:.2f} N")
    if args.plot:
        (out / "trace.svg").write_text(trace_svg(trace))
    return 0


def trace_svg(trace) -> str:
    """Deterministic dependency-free SVG: workspace view plus force strip."""
    scene = trace.scene
    width, height, strip = 640.0, 480.0, 140.0
    half = 1.7

    def sx(x):
        return 20.0 + (x + half) / (2 * half) * (width - 40.0)

    def sy(y):
        return 20.0 + (half - y) / (2 * half) * (height - 40.0)

    def poly(points, color, dash=""):
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5"'
                f'{extra} points="{pts}"/>')

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height + strip:.0f}" viewBox="0 0 {width:.0f} {height + strip:.0f}">',
        f'<rect width="{width:.0f}" height="{height + strip:.0f}" fill="white"/>',
    ]
    arc_angles = np.linspace(0.0, scene.success_angle * 1.2, 80)
    arc = handle_position(scene, arc_angles)
    parts.append(poly(arc, "#999999", dash="4 3"))
    hx, hy = scene.hinge_position
    parts.append(f'<circle cx="{sx(hx):.2f}" cy="{sy(hy):.2f}" r="4" fill="#333333"/>')
    if trace.n_ticks:
        parts.append(poly(trace.commands, "#cc6600"))
        parts.append(poly(trace.ee_positions, "#0055cc"))
        top = height + 10.0
        fmax = max(float(trace.harmful.max()), 10.0) * 1.1

        def fy(f):
            return top + (strip - 30.0) * (1.0 - f / fmax)

        n = trace.n_ticks
        pts = " ".join(
            f"{20.0 + (width - 40.0) * i / max(n - 1, 1):.2f},{fy(trace.harmful[i]):.2f}"
            for i in range(n))
        parts.append(f'<polyline fill="none" stroke="#cc0000" stroke-width="1" points="{pts}"/>')
        parts.append(f'<line x1="20" x2="{width - 20.0:.0f}" y1="{fy(10.0):.2f}" '
                     f'y2="{fy(10.0):.2f}" stroke="#888888" stroke-dasharray="2 3"/>')
        parts.append(f'<text x="24" y="{top + 12.0:.2f}" font-size="11" '
                     f'fill="#cc0000">harmful force (10 N reference)</text>')
    parts.append(f'<text x="24" y="36" font-size="12" fill="#333333">'
                 f'{trace.termination}, {trace.n_ticks} ticks</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for text in args.trace_dirs:
        cell = Path(text)
        meta_path = cell / "eval_meta.json"
        if not meta_path.exists():
            raise DatasetError(f"{cell}: no eval_meta.json (not an eval output?)")
        meta = json.loads(meta_path.read_text())
        trace_paths = sorted((cell / "traces").glob("*.jsonl"))
        if not trace_paths:
            raise DatasetError(f"{cell}: no traces")
        traces = [read_trace(p) for p in trace_paths]
        reports.append(build_report(meta["planner"], meta["pool"], traces,
                                    tuple(meta["thresholds"])))
    (out / "report.csv").write_text(report_csv(reports))
    (out / "report.txt").write_text(report_text(reports))
    _write_json(out / "report.json", [r.to_dict() for r in reports])
    print(report_text(reports), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="doordiff",
                     description="door-opening planner experiments")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate demonstrations and scene pools")
    p.add_argument("--count", type=int, default=2000, help="training demos")
    p.add_argument("--test-count", type=int, default=200, help="scenes per test pool")
    p.add_argument("--horizon", type=int, default=32)
    p.add_argument("--controller-rate", type=int, default=8)
    p.add_argument("--record-every", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the diffusion planner")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--config", help="JSON file with config field overrides")
    p.add_argument("--vision-only", action="store_true")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation over a scene pool")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--planner", choices=["oracle", "safediff"], default="safediff")
    p.add_argument("--pool", choices=["seen", "unseen"], default="seen")
    p.add_argument("--disturbance", action="store_true")
    p.add_argument("--disturbance-seed", type=int, default=0)
    p.add_argument("--vision-only", action="store_true",
                   help="mask the tactile branch of a loaded checkpoint")
    p.add_argument("--replan-every", type=int, default=8)
    p.add_argument("--thresholds", default="5,10,15,20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="run and record a single episode")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--planner", choices=["oracle", "safediff"], default="safediff")
    p.add_argument("--pool", choices=["seen", "unseen"], default="seen")
    p.add_argument("--scene-index", type=int, default=0)
    p.add_argument("--disturbance", action="store_true")
    p.add_argument("--disturbance-seed", type=int, default=0)
    p.add_argument("--vision-only", action="store_true")
    p.add_argument("--replan-every", type=int, default=8)
    p.add_argument("--plot", action="store_true", help="also write trace.svg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("report", help="merge eval outputs into one table")
    p.add_argument("trace_dirs", nargs="+", metavar="eval-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (DatasetError, TraceError, CheckpointError, MetricError, GeometryError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
