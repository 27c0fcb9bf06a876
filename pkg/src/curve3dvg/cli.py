"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.
Every command writes one manifest.json into its output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .camera import CameraSamplerConfig, load_camera, ring_cameras
from .guidance import (GuidanceError, GuidanceExhausted, OracleGuidance, StreamGuidance, load_guidance,
                       load_oracle, render_depth)
from .optimize import (DISTANCES, FitConfig, LossConfig, RunError, adjacent_view_consistency, farthest_point_init,
                       fit, inference_opacities, load_net, random_init, save_checkpoint)
from .raster import Canvas, export_svg, write_png
from .render import build_scene2d, render_scene
from .scene import OpacityState, SceneFormatError, load_scene
from .schedule import ScheduleConfig, schedule_table
from .visibility import ImportanceNet, VisibilityConfig, path_importance, path_votes


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- configuration files -------------------------------------------------

_SECTIONS = {"schedule": ScheduleConfig, "fit": FitConfig, "visibility": VisibilityConfig, "loss": LossConfig}


def load_config(path: str | None) -> dict[str, dict]:
    """Split a JSON config into per-dataclass keyword dicts.

    Accepts nested sections named schedule/fit/visibility/loss, or flat
    keys routed by field name. Unknown keys are rejected.
    """
    out: dict[str, dict] = {k: {} for k in _SECTIONS}
    if path is None:
        return out
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    fields = {name: {f.name for f in dataclasses.fields(cls)} for name, cls in _SECTIONS.items()}
    for key, val in data.items():
        if key in _SECTIONS and isinstance(val, dict):
            unknown = set(val) - fields[key]
            if unknown:
                raise ValueError(f"unknown {key} config fields: {sorted(unknown)}")
            out[key].update(val)
            continue
        owners = [name for name, fs in fields.items() if key in fs]
        if not owners:
            raise ValueError(f"unknown config field {key!r}")
        for name in owners:
            out[name][key] = val
    if "t_range" in out["schedule"]:
        out["schedule"]["t_range"] = tuple(out["schedule"]["t_range"])
    out["schedule"].pop("alpha_bar", None)
    return out


def _views(spec: str, resolution: int, camera_files: list[str] | None):
    if camera_files:
        return [load_camera(p) for p in camera_files]
    kind, _, count = spec.partition(":")
    if kind != "ring" or not count.isdigit() or int(count) < 1:
        raise ValueError(f"--views expects ring:K, got {spec!r}")
    return ring_cameras(int(count), width=resolution, height=resolution)


def _oracle_for(args, scene_path: Path | None):
    if getattr(args, "oracle", None):
        return load_oracle(args.oracle)
    if scene_path is not None and (scene_path.parent / "oracle.json").exists():
        return load_oracle(str(scene_path.parent / "oracle.json"))
    return None


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, seed, inputs: dict,
                    outputs: list[str], started: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "argv": argv, "config": config, "seed": seed, "inputs": inputs,
                "outputs": sorted(outputs), "engine_version": __version__,
                "wall_clock_seconds": round(time.time() - started, 3)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


# --- commands ------------------------------------------------------------------

def cmd_fit(args, argv, started) -> int:
    cfgs = load_config(args.config)
    fit_kw = dict(cfgs["fit"])
    for key, val in (("total_steps", args.steps), ("n_paths", args.paths), ("seed", args.seed),
                     ("resolution", args.resolution), ("init", args.init)):
        if val is not None:
            fit_kw[key] = val
    if args.no_visibility:
        fit_kw["visibility"] = False
    fit_cfg = FitConfig(**fit_kw)
    schedule = ScheduleConfig(**{**cfgs["schedule"], "total_steps": fit_cfg.total_steps})
    vis_cfg = VisibilityConfig(**cfgs["visibility"])
    loss_cfg = LossConfig(**cfgs["loss"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([fit_cfg.seed, 2])
    oracle = None
    if args.guidance:
        source = StreamGuidance(load_guidance(args.guidance))
    else:
        oracle = load_oracle(args.oracle)
        sampler = CameraSamplerConfig(width=fit_cfg.resolution, height=fit_cfg.resolution)
        source = OracleGuidance(oracle, schedule, fit_cfg.batch_cameras, sampler, args.mode)
    if args.init_scene:
        init = load_scene(args.init_scene)
    elif fit_cfg.init == "farthest" and oracle is not None:
        init = farthest_point_init(oracle, fit_cfg.n_paths, rng, stroke_width=fit_cfg.stroke_width)
    else:
        init = random_init(fit_cfg.n_paths, rng, stroke_width=fit_cfg.stroke_width)
    result = fit(init, source, schedule, fit_cfg, loss_cfg, vis_cfg, log_path=out / "log.jsonl",
                 checkpoint_dir=out / "checkpoints")
    save_checkpoint(out, result.scene, result.net)
    outputs = ["scene.json", "net.bin", "log.jsonl"]
    if oracle is not None:
        (out / "oracle.json").write_text(json.dumps(oracle.to_dict(), indent=2) + "\n")
        outputs.append("oracle.json")
    config = {"fit": fit_cfg.to_dict(), "schedule": schedule.to_dict(), "visibility": dataclasses.asdict(vis_cfg),
              "loss": loss_cfg.to_dict(), "mode": args.mode}
    _write_manifest(out, "fit", argv, config, fit_cfg.seed,
                    {"oracle": args.oracle, "guidance": args.guidance, "init_scene": args.init_scene}, outputs, started)
    print(f"fit: final loss {result.log[-1]['loss_total']:.6f} after {fit_cfg.total_steps} steps -> {out}")
    return 0


def _load_scene_net(args):
    scene_path = Path(args.scene)
    scene = load_scene(scene_path)
    net = load_net(args.net) if args.net else None
    return scene_path, scene, net


def cmd_render(args, argv, started) -> int:
    if not (args.svg or args.png):
        raise ValueError("render needs --svg and/or --png")
    scene_path, scene, net = _load_scene_net(args)
    oracle = _oracle_for(args, scene_path)
    vis_cfg = VisibilityConfig()
    cams = _views(args.views, args.resolution, args.camera)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, cam in enumerate(cams):
        if args.show_invisible or (net is None and oracle is None):
            op = np.ones(scene.n_paths)
        else:
            fallback = net if net is not None else ImportanceNet(vis_cfg.n_freqs, vis_cfg.hidden)
            op = inference_opacities(scene, fallback, cam, oracle, vis_cfg)
        states = [OpacityState.high() if v >= 1.0 else OpacityState.low() for v in op]
        if args.png:
            write_png(out / f"view_{i:02d}.png", render_scene(scene, cam, states))
            outputs.append(f"view_{i:02d}.png")
        if args.svg:
            s2d = build_scene2d(scene, cam)
            svg = export_svg(s2d, Canvas(cam.width, cam.height), [bool(v >= 1.0) for v in op], vis_cfg.opacity_low)
            (out / f"view_{i:02d}.svg").write_text(svg)
            outputs.append(f"view_{i:02d}.svg")
    _write_manifest(out, "render", argv, {"views": args.views, "resolution": args.resolution,
                                          "show_invisible": args.show_invisible}, None,
                    {"scene": args.scene, "net": args.net, "oracle": args.oracle}, outputs, started)
    print(f"render: {len(cams)} views -> {out}")
    return 0


def cmd_metrics(args, argv, started) -> int:
    scene_path, scene, net = _load_scene_net(args)
    oracle = _oracle_for(args, scene_path)
    if args.distance not in DISTANCES:
        raise ValueError(f"unknown distance {args.distance!r}; known: {sorted(DISTANCES)}")
    cams = _views(args.views, args.resolution, None)
    score = adjacent_view_consistency(scene, net, cams, args.distance, oracle, not args.no_visibility)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"adjacent_view_consistency": score, "views": args.views, "distance": args.distance,
              "visibility": not args.no_visibility}
    (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n")
    _write_manifest(out, "metrics", argv, result, None, {"scene": args.scene, "net": args.net,
                                                         "oracle": args.oracle}, ["metrics.json"], started)
    print(json.dumps(result))
    return 0


def cmd_schedule(args, argv, started) -> int:
    cfgs = load_config(args.config)
    sched_kw = dict(cfgs["schedule"])
    if args.steps is not None:
        sched_kw["total_steps"] = args.steps
    elif "total_steps" in cfgs["fit"]:
        sched_kw.setdefault("total_steps", cfgs["fit"]["total_steps"])
    seed = args.seed if args.seed is not None else cfgs["fit"].get("seed", 0)
    cfg = ScheduleConfig(**sched_kw)
    rows = ["step,t,cfg_scale"] + [f"{s},{t},{c!r}" for s, t, c in schedule_table(cfg, seed)]
    text = "\n".join(rows) + "\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "schedule.csv").write_text(text)
    if args.dump:
        sys.stdout.write(text)
    _write_manifest(out, "schedule", argv, cfg.to_dict(), seed, {"config": args.config}, ["schedule.csv"], started)
    return 0


def _heat(v: float) -> np.ndarray:
    """Blue (0) to red (1)."""
    v = min(max(v, 0.0), 1.0)
    return np.array([v, 0.15, 1.0 - v, 1.0])


def cmd_viz(args, argv, started) -> int:
    scene_path, scene, net = _load_scene_net(args)
    oracle = _oracle_for(args, scene_path)
    vis_cfg = VisibilityConfig()
    if net is None:
        net = ImportanceNet(vis_cfg.n_freqs, vis_cfg.hidden)
    cams = _views(args.views, args.resolution, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, stats = [], []
    for i, cam in enumerate(cams):
        imp = path_importance(net, scene, cam, vis_cfg)
        heat = dataclasses.replace(scene, paths=tuple(dataclasses.replace(p, color=_heat(v))
                                                      for p, v in zip(scene.paths, imp)))
        write_png(out / f"importance_{i:02d}.png", render_scene(heat, cam))
        outputs.append(f"importance_{i:02d}.png")
        rec = {"view": i, "mean_importance": float(imp.mean()),
               "below_tau_alpha": int((imp < vis_cfg.tau_alpha).sum())}
        if oracle is not None:
            votes = path_votes(scene, cam, render_depth(oracle, cam), render_depth(oracle, cam.antipodal()), vis_cfg)
            colors = [np.array([0.1, 0.7, 0.2, 1.0]) if v else np.array([0.85, 0.1, 0.1, 1.0]) for v in votes]
            overlay = dataclasses.replace(scene, paths=tuple(dataclasses.replace(p, color=c)
                                                             for p, c in zip(scene.paths, colors)))
            write_png(out / f"votes_{i:02d}.png", render_scene(overlay, cam))
            outputs.append(f"votes_{i:02d}.png")
            rec["visible_votes"] = int(votes.sum())
        stats.append(rec)
    (out / "viz.json").write_text(json.dumps(stats, indent=2) + "\n")
    outputs.append("viz.json")
    _write_manifest(out, "viz", argv, {"views": args.views, "resolution": args.resolution}, None,
                    {"scene": args.scene, "net": args.net, "oracle": args.oracle}, outputs, started)
    print(f"viz: {len(cams)} views -> {out}")
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="curve3dvg", description="3D vector graphics: fit, render and inspect curve scenes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a scene to oracle or ingested guidance")
    src = f.add_mutually_exclusive_group()
    src.add_argument("--oracle", default="sphere", help="preset (sphere, sphere-box) or oracle JSON")
    src.add_argument("--guidance", help="directory of ingested guidance")
    f.add_argument("--paths", type=int)
    f.add_argument("--steps", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--resolution", type=int)
    f.add_argument("--init", choices=["farthest", "random"])
    f.add_argument("--init-scene", help="start from this scene JSON instead")
    f.add_argument("--mode", choices=["c2f", "fine", "coarse"], default="c2f", help="guidance detail schedule")
    f.add_argument("--no-visibility", action="store_true", help="render every curve at full opacity while fitting")
    f.add_argument("--config", help="JSON config")
    f.add_argument("--out", required=True)

    def scene_args(q, need_out=True):
        q.add_argument("--scene", required=True)
        q.add_argument("--net")
        q.add_argument("--oracle", help="oracle for depth voting; defaults to oracle.json beside the scene")
        q.add_argument("--views", default="ring:15")
        q.add_argument("--resolution", type=int, default=128)
        q.add_argument("--out", required=need_out, default=None if need_out else ".")

    r = sub.add_parser("render", help="render views to SVG and PNG")
    scene_args(r)
    r.add_argument("--camera", action="append", help="explicit camera JSON (repeatable); overrides --views")
    r.add_argument("--svg", action="store_true")
    r.add_argument("--png", action="store_true")
    r.add_argument("--show-invisible", action="store_true", help="draw culled curves at full opacity")

    m = sub.add_parser("metrics", help="adjacent-view consistency over a camera ring")
    scene_args(m, need_out=False)
    m.add_argument("--distance", default="pyramid-l2")
    m.add_argument("--no-visibility", action="store_true")

    s = sub.add_parser("schedule", help="dump the (step, t, cfg_scale) table")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--dump", action="store_true", help="print the CSV to stdout")
    s.add_argument("--out", default=".")

    v = sub.add_parser("viz", help="importance heat renders and vote overlays")
    scene_args(v)
    return p


COMMANDS = {"fit": cmd_fit, "render": cmd_render, "metrics": cmd_metrics, "schedule": cmd_schedule, "viz": cmd_viz}


def run_command(argv: list[str]) -> int:
    started = time.time()
    threads = os.environ.get("CURVE3DVG_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"CURVE3DVG_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, list(argv), started)
    except (ValueError, SceneFormatError, GuidanceError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunError, GuidanceExhausted, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
