"""Command-line entry point: ``neurt <subcommand> ...``.

Exit status: 0 on success, 2 on configuration errors (the message names the
offending key), 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .config import dump, load_file, resolve
from .dataset_io import SCENES, load_dataset, ring_cameras, synthesize
from .editing import apply_edits, load_script
from .errors import ConfigError, NeurtError
from .evaluation import evaluate, reference_composite, surface_weights
from .geometry import SilhouetteConfig, TraceConfig
from .images import linear_to_srgb, write_png, write_raw
from .lighting import PointLight
from .render import RenderConfig, render_image
from .training import fit, load_model, read_metrics

log = logging.getLogger("neurt")


def _common(p, out_help="output directory"):
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--config", help="flat JSON config file (dotted keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for rendering (default: available cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _render_flags(p):
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.bin)")
    p.add_argument("--data", help="dataset directory whose cameras (and lights) to use")
    p.add_argument("--split", default="test", help="dataset split: train, test or relight")
    p.add_argument("--views", type=int, default=8, help="ring cameras when --data is not given")
    p.add_argument("--size", type=int, default=128, help="image size for ring cameras")
    p.add_argument("--integrator", choices=("direct", "path", "normals", "light_direction", "silhouette"),
                   help="integrator (overrides render.integrator)")
    p.add_argument("--visibility", choices=("none", "hard", "learned"),
                   help="shadowing mode (overrides render.visibility)")
    p.add_argument("--edit", help="JSON edit script applied before rendering")
    p.add_argument("--raw", action="store_true", help="also write float32 raw dumps")


def build_parser():
    ap = argparse.ArgumentParser(prog="neurt", description="Differentiable SDF ray tracer: "
                                 "synthesise, reconstruct, render, relight, edit and evaluate scenes.")
    ap.add_argument("--version", action="version", version=f"neurt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic posed dataset of a built-in scene")
    _common(p, "dataset directory to create")
    p.add_argument("--scene", default="two_spheres", help="two_spheres, sphere or sphere_over_plane")
    p.add_argument("--views", type=int, default=16, help="training views on a ring")
    p.add_argument("--test-views", type=int, default=4, help="held-out views")
    p.add_argument("--lights", type=int, default=1, help="training light positions (frames cycle)")
    p.add_argument("--relight-lights", type=int, default=0, help="unseen light positions for a relight split")
    p.add_argument("--size", type=int, default=128, help="image width and height")
    p.add_argument("--no-metadata", action="store_true", help="withhold light metadata (learned lighting)")

    p = sub.add_parser("train", help="reconstruct a scene from a dataset")
    _common(p, "run directory (checkpoints, metrics.jsonl)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")

    p = sub.add_parser("render", help="render a checkpoint")
    _common(p)
    _render_flags(p)

    p = sub.add_parser("relight", help="render a checkpoint under a new point light")
    _common(p)
    _render_flags(p)
    p.add_argument("--light-position", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"),
                   help="world-space position of the new point light")
    p.add_argument("--intensity", type=float, nargs=3, default=[30.0, 30.0, 30.0], metavar=("R", "G", "B"),
                   help="RGB radiant intensity of the new light (default 30 30 30)")

    p = sub.add_parser("edit", help="render a checkpoint under an edit script")
    _common(p)
    _render_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    _common(p, "report directory (metrics.json, metrics.csv, figures)")
    _render_flags(p)
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    return ap


# ---------------------------------------------------------------------------


def _resolve(args):
    file_values = load_file(args.config) if args.config else {}
    overrides = list(args.overrides)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise ConfigError("--threads must be >= 1", key="threads")
    overrides += [f"render.threads={threads}", f"train.threads={threads}"]
    if getattr(args, "integrator", None):
        overrides.append(f"render.integrator={json.dumps(args.integrator)}")
    if getattr(args, "visibility", None):
        overrides.append(f"render.visibility={json.dumps(args.visibility)}")
    return resolve(file_values, overrides)


def render_config(cfg):
    return RenderConfig(
        integrator=cfg["render.integrator"], depth=cfg["render.depth"], spp=cfg["render.spp"],
        visibility=cfg["render.visibility"], background=tuple(cfg["render.background"]),
        trace=TraceConfig(cfg["trace.hit_eps"], cfg["trace.max_iters"], cfg["trace.step_scale"]),
        silhouette=SilhouetteConfig(samples=cfg["train.sil_samples"], alpha=cfg["train.sil_alpha"],
                                    beta=cfg["train.sil_beta"], jitter=False),
        threads=cfg["render.threads"], seed=cfg["render.seed"])


def _echo(cfg, out, args):
    os.makedirs(out, exist_ok=True)
    resolved = dict(cfg)
    resolved["command"] = args.command
    resolved["argv"] = sys.argv[1:]
    dump(resolved, os.path.join(out, "resolved_config.json"))


def cmd_synth(args, cfg):
    if args.scene not in SCENES:
        raise ConfigError(f"unknown scene {args.scene!r} (choose from {', '.join(SCENES)})", key="scene")
    for name in ("views", "lights", "size"):
        if getattr(args, name) < 1:
            raise ConfigError(f"--{name} must be >= 1", key=name)
    _echo(cfg, args.out, args)
    synthesize(args.out, args.scene, views=args.views, test_views=args.test_views,
               n_lights=args.lights, relight_lights=args.relight_lights, size=args.size,
               with_metadata=not args.no_metadata, threads=cfg["render.threads"])
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_train(args, cfg):
    dataset = load_dataset(args.data, "train")
    _echo(cfg, args.out, args)

    def progress(rec):
        if args.verbose and rec["step"] % 100 == 0:
            log.info("step %d stage %d loss %.5f (photo %.5f, sil %.5f)", rec["step"], rec["stage"],
                     rec["loss_total"], rec["loss_photo"], rec["loss_sil"])

    final, state = fit(cfg, dataset, args.out, resume=args.resume, progress=progress)
    last = state.history[-1] if state.history else {}
    print(f"trained {state.step} steps ({dataset.lighting} lighting); final loss "
          f"{last.get('loss_total', float('nan')):.6f}; checkpoint {final}")
    return 0


def _cameras_and_frames(args, extra):
    """(cameras, frames or None) for the render-family commands."""
    if args.data:
        ds = load_dataset(args.data, args.split)
        return [f.camera for f in ds.frames], ds
    center = extra["bounds"]["center"]
    radius = 2.5 * extra["bounds"]["radius"]
    return ring_cameras(args.views, radius=radius, size=args.size, target=center), None


def _load_scene(args, cfg):
    script = load_script(args.edit) if getattr(args, "edit", None) else None
    scene, _, extra = load_model(args.checkpoint)
    if scene.light is None:
        raise ConfigError("checkpoint has no light; use relight to supply one", key="light")
    if script is not None:
        scene = apply_edits(scene, script)
    return scene, extra


def _write_render(res, out, name, cfg, raw):
    srgb = cfg["render.srgb"] and cfg["render.integrator"] in ("direct", "path")
    write_png(os.path.join(out, f"{name}.png"), res.rgb, srgb=srgb)
    if raw:
        write_raw(os.path.join(out, f"{name}.raw"), res.rgba)


def _render_all(args, cfg, scene, extra, light_override=None):
    rcfg = render_config(cfg)
    cams, ds = _cameras_and_frames(args, extra)
    _echo(cfg, args.out, args)
    for i, cam in enumerate(cams):
        sc = scene
        if light_override is not None:
            sc = scene.with_light(light_override)
        elif ds is not None and extra["lighting"] == "known" and ds.frames[i].light is not None:
            sc = scene.with_light(ds.frames[i].light)
        res = render_image(sc, cam, rcfg, frame=i)
        name = ds.frames[i].name if ds is not None else f"view_{i:03d}"
        _write_render(res, args.out, name, cfg, args.raw)
    print(f"wrote {len(cams)} images to {args.out}")
    return 0


def cmd_render(args, cfg):
    scene, extra = _load_scene(args, cfg)
    return _render_all(args, cfg, scene, extra)


def cmd_edit(args, cfg):
    if not args.edit:
        raise ConfigError("edit requires --edit <script.json>", key="edit")
    return cmd_render(args, cfg)


def cmd_relight(args, cfg):
    script = load_script(args.edit) if args.edit else None
    light = PointLight(args.light_position, args.intensity)
    scene, _, extra = load_model(args.checkpoint)
    if extra["lighting"] == "learned":
        log.warning("checkpoint learned its lighting as a field; relighting replaces it with a point light")
    scene = scene.with_light(light)
    if script is not None:
        scene = apply_edits(scene, script)
    return _render_all(args, cfg, scene, extra, light_override=light)


def cmd_eval(args, cfg):
    if not args.data:
        raise ConfigError("eval requires --data", key="data")
    scene, extra = _load_scene(args, cfg)
    ds = load_dataset(args.data, args.split)
    rcfg = render_config(cfg)
    _echo(cfg, args.out, args)
    report, renders = evaluate(scene, ds, rcfg, lighting=extra["lighting"], keep_images=True)
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report.rows())
    for frame, res in zip(ds.frames, renders):
        _write_render(res, args.out, f"render_{frame.name}", cfg, args.raw)
    if not args.no_figures:
        from . import plotting

        plotting.frame_metrics(report, os.path.join(args.out, "frame_metrics.png"))
        log_path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "metrics.jsonl")
        if os.path.exists(log_path):
            plotting.loss_curve(read_metrics(log_path), os.path.join(args.out, "loss_curve.png"))
        f0 = ds.frames[0]
        plotting.comparison(linear_to_srgb(reference_composite(f0, rcfg.background)),
                            linear_to_srgb(renders[0].rgb), os.path.join(args.out, "comparison.png"),
                            title=f0.name)
        if hasattr(scene.bsdf, "weights"):
            w, a = surface_weights(scene, f0.camera, rcfg)
            plotting.weight_maps(w, a, os.path.join(args.out, "basis_weights.png"))
    print(report.table())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "relight": cmd_relight,
            "edit": cmd_edit, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"neurt: configuration error: {exc}", file=sys.stderr)
        return 2
    except (NeurtError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"neurt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
