"""Command-line entry points: train, render, serve, demo.

Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import camera_init, scene_io
from .config import Config
from .core import LensParams, TrainView, ValidationError
from .rasterizer import RasterSettings, render
from .scene_io import (SyntheticSceneSpec, generate_synthetic, load_checkpoint,
                       read_image, save_checkpoint, write_image)
from .trainer import train

USAGE_EXIT = 2
ERROR_EXIT = 1


def _views_from_config(cfg: Config):
    """Build training views either from files or from the synthetic spec."""
    if cfg["data.scene"]:
        scene, cams, lenses = scene_io.load_scene(cfg["data.scene"])
        if cfg["data.poses"]:
            cams, jl = scene_io.load_views_json(cfg["data.poses"])
            lenses = [l if l is not None else LensParams(f=1.0) for l in jl]
        images = cfg["data.images"] or []
        if len(images) != len(cams):
            raise ValidationError(f"{len(images)} images for {len(cams)} views")
        views = [TrainView(index=m, camera=cams[m], lens=lenses[m],
                           image=read_image(images[m]))
                 for m in range(len(cams))]
        return scene, views
    spec = SyntheticSceneSpec(
        layout=cfg["data.synthetic.layout"],
        plane_depths=tuple(cfg["data.synthetic.plane_depths"]),
        count=cfg["data.synthetic.count"],
        width=cfg["data.synthetic.width"],
        height=cfg["data.synthetic.height"],
        focal_px=cfg["data.synthetic.focal_px"],
        n_views=cfg["data.synthetic.n_views"],
        ring_radius=cfg["data.synthetic.ring_radius"],
        f_star=cfg["data.synthetic.f_star"],
        q_star=cfg["data.synthetic.q_star"],
        opacity=cfg["data.synthetic.opacity"],
    )
    data = generate_synthetic(spec, seed=cfg["data.synthetic.seed"])
    return data.scene, data.views


def write_metrics_csv(path, metrics: list[dict]) -> None:
    fields = ["iter", "stage", "view", "l_rec", "l_detail", "l_mk", "l_reg", "total", "psnr"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in fields})


def cmd_train(args) -> int:
    if not Path(args.config).is_file():
        print(f"config file not found: {args.config}", file=sys.stderr)
        print("usage: dofsplat train -c CONFIG.json", file=sys.stderr)
        return USAGE_EXIT
    cfg = Config.load(args.config)
    scene, views = _views_from_config(cfg)

    # camera-init overwrites whatever lens values the data carried
    cams = [v.camera for v in views]
    for v, lens in zip(views, camera_init.init_lenses(scene, cams, tau=cfg["camera_init.tau"])):
        v.lens = lens

    result = train(scene, views, cfg.schedule(), cfg.train_config())
    save_checkpoint(cfg["out.checkpoint"], result.scene, result.views, result.iln,
                    result.optimizer, result.iterations, extra={"config": cfg.to_dict()})
    write_metrics_csv(cfg["out.metrics"], result.metrics)
    print(f"wrote {cfg['out.checkpoint']} and {cfg['out.metrics']} "
          f"({result.iterations} iterations, {len(result.scene)} gaussians)")
    return 0


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not (0 <= args.view < len(ckpt.views)):
        print(f"view {args.view} out of range (checkpoint has {len(ckpt.views)})",
              file=sys.stderr)
        return ERROR_EXIT
    view = ckpt.views[args.view]
    f = args.f if args.f is not None else view.lens.f
    q = 0.0 if args.aif else (args.Q if args.Q is not None else view.lens.Q)
    out = render(ckpt.scene, view.camera, LensParams(f=f, Q=q), RasterSettings())

    base = Path(args.output)
    wanted = [("color", out.color)]
    if args.depth:
        wanted.append(("depth", out.normalized_depth()))
    if args.coc:
        wanted.append(("coc", out.normalized_coc()))
    for name, img in wanted:
        if name != "color":
            hi = img.max()
            img = img / hi if hi > 0 else img
        path = base if len(wanted) == 1 else base.with_name(f"{base.stem}_{name}{base.suffix}")
        write_image(path, img)
        print(f"wrote {path}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.checkpoint, port=args.port, host=args.host, workers=args.workers)
    return 0


def cmd_demo(args) -> int:
    spec = SyntheticSceneSpec()
    data = generate_synthetic(spec, seed=args.seed)
    save_checkpoint(args.output, data.scene, data.views, extra={"demo": "two-plane"})
    print(f"wrote demo checkpoint {args.output} "
          f"({len(data.scene)} gaussians, {len(data.views)} views, "
          f"planes at depths {spec.plane_depths})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dofsplat",
                                description="depth-of-field Gaussian splatting tools")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a scene + per-view lens params from a config")
    t.add_argument("-c", "--config", required=True, help="JSON config path")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render maps from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--f", type=float, default=None, help="focal distance (default: trained)")
    r.add_argument("--Q", type=float, default=None, help="aperture parameter (default: trained)")
    r.add_argument("--aif", action="store_true", help="force Q=0 (all-in-focus)")
    r.add_argument("--depth", action="store_true", help="also write the depth map")
    r.add_argument("--coc", action="store_true", help="also write the CoC map")
    r.add_argument("-o", "--output", default="render.png")
    r.set_defaults(fn=cmd_render)

    s = sub.add_parser("serve", help="run the HTTP refocus service")
    s.add_argument("checkpoint")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--workers", type=int, default=4)
    s.set_defaults(fn=cmd_serve)

    d = sub.add_parser("demo", help="write the two-plane demo checkpoint")
    d.add_argument("-o", "--output", default="demo_checkpoint.npz")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, scene_io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR_EXIT
    except KeyboardInterrupt:
        return ERROR_EXIT


if __name__ == "__main__":
    sys.exit(main())
