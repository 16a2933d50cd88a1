"""Command-line entry point: ``mvgeo <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config
from .evaluate import MODES, ablate, cloud_from_depth, cloud_from_points, evaluate_model
from .geometry import write_ply
from .gradcheck import check_model_gradients
from .synthgen import generate_scene, read_dataset, read_sample, write_dataset
from .train import load_model, train


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _config_for(ckpt: Path, explicit: str | None) -> TrainConfig:
    path = Path(explicit) if explicit else ckpt.parent / "config.txt"
    if not path.exists():
        raise SystemExit(f"no config found at {path}; pass --config")
    return load_config(path)


def cmd_synth(a) -> int:
    H, W = a.size
    samples = [generate_scene(a.seed + k, a.frames, H, W, n_tracks=a.tracks) for k in range(a.scenes)]
    write_dataset(samples, a.out, {"frames": a.frames, "size": f"{H}x{W}", "tracks": a.tracks})
    print(f"wrote {len(samples)} scenes to {a.out}")
    return 0


def cmd_train(a) -> int:
    cfg = load_config(a.config)
    res = train(cfg, read_dataset(a.data), a.out, resume=a.resume, log=print)
    print(f"checkpoint {res.checkpoint}  ({res.seconds:.1f}s)")
    return 0


def cmd_eval(a) -> int:
    cfg = _config_for(Path(a.ckpt), a.config)
    model, _ = load_model(a.ckpt, cfg)
    report = evaluate_model(model, read_dataset(a.data), cfg, a.mode)
    report.save(a.report)
    print(report.table())
    return 0


def cmd_ablate(a) -> int:
    cfg = load_config(a.config)
    attention = a.attention or not a.losses
    report = ablate(cfg, read_dataset(a.data), a.out, attention=attention, losses=a.losses, log=print)
    print(report.table())
    return 0


def cmd_gradcheck(a) -> int:
    res = check_model_gradients(full=a.full)
    for g, err in res.per_group.items():
        print(f"{g:12s} {err:.3e}")
    ok = res.max_rel_error < 1e-3
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_params} parameters "
          f"in {res.seconds:.1f}s: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_export_ply(a) -> int:
    cfg = _config_for(Path(a.ckpt), a.config)
    model, _ = load_model(a.ckpt, cfg)
    sample = read_sample(a.scene)
    out = model(sample.images)
    if a.source == "pointhead":
        pts = cloud_from_points(out.dense.points.data.astype(np.float64), sample.masks)
    else:
        pts = cloud_from_depth(out.camera.to_cameras(), out.dense.depth.data.astype(np.float64), sample.masks)
    colors = np.round(255 * np.moveaxis(sample.images, 1, -1)[sample.masks])
    write_ply(a.out, pts, colors)
    print(f"wrote {len(pts)} points to {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvgeo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--size", type=_size, required=True)
    s.add_argument("--tracks", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--mode", choices=MODES, default="both")
    s.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="attention-variant and loss ablations")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--attention", action="store_true")
    s.add_argument("--losses", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    s.add_argument("--full", action="store_true", help="probe every parameter coordinate (slow)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-ply", help="write a predicted point cloud")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--source", choices=("pointhead", "depthcam"), default="pointhead")
    s.add_argument("--config")
    s.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
