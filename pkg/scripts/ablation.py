"""Attention-variant and loss ablations on a fresh synthetic set.

    python3 scripts/ablation.py --out runs/ablation [--steps 1000] [--losses]
"""

import argparse
from pathlib import Path

from mvgeo.config import load_config
from mvgeo.evaluate import ablate
from mvgeo.synthgen import generate_scene, write_dataset

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.txt"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--scenes", type=int, default=8)
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--losses", action="store_true", help="also run the loss ablations")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = cfg.with_updates(**{"optim.steps": args.steps})
    H, W = cfg.data.size
    samples = [generate_scene(s, args.frames, H, W, n_tracks=cfg.data.tracks) for s in range(args.scenes)]
    out = Path(args.out)
    write_dataset(samples, out / "data")
    report = ablate(cfg, samples, out, attention=True, losses=args.losses, log=print)
    print(report.table())


if __name__ == "__main__":
    main()
