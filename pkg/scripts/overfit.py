"""Overfit the toy model on a small synthetic set and score it on that set.

    python3 scripts/overfit.py --out runs/overfit [--steps 5000]
"""

import argparse
import time
from pathlib import Path

from mvgeo.config import load_config
from mvgeo.evaluate import evaluate_model
from mvgeo.synthgen import generate_scene, write_dataset
from mvgeo.train import train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "overfit.txt"))
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--scenes", type=int, default=8)
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = cfg.with_updates(**{"optim.steps": args.steps})
    H, W = cfg.data.size
    samples = [generate_scene(s, cfg.data.frames_max, H, W, n_tracks=cfg.data.tracks) for s in range(args.scenes)]
    out = Path(args.out)
    write_dataset(samples, out / "data")
    t0 = time.perf_counter()
    res = train(cfg, samples, out, log=print, log_every=250)
    report = evaluate_model(res.model, samples, cfg)
    report.meta["train_seconds"] = round(time.perf_counter() - t0, 1)
    report.save(out / "report.json")
    print(report.table())
    print(f"trained {cfg.optim.steps} steps in {res.seconds:.0f}s")


if __name__ == "__main__":
    main()
