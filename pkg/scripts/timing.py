"""Wall-clock timings of the toy model on this machine.

    python3 scripts/timing.py [--frames 8] [--size 56]
"""

import argparse
import time

import numpy as np

from mvgeo.config import TrainConfig
from mvgeo.heads import Model
from mvgeo.synthgen import generate_scene
from mvgeo.train import train_step


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--size", type=int, default=56)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    cfg = TrainConfig()
    model = Model(cfg.model, seed=0)
    print(f"parameters {model.num_parameters()}")
    sample = generate_scene(0, args.frames, args.size, args.size)
    fwd = best_of(lambda: model(sample.images, sample.queries), args.repeats)
    print(f"forward  N={args.frames} {args.size}x{args.size}: best {fwd[0]:.3f}s  median {fwd[1]:.3f}s")
    four = generate_scene(0, 4, args.size, args.size)
    step = best_of(lambda: train_step(model, four, cfg), args.repeats)
    print(f"train step N=4 {args.size}x{args.size}: best {step[0]:.3f}s  median {step[1]:.3f}s"
          f"  (5000 steps ~ {5000 * step[1] / 60:.1f} min)")


if __name__ == "__main__":
    main()
