"""Monte-Carlo envelope of the point-map camera fit under additive noise.

Mirrors tests/test_geometry.py::test_camera_from_noisy_pointmap: a random
camera, random depths in [1, 4] on a 24x32 map, Gaussian noise with standard
deviation 1% of the mean absolute coordinate.

    python3 scripts/pnp_noise.py [--trials 2000] [--seed 0]
"""

import argparse

import numpy as np

from mvgeo.geometry import CameraParams, camera_from_pointmap, unproject_depth
from mvgeo.metrics import rotation_angle


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.01)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    H, W = 24, 32
    errs = []
    for _ in range(args.trials):
        q = rng.normal(size=4)
        g0 = CameraParams(q / np.linalg.norm(q), rng.normal(size=3), rng.uniform(0.6, 1.6, 2))
        P = unproject_depth(g0, rng.uniform(1.0, 4.0, (H, W)), W, H)
        P = P + args.noise * np.abs(P).mean() * rng.normal(size=P.shape)
        g, _ = camera_from_pointmap(P, W, H)
        errs.append(rotation_angle(g.R.T @ g0.R))
    errs = np.array(errs)
    print(f"trials {args.trials}  noise {args.noise}")
    for p in (50, 90, 99, 100):
        print(f"  p{p:<3d} rotation error {np.percentile(errs, p):.4f} deg")


if __name__ == "__main__":
    main()
