"""Finite-difference check of the full training loss on a micro model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig
from .heads import Model
from .losses import LossConfig, total_loss
from .synthgen import generate_scene
from .tensor import grad_check

MICRO = ModelConfig(depth=2, dim=16, heads=2, track_dim=8, dense_dim=8, track_hidden=8,
                    camera_layers=4, track_layers=1)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_params: int
    seconds: float
    per_group: dict[str, float]


def check_model_gradients(full: bool = False, seed: int = 0, max_entries: int = 6,
                          abs_floor: float = 1e-6, step: float = 1e-5) -> GradCheckResult:
    """Compare tape gradients of the total loss against central differences.

    By default a handful of coordinates plus one random direction are probed
    per parameter tensor; ``full`` probes every coordinate.
    """
    sample = generate_scene(seed, 2, 28, 28, n_tracks=4)
    model = Model(MICRO, seed=seed, dtype=np.float64)
    # lift confidences off the floor and perturb all weights away from init
    rng = np.random.default_rng(seed + 1)
    for _, p in model.named_parameters():
        p.data += rng.normal(0, 0.05, p.shape)
    cfg = LossConfig()

    def loss():
        out = model(sample.images, sample.queries, sample.query_frame)
        return total_loss(out, sample, cfg).total

    t0 = time.perf_counter()
    per_group = {}
    for name, p in model.named_parameters():
        p.name = name
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(p)
    for g, params in groups.items():
        per_group[g] = grad_check(loss, params, step=step, max_entries=None if full else max_entries,
                                  abs_floor=abs_floor, seed=seed)
    return GradCheckResult(max(per_group.values()), model.num_parameters(), time.perf_counter() - t0, per_group)
