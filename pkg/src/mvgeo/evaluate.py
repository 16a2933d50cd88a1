"""Scene-level evaluation and the attention / loss ablation runner."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import ATTENTION_VARIANTS
from .config import TrainConfig
from .geometry import CameraParams, unproject_depth, umeyama_align
from .heads import Model
from .metrics import (
    MetricReport,
    auc_at,
    chamfer,
    depth_abs_rel,
    relative_pose_errors,
    subsample,
    tracking_metrics,
)
from .synthgen import SceneSample
from .train import train

MODES = ("pointhead", "depthcam", "both")
POINT_LIMIT = 20_000


@dataclass
class Prediction:
    cameras: list[CameraParams]
    depth: np.ndarray  # (N, H, W)
    points: np.ndarray  # (N, 3, H, W)
    tracks: np.ndarray | None = None  # (M, N, 2)
    vis_logits: np.ndarray | None = None  # (M, N)


Predictor = Callable[[SceneSample], Prediction]


def model_predictor(model: Model) -> Predictor:
    def predict(sample: SceneSample) -> Prediction:
        out = model(sample.images, sample.queries, sample.query_frame)
        tr = out.tracks
        return Prediction(
            cameras=out.camera.to_cameras(),
            depth=out.dense.depth.data.astype(np.float64),
            points=out.dense.points.data.astype(np.float64),
            tracks=None if tr is None else tr.positions.data.astype(np.float64),
            vis_logits=None if tr is None else tr.vis_logits.data.astype(np.float64),
        )
    return predict


def oracle_predictor(sample: SceneSample) -> Prediction:
    """Ground truth dressed up as a prediction; scores the metric ceiling."""
    logits = np.where(sample.track_vis, 10.0, -10.0)
    return Prediction(list(sample.cameras), sample.depth.copy(), sample.points.copy(),
                      sample.tracks.copy(), logits)


def cloud_from_points(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.moveaxis(points, 1, -1)[mask]


def cloud_from_depth(cameras: Sequence[CameraParams], depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    H, W = depth.shape[1:]
    clouds = []
    for g, D, m in zip(cameras, depth, mask):
        D = np.where(m, np.maximum(D, 1e-9), 1.0)
        clouds.append(np.moveaxis(unproject_depth(g, D, W, H), 0, -1)[m])
    return np.concatenate(clouds)


def aligned_chamfer(pred: np.ndarray, gt: np.ndarray, seed: int):
    """Similarity-align ``pred`` to the paired ``gt`` cloud, then score Chamfer."""
    idx = subsample(np.arange(len(gt)), POINT_LIMIT, seed)
    p, g = pred[idx], gt[idx]
    sim = umeyama_align(p, g)
    return chamfer(sim.apply(p), g)


def scene_metrics(sample: SceneSample, pred: Prediction, mode: str = "both", seed: int = 0) -> dict[str, dict[str, float]]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    shared = {"depth_abs_rel": depth_abs_rel(pred.depth, sample.depth, sample.masks)}
    if sample.n_frames >= 2:
        errs = relative_pose_errors(pred.cameras, sample.cameras)
        shared.update(auc30=auc_at(errs, 30), auc15=auc_at(errs, 15), auc5=auc_at(errs, 5),
                      rra30=float(np.mean(errs.rotation < 30)), rta30=float(np.mean(errs.translation < 30)))
    if pred.tracks is not None:
        ts = tracking_metrics(pred.tracks, pred.vis_logits, sample.tracks, sample.track_vis)
        shared.update(delta_avg_vis=ts.delta_avg_vis, occlusion_acc=ts.occlusion_acc,
                      average_jaccard=ts.average_jaccard)
    gt_cloud = cloud_from_points(sample.points, sample.masks)
    rows = {}
    clouds = {
        "pointhead": lambda: cloud_from_points(pred.points, sample.masks),
        "depthcam": lambda: cloud_from_depth(pred.cameras, pred.depth, sample.masks),
    }
    for row in ("pointhead", "depthcam"):
        if mode in (row, "both"):
            c = aligned_chamfer(clouds[row](), gt_cloud, seed)
            rows[row] = {**shared, "chamfer_acc": c.accuracy, "chamfer_comp": c.completeness,
                         "chamfer_overall": c.overall}
    return rows


def evaluate(samples: Sequence[SceneSample], predictor: Predictor, mode: str = "both",
             seed: int = 0, meta: dict | None = None) -> MetricReport:
    """Mean of per-scene metrics, one report row per point-cloud route."""
    t0 = time.perf_counter()
    per_row: dict[str, list[dict[str, float]]] = {}
    for k, s in enumerate(samples):
        for row, vals in scene_metrics(s, predictor(s), mode, seed + k).items():
            per_row.setdefault(row, []).append(vals)
    report = MetricReport(meta={"seed": seed, "scenes": len(samples), **(meta or {})})
    for row, items in per_row.items():
        keys = sorted(set().union(*items))
        report.add(row, **{k: float(np.mean([it[k] for it in items if k in it])) for k in keys})
    report.meta["wall_time"] = round(time.perf_counter() - t0, 3)
    return report


def evaluate_model(model: Model, samples: Sequence[SceneSample], cfg: TrainConfig,
                   mode: str = "both") -> MetricReport:
    return evaluate(samples, model_predictor(model), mode, cfg.seed, {"config_hash": cfg.hash()})


# ---------------------------------------------------------------------------
# ablations

LOSS_ABLATIONS = {
    "loss-no_camera": {"loss.camera": False},
    "loss-no_depth": {"loss.depth": False},
    "loss-no_track": {"loss.track": False},
    "loss-all": {},
}


def variant_configs(cfg: TrainConfig, attention: bool = True, losses: bool = False) -> dict[str, TrainConfig]:
    out = {}
    if attention:
        for v in ATTENTION_VARIANTS:
            out[f"attn-{v}"] = cfg.with_updates(**{"model.attention": v})
    if losses:
        for name, upd in LOSS_ABLATIONS.items():
            out[name] = cfg.with_updates(**upd)
    return out


def ablate(cfg: TrainConfig, samples: Sequence[SceneSample], out_dir=None, attention: bool = True,
           losses: bool = False, log: Callable[[str], None] | None = None) -> MetricReport:
    """Train each variant with the same seed and budget, evaluate on the
    point-map route and collect one row per variant."""
    report = MetricReport(meta={"seed": cfg.seed, "config_hash": cfg.hash(), "steps": cfg.optim.steps})
    t0 = time.perf_counter()
    for name, vcfg in variant_configs(cfg, attention, losses).items():
        if log:
            log(f"== {name}")
        sub = Path(out_dir) / name if out_dir is not None else None
        res = train(vcfg, samples, sub, log=log)
        rows = evaluate(samples, model_predictor(res.model), "pointhead", vcfg.seed).rows["pointhead"]
        last = res.history[-1] if res.history else {}
        extra = {f"loss_{k}": last[k] for k in ("total", "camera", "depth", "pmap", "track", "visibility") if k in last}
        report.add(name, params=res.model.num_parameters(), **rows, **extra)
    report.meta["wall_time"] = round(time.perf_counter() - t0, 3)
    if out_dir is not None:
        report.save(Path(out_dir) / "ablation.json")
        (Path(out_dir) / "ablation.txt").write_text(report.table() + "\n")
    return report
