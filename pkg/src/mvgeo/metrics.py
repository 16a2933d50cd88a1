"""Pose AUC, point-cloud accuracy/completeness, tracking scores and the report container."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraParams

TRACK_THRESHOLDS = (1, 2, 4, 8, 16)

# Every name a report may carry.  Rows are free-form labels, metric names are not.
METRIC_NAMES = (
    "auc30", "auc15", "auc5", "rra30", "rta30",
    "depth_abs_rel",
    "chamfer_acc", "chamfer_comp", "chamfer_overall",
    "delta_avg_vis", "occlusion_acc", "average_jaccard",
    "loss_total", "loss_camera", "loss_depth", "loss_pmap", "loss_track", "loss_visibility",
    "params", "train_seconds",
)


@dataclass
class PoseErrorSet:
    pairs: np.ndarray  # (P, 2) frame indices, i < j
    rotation: np.ndarray  # (P,) degrees
    translation: np.ndarray  # (P,) degrees

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def combined(self) -> np.ndarray:
        return np.maximum(self.rotation, self.translation)


@dataclass
class ChamferResult:
    accuracy: float
    completeness: float
    overall: float


@dataclass
class TrackingScores:
    delta_avg_vis: float
    occlusion_acc: float
    average_jaccard: float


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def vector_angle(a: np.ndarray, b: np.ndarray, eps: float = 1e-9) -> float:
    """Angle between two directions in degrees; 0 if either is (near) zero."""
    if np.linalg.norm(a) < eps or np.linalg.norm(b) < eps:
        return 0.0
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def relative_motion(ci: CameraParams, cj: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation taking camera-i coordinates to camera-j coordinates."""
    Rij = cj.R @ ci.R.T
    return Rij, cj.t - Rij @ ci.t


def relative_pose_errors(pred: Sequence[CameraParams], gt: Sequence[CameraParams]) -> PoseErrorSet:
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted cameras vs {len(gt)} ground-truth cameras")
    if len(gt) < 2:
        raise ValueError("relative pose errors need at least two frames")
    pairs, rot, trans = [], [], []
    for i, j in combinations(range(len(gt)), 2):
        Rp, tp = relative_motion(pred[i], pred[j])
        Rg, tg = relative_motion(gt[i], gt[j])
        pairs.append((i, j))
        rot.append(rotation_angle(Rp.T @ Rg))
        trans.append(vector_angle(tp, tg))
    return PoseErrorSet(np.array(pairs), np.array(rot), np.array(trans))


def accuracy_at(errors: np.ndarray, tau: float) -> float:
    return float(np.mean(np.asarray(errors) < tau))


def auc_at(errors: PoseErrorSet, tau_max: int = 30) -> float:
    """Mean accuracy of max(rotation, translation) error over thresholds 1..tau_max."""
    if tau_max <= 0:
        raise ValueError("tau_max must be positive")
    if len(errors) == 0:
        raise ValueError("empty error set")
    e = errors.combined
    taus = np.arange(1, int(tau_max) + 1)
    # one integer count and a single division, so the result is correctly rounded
    hits = int((e[None, :] < taus[:, None]).sum())
    return hits / (len(e) * len(taus))


def chamfer(pred: np.ndarray, gt: np.ndarray) -> ChamferResult:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer needs two non-empty clouds")
    _, to_gt = cKDTree(gt).query(pred)
    _, to_pred = cKDTree(pred).query(gt)
    # recompute exactly so results do not depend on the tree's arithmetic
    acc = float(np.mean(np.linalg.norm(pred - gt[to_gt], axis=1)))
    comp = float(np.mean(np.linalg.norm(gt - pred[to_pred], axis=1)))
    return ChamferResult(acc, comp, 0.5 * (acc + comp))


def subsample(points: np.ndarray, limit: int, seed: int) -> np.ndarray:
    if len(points) <= limit:
        return points
    idx = np.random.default_rng(seed).choice(len(points), limit, replace=False)
    return points[np.sort(idx)]


def depth_abs_rel(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no valid pixels")
    return float(np.mean(np.abs(pred[mask] - gt[mask]) / gt[mask]))


def tracking_metrics(pred: np.ndarray, pred_vis_logits: np.ndarray, gt: np.ndarray, gt_vis: np.ndarray,
                     thresholds: Sequence[float] = TRACK_THRESHOLDS) -> TrackingScores:
    """Position accuracy on visible points, occlusion accuracy and average Jaccard.

    A point is predicted visible when its logit is positive.  Ratios over an
    empty set count as 1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    gv = np.asarray(gt_vis, dtype=bool)
    pv = np.asarray(pred_vis_logits) > 0
    if pred.shape != gt.shape or pred.shape[:-1] != gv.shape or pv.shape != gv.shape:
        raise ValueError(f"tracking shapes disagree: {pred.shape}, {gt.shape}, {pv.shape}, {gv.shape}")
    dist = np.linalg.norm(pred - gt, axis=-1)
    deltas, jaccards = [], []
    for thr in thresholds:
        within = dist < thr
        n_vis = gv.sum()
        deltas.append((within & gv).sum() / n_vis if n_vis else 1.0)
        tp = (within & gv & pv).sum()
        fp = (pv & ~(within & gv)).sum()
        fn = (gv & ~(within & pv)).sum()
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else 1.0)
    oa = float(np.mean(pv == gv)) if gv.size else 1.0
    return TrackingScores(float(np.mean(deltas)), oa, float(np.mean(jaccards)))


@dataclass
class MetricReport:
    """Named rows of metrics plus run metadata, serialised as JSON."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)

    def add(self, row: str, **values: float) -> None:
        unknown = set(values) - set(METRIC_NAMES)
        if unknown:
            raise KeyError(f"unregistered metric names: {sorted(unknown)}")
        for k, v in values.items():
            if not np.isfinite(v):
                raise ValueError(f"metric {row}/{k} is not finite: {v}")
        self.rows.setdefault(row, {}).update({k: float(v) for k, v in values.items()})

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        rep = cls(meta=d.get("meta", {}))
        for row, vals in d["rows"].items():
            rep.add(row, **vals)
        return rep

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_json(Path(path).read_text())

    def table(self) -> str:
        cols = [m for m in METRIC_NAMES if any(m in r for r in self.rows.values())]
        head = ["row"] + cols
        body = [[name] + [f"{vals[c]:.4f}" if c in vals else "-" for c in cols]
                for name, vals in self.rows.items()]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])
