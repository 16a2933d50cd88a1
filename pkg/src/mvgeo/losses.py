"""Multi-task training objective: camera Huber, confidence-weighted depth and
point-map regression, and the tracking/visibility pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, norm, record, stack, where

NORMS = ("l1", "l2")


class DomainError(ValueError):
    pass


@dataclass
class LossConfig:
    lam: float = 0.05  # weight on the tracking pair
    alpha: float = 0.2  # weight of the -log(confidence) regulariser
    delta: float = 1.0  # Huber transition point
    norm: str = "l1"
    camera: bool = True
    depth: bool = True
    pmap: bool = True
    track: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.delta <= 0 or self.lam < 0 or self.alpha < 0:
            raise ValueError("delta must be positive, lam and alpha non-negative")


@dataclass
class LossBreakdown:
    camera: Tensor
    depth: Tensor
    pmap: Tensor
    track: Tensor
    visibility: Tensor
    total: Tensor
    lam: float
    alpha: float
    delta: float

    COMPONENTS = ("camera", "depth", "pmap", "track", "visibility", "total")

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).item()) for k in self.COMPONENTS}

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values().values())


def huber(r: Tensor, delta: float = 1.0) -> Tensor:
    """Summed Huber penalty of the residual entries."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    a = r.abs()
    quad = r.square() * 0.5
    lin = (a - 0.5 * delta) * delta
    return where(a.data <= delta, quad, lin).sum()


def camera_loss(pred: Tensor, gt: np.ndarray, delta: float = 1.0, fixed_first: bool = True) -> Tensor:
    """Huber over the 9-vector per frame.

    With ``fixed_first`` the first frame only contributes its field-of-view
    residual, since its extrinsics are pinned to the identity.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 9:
        raise ValueError(f"camera_loss: prediction {pred.shape} vs ground truth {gt.shape}")
    weight = np.ones(gt.shape, dtype=pred.dtype)
    if fixed_first:
        weight[0, :7] = 0.0
    return huber((pred - gt) * weight, delta)


def spatial_gradient(m, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Forward differences over the last two axes.

    Returns ``(grad, valid)`` with a new axis of size 2 (x then y) inserted
    before H.  The last column of the x component and the last row of the y
    component are zero, as is any difference touching a masked pixel.
    """
    m = m if isinstance(m, Tensor) else Tensor(m)
    *lead, H, W = m.shape
    lead = tuple(lead)
    zc = Tensor(np.zeros(lead + (H, 1), dtype=m.dtype))
    zr = Tensor(np.zeros(lead + (1, W), dtype=m.dtype))
    gx = concat([m[..., :, 1:] - m[..., :, :-1], zc], axis=-1)
    gy = concat([m[..., 1:, :] - m[..., :-1, :], zr], axis=-2)
    grad = stack([gx, gy], axis=-3)

    ok = np.ones(lead + (H, W), dtype=bool) if mask is None else np.broadcast_to(mask, lead + (H, W))
    vx = np.zeros_like(ok)
    vy = np.zeros_like(ok)
    vx[..., :, :-1] = ok[..., :, 1:] & ok[..., :, :-1]
    vy[..., :-1, :] = ok[..., 1:, :] & ok[..., :-1, :]
    valid = np.stack([vx, vy], axis=-3)
    return grad * valid.astype(m.dtype), valid


def _pixel_norm(r: Tensor, axes: int, kind: str) -> Tensor:
    """Collapse the trailing-channel block (``axes`` dims after the batch) per pixel.

    ``r`` is laid out channel-first: (N, *channel, H, W).
    """
    if axes == 0:
        return r.abs()
    N, H, W = r.shape[0], r.shape[-2], r.shape[-1]
    flat = r.reshape(N, -1, H, W)
    if kind == "l1":
        return flat.abs().sum(axis=1)
    return norm(flat, axis=1)


def aleatoric_map_loss(pred: Tensor, gt: np.ndarray, conf: Tensor, mask: np.ndarray,
                       alpha: float = 0.2, kind: str = "l1") -> Tensor:
    """Confidence-weighted residual plus gradient residual, minus alpha*log(conf).

    ``pred``/``gt`` are (N, H, W) or (N, C, H, W); ``conf`` and ``mask`` are
    (N, H, W).  Averaged over valid pixels, so the value may be negative.
    """
    if kind not in NORMS:
        raise ValueError(f"unknown norm {kind!r}")
    gt = np.asarray(gt, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs target {gt.shape}")
    if conf.shape != mask.shape or conf.shape != (pred.shape[0],) + pred.shape[-2:]:
        raise ValueError(f"confidence {conf.shape} / mask {mask.shape} do not match {pred.shape}")
    if np.any(conf.data[mask] <= 0):
        raise DomainError("confidence must be positive on valid pixels")
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))

    r = pred - gt
    chan = pred.ndim - 3
    pix_mask = mask if chan == 0 else mask[:, None]
    g, _ = spatial_gradient(r, pix_mask)
    res = _pixel_norm(r, chan, kind)
    gres = _pixel_norm(g, chan + 1, kind)
    w = mask.astype(pred.dtype)
    safe = where(mask, conf, np.ones(conf.shape, dtype=conf.dtype))
    per_pixel = conf * (res + gres) - safe.log() * alpha
    return (per_pixel * w).sum() * (1.0 / count)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; finite even for infinite logits."""
    y = np.asarray(labels, dtype=bool)
    x = logits.data
    if x.shape != y.shape:
        raise ValueError(f"logits {x.shape} vs labels {y.shape}")
    if x.size == 0:
        return Tensor(np.zeros((), dtype=x.dtype))
    signed = np.where(y, -x, x)  # loss = softplus(signed)
    per = np.logaddexp(0.0, signed)
    out = np.asarray(per.mean(), dtype=x.dtype)

    def back(g):
        s = 1.0 / (1.0 + np.exp(-np.clip(signed, -700, 700)))
        return ((np.where(y, -s, s) * (g / x.size)).astype(x.dtype),)

    return record(out, (logits,), back)


def track_loss(pred: Tensor, gt: np.ndarray, vis_logits: Tensor, gt_vis: np.ndarray) -> tuple[Tensor, Tensor]:
    """(coordinate term, visibility term).

    The coordinate term averages the Euclidean error over ground-truth-visible
    pairs and is 0 when there are none.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    vis = np.asarray(gt_vis, dtype=bool)
    if pred.shape != gt.shape or pred.shape[:-1] != vis.shape or vis_logits.shape != vis.shape:
        raise ValueError(f"track shapes disagree: {pred.shape}, {gt.shape}, {vis_logits.shape}, {vis.shape}")
    n_vis = int(vis.sum())
    if n_vis:
        err = norm(pred - gt, axis=-1)
        coord = (err * vis.astype(pred.dtype)).sum() * (1.0 / n_vis)
    else:
        coord = Tensor(np.zeros((), dtype=pred.dtype))
    return coord, bce_with_logits(vis_logits, vis)


def total_loss(out, sample, cfg: LossConfig | None = None) -> LossBreakdown:
    """Combine all terms for one model output and its (normalised) sample."""
    cfg = cfg or LossConfig()
    dt = out.camera.params.dtype
    zero = Tensor(np.zeros((), dtype=dt))
    cam = camera_loss(out.camera.params, sample.camera_array(), cfg.delta) if cfg.camera else zero
    dense = out.dense
    depth = (aleatoric_map_loss(dense.depth, sample.depth, dense.depth_conf, sample.masks, cfg.alpha, cfg.norm)
             if cfg.depth else zero)
    pmap = (aleatoric_map_loss(dense.points, sample.points, dense.points_conf, sample.masks, cfg.alpha, cfg.norm)
            if cfg.pmap else zero)
    if cfg.track and out.tracks is not None:
        trk, vis = track_loss(out.tracks.positions, sample.tracks, out.tracks.vis_logits, sample.track_vis)
    else:
        trk, vis = zero, zero
    total = cam + depth + pmap + (trk + vis) * cfg.lam
    return LossBreakdown(cam, depth, pmap, trk, vis, total, cfg.lam, cfg.alpha, cfg.delta)
