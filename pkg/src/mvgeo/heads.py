"""Camera, dense and tracking heads, and the composed model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, ConfigError, ModelConfig, TokenSequence
from .geometry import CameraParams
from .layers import Block, Conv, LayerNorm, Linear, Module, param
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    matmul,
    norm,
    resize_bilinear,
    sample_map,
    softmax,
)

IDENTITY_EXTRINSICS = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
# keeps the squashed field of view strictly inside (0, pi) even when the sigmoid saturates
FOV_MARGIN = 1e-4


@dataclass
class CameraPrediction:
    params: Tensor  # (N, 9): unit quaternion, translation, fov

    def to_cameras(self) -> list[CameraParams]:
        return [CameraParams.from_vector(g) for g in self.params.data.astype(np.float64)]


@dataclass
class DenseMaps:
    depth: Tensor  # (N, H, W)
    depth_conf: Tensor  # (N, H, W)
    points: Tensor  # (N, 3, H, W)
    points_conf: Tensor  # (N, H, W)
    features: Tensor  # (N, C, H, W)


@dataclass
class TrackPrediction:
    positions: Tensor  # (M, N, 2)
    vis_logits: Tensor  # (M, N)
    initial: Tensor  # (M, N, 2) soft-argmax positions before refinement


@dataclass
class ModelOutput:
    camera: CameraPrediction
    dense: DenseMaps
    tracks: TrackPrediction | None
    tokens: TokenSequence


class CameraHead(Module):
    """Self-attention over the N camera tokens followed by a linear read-out."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.dim
        self.norm_in = LayerNorm(d, dtype)
        self.blocks = [Block(d, cfg.heads, rng, dtype, cfg.mlp_ratio, cfg.layerscale_init)
                       for _ in range(cfg.camera_layers)]
        self.norm_out = LayerNorm(d, dtype)
        self.out = Linear(d, 9, rng, dtype, scale=0.1)
        fov0 = (np.radians(60.0) / np.pi - FOV_MARGIN) / (1 - 2 * FOV_MARGIN)
        logit0 = np.log(fov0 / (1 - fov0))
        self.out.bias.data[:] = [0, 0, 0, 1, 0, 0, 0, logit0, logit0]

    def __call__(self, camera_tokens: Tensor) -> CameraPrediction:
        N, d = camera_tokens.shape
        x = self.norm_in(camera_tokens).reshape(1, N, d)
        for blk in self.blocks:
            x = blk(x)
        raw = self.out(self.norm_out(x)).reshape(N, 9)
        q = raw[:, 0:4]
        q = q / broadcast_to(norm(q).reshape(N, 1), (N, 4))
        t = raw[:, 4:7]
        fov = (raw[:, 7:9].sigmoid() * (1 - 2 * FOV_MARGIN) + FOV_MARGIN) * np.pi
        ext = concat([q, t], axis=1)
        fixed = Tensor(IDENTITY_EXTRINSICS[None].astype(ext.dtype))
        ext = concat([fixed, ext[1:]], axis=0)
        return CameraPrediction(concat([ext, fov], axis=1))


class DenseHead(Module):
    """DPT-style decoder: four token taps fused coarse to fine, then 3x3 convs."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c = cfg.dense_dim
        self.proj = [Linear(cfg.dim, c, rng, dtype) for _ in range(4)]
        self.fuse = [Conv(c, c, 3, rng, dtype) for _ in range(4)]
        self.skip = Conv(3, c, 3, rng, dtype) if cfg.image_skip else None
        self.refine = Conv(c, c, 3, rng, dtype)
        self.out = Conv(c, 6 + cfg.track_dim, 3, rng, dtype, scale=0.1)

    def __call__(self, snapshots: list[Tensor], seq: TokenSequence, images: np.ndarray) -> DenseMaps:
        if len(snapshots) != 4:
            raise ConfigError(f"dense head needs 4 token snapshots, got {len(snapshots)}")
        N, _, H, W = images.shape
        h, w = seq.grid
        K = seq.n_image
        c = self.cfg.dense_dim
        maps = [p(s[:, :K]).transpose(0, 2, 1).reshape(N, c, h, w) for p, s in zip(self.proj, snapshots)]
        f = self.fuse[0](maps[3]).gelu()
        f = self.fuse[1](f + maps[2]).gelu()
        f = resize_bilinear(f, 2 * h, 2 * w)
        f = self.fuse[2](f + resize_bilinear(maps[1], 2 * h, 2 * w)).gelu()
        f = resize_bilinear(f, 4 * h, 4 * w)
        f = self.fuse[3](f + resize_bilinear(maps[0], 4 * h, 4 * w)).gelu()
        f = resize_bilinear(f, H, W)
        if self.skip is not None:
            f = f + self.skip(Tensor(np.asarray(images, dtype=f.dtype) - 0.5))
        f = self.refine(f).gelu()
        raw = self.out(f)
        floor = self.cfg.sigma_floor
        return DenseMaps(
            depth=raw[:, 0].exp(),
            depth_conf=raw[:, 1].exp() * (1.0 - floor) + floor,
            points=raw[:, 2:5],
            points_conf=raw[:, 5].exp() * (1.0 - floor) + floor,
            features=raw[:, 6:],
        )


class TrackingHead(Module):
    """Correlate a query feature with every frame, soft-argmax, then refine.

    Per (query, frame) the descriptor holds the log-probabilities of a
    (2r+1)^2 window of the correlation map around the soft-argmax position
    plus the spread of the soft-argmax distribution.  None of it depends on
    absolute position, so the refinement is translation-consistent.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        r = cfg.track_radius
        d = cfg.track_hidden
        self.embed = Linear((2 * r + 1) ** 2 + 2, d, rng, dtype)
        self.query_embed = param(rng.normal(0, 0.1, d), dtype)
        self.blocks = [Block(d, 2, rng, dtype, cfg.mlp_ratio, cfg.layerscale_init)
                       for _ in range(cfg.track_layers)]
        self.norm = LayerNorm(d, dtype)
        self.out = Linear(d, 3, rng, dtype, scale=0.1)
        o = np.arange(-r, r + 1, dtype=np.float64)
        oy, ox = np.meshgrid(o, o, indexing="ij")
        self.offsets = np.stack([ox.reshape(-1), oy.reshape(-1)], axis=-1)

    def __call__(self, features: Tensor, queries: np.ndarray, query_frame: int = 0) -> TrackPrediction:
        N, C, H, W = features.shape
        queries = np.asarray(queries, dtype=features.dtype).reshape(-1, 2)
        M = len(queries)
        if np.any(queries < 0) or np.any(queries[:, 0] > W - 1) or np.any(queries[:, 1] > H - 1):
            raise ValueError(f"query points must lie inside the {W}x{H} image")
        if not 0 <= query_frame < N:
            raise ValueError(f"query frame {query_frame} out of range for {N} frames")
        dt = features.dtype
        qf = sample_map(features[query_frame:query_frame + 1], Tensor(queries[None])).reshape(M, C)
        corr = matmul(qf, features.reshape(N, C, H * W)).transpose(1, 0, 2)  # (M, N, HW)
        corr = corr * (1.0 / self.cfg.softargmax_temp)
        prob = softmax(corr, axis=-1)
        ys, xs = np.meshgrid(np.arange(H, dtype=dt), np.arange(W, dtype=dt), indexing="ij")
        grid = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
        init = matmul(prob, Tensor(grid))  # (M, N, 2)
        second = matmul(prob, Tensor(grid * grid))
        spread = (second - init * init + 1.0).sqrt()

        cmax = Tensor(corr.data.max(axis=-1, keepdims=True))
        lse = ((corr - broadcast_to(cmax, corr.shape)).exp().sum(axis=-1)).log() + cmax.reshape(M, N)
        nwin = len(self.offsets)
        pts = broadcast_to(init.reshape(M * N, 1, 2), (M * N, nwin, 2)) + Tensor(self.offsets.astype(dt))
        win = sample_map(corr.reshape(M * N, 1, H, W), pts).reshape(M, N, nwin)
        logp = win - broadcast_to(lse.reshape(M, N, 1), (M, N, nwin))
        desc = concat([logp, spread.log()], axis=-1)

        onehot = np.zeros((N, 1), dtype=dt)
        onehot[query_frame] = 1.0
        x = self.embed(desc) + matmul(Tensor(onehot), self.query_embed.reshape(1, -1))
        for blk in self.blocks:
            x = blk(x)
        o = self.out(self.norm(x))  # (M, N, 3)
        return TrackPrediction(positions=init + o[..., 0:2], vis_logits=o[..., 2], initial=init)


class Model(Module):
    """Backbone plus the three heads sharing one backbone pass."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.cfg, rng, dtype)
        self.camera_head = CameraHead(self.cfg, rng, dtype)
        self.dense_head = DenseHead(self.cfg, rng, dtype)
        self.track_head = TrackingHead(self.cfg, rng, dtype)

    def __call__(self, images: np.ndarray, queries: np.ndarray | None = None,
                 query_frame: int = 0) -> ModelOutput:
        images = np.asarray(images, dtype=self.dtype)
        seq, snapshots = self.backbone(images - 0.5)
        camera = self.camera_head(seq.camera())
        dense = self.dense_head(snapshots, seq, images)
        tracks = None
        if queries is not None and len(queries):
            tracks = self.track_head(dense.features, queries, query_frame)
        return ModelOutput(camera, dense, tracks, seq)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)


def full_forward(model: Model, images: np.ndarray, queries: np.ndarray | None = None,
                 query_frame: int = 0) -> ModelOutput:
    return model(images, queries, query_frame)
