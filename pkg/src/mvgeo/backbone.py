"""Patch embedding, per-frame token assembly and the alternating-attention trunk."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .layers import NEG_INF, Block, Linear, Module, param
from .tensor import ShapeError, Tensor, broadcast_to, concat

ATTENTION_VARIANTS = ("alternating", "global", "cross")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 4  # number of (frame-wise, global) layer pairs
    dim: int = 64
    heads: int = 4
    patch: int = 14
    track_dim: int = 16
    dense_dim: int = 32
    layerscale_init: float = 0.01
    mlp_ratio: float = 4.0
    registers: int = 4
    camera_layers: int = 4
    track_layers: int = 2
    track_hidden: int = 32
    track_radius: int = 2
    softargmax_temp: float = 1.0
    sigma_floor: float = 1e-3
    attention: str = "alternating"
    image_skip: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ConfigError("dim must be a multiple of 4 for the 2-D positional embedding")
        if self.attention not in ATTENTION_VARIANTS:
            raise ConfigError(f"attention must be one of {ATTENTION_VARIANTS}")
        if self.softargmax_temp <= 0 or self.sigma_floor <= 0:
            raise ConfigError("temperature and confidence floor must be positive")

    @property
    def taps(self) -> tuple[int, ...]:
        """1-based pair indices whose outputs feed the dense head."""
        return tuple(math.ceil(k * self.depth / 4) for k in (1, 2, 3, 4))

    @property
    def layer_kinds(self) -> list[str]:
        second = {"alternating": "global", "global": "global", "cross": "cross"}[self.attention]
        first = "global" if self.attention == "global" else "frame"
        return [first, second] * self.depth

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TokenSequence:
    """Per-frame tokens laid out as ``[image (K), camera (1), registers (R)]``."""

    tokens: Tensor  # (N, K + 1 + R, dim)
    n_image: int
    grid: tuple[int, int]

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.tokens.shape[1]

    @property
    def first_frame(self) -> np.ndarray:
        flags = np.zeros(self.n_frames, dtype=bool)
        flags[0] = True
        return flags

    def image(self) -> Tensor:
        return self.tokens[:, :self.n_image]

    def camera(self) -> Tensor:
        return self.tokens[:, self.n_image]

    def registers(self) -> Tensor:
        return self.tokens[:, self.n_image + 1:]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.n_image, self.grid)


def sincos_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed (h*w, dim) embedding: sin/cos of row index, then of column index."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * omega[None]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, 3, H, W) -> (N, K, 3*p*p), patches in row-major grid order."""
    N, C, H, W = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image size {(H, W)} is not a multiple of patch {patch}")
    h, w = H // patch, W // patch
    x = images.reshape(N, C, h, patch, w, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(N, h * w, C * patch * patch)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.dim
        self.patch_embed = Linear(3 * cfg.patch**2, d, rng, dtype)
        self.camera_first = param(rng.normal(0, 0.1, (1, d)), dtype)
        self.camera_other = param(rng.normal(0, 0.1, (1, d)), dtype)
        self.register_first = param(rng.normal(0, 0.1, (cfg.registers, d)), dtype)
        self.register_other = param(rng.normal(0, 0.1, (cfg.registers, d)), dtype)
        self.layers = [Block(d, cfg.heads, rng, dtype, cfg.mlp_ratio, cfg.layerscale_init)
                       for _ in range(2 * cfg.depth)]

    def patchify(self, images: np.ndarray) -> Tensor:
        """Learned linear patch embedding plus the fixed 2-D positional code."""
        patches = extract_patches(np.asarray(images, dtype=self.dtype), self.cfg.patch)
        h, w = images.shape[2] // self.cfg.patch, images.shape[3] // self.cfg.patch
        pos = sincos_2d(h, w, self.cfg.dim).astype(self.dtype)
        return self.patch_embed(Tensor(patches)) + Tensor(pos)

    def assemble_tokens(self, image_tokens: Tensor, grid: tuple[int, int]) -> TokenSequence:
        N, K, d = image_tokens.shape
        first = concat([self.camera_first, self.register_first], axis=0)[None]
        special = [first]
        if N > 1:
            other = concat([self.camera_other, self.register_other], axis=0)[None]
            special.append(broadcast_to(other, (N - 1, 1 + self.cfg.registers, d)))
        special_t = concat(special, axis=0)
        return TokenSequence(concat([image_tokens, special_t], axis=1), K, grid)

    def _attend(self, layer: int, x: Tensor) -> Tensor:
        kind = self.cfg.layer_kinds[layer]
        block = self.layers[layer]
        N, T, d = x.shape
        if kind == "frame":
            return block(x)
        flat = x.reshape(1, N * T, d)
        bias = None
        if kind == "cross" and N > 1:
            frame_of = np.repeat(np.arange(N), T)
            bias = np.where(frame_of[:, None] == frame_of[None, :], NEG_INF, 0.0)
        return block(flat, bias).reshape(N, T, d)

    def aa_block(self, seq: TokenSequence, index: int) -> TokenSequence:
        """Apply layer pair ``index`` (0-based): frame-wise then global attention
        for the default variant."""
        x = self._attend(2 * index, seq.tokens)
        x = self._attend(2 * index + 1, x)
        return seq.with_tokens(x)

    def __call__(self, images: np.ndarray) -> tuple[TokenSequence, list[Tensor]]:
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValueError(f"expected a non-empty (N, 3, H, W) stack, got shape {images.shape}")
        grid = (images.shape[2] // self.cfg.patch, images.shape[3] // self.cfg.patch)
        seq = self.assemble_tokens(self.patchify(images), grid)
        taps = self.cfg.taps
        snapshots = []
        for i in range(self.cfg.depth):
            seq = self.aa_block(seq, i)
            snapshots.extend([seq.tokens] * taps.count(i + 1))
        return seq, snapshots
