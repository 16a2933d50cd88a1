"""Procedural multi-view scenes with exact depth, point maps and tracks.

A scene is a handful of textured planes and spheres seen by cameras on a
jittered orbit.  Every pixel is ray cast, so depth is the nearest hit along
the pixel ray and the point map is the hit point itself; both come from the
same intersection and therefore satisfy ``unproject_depth(g, D) == P`` to
rounding.  Textures are value noise in each primitive's own normalised
coordinates, which makes the renders invariant to a global rescaling of the
scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from .geometry import (
    CameraParams,
    camera_rays,
    normalize_scene,
    unproject_pixels,
    world_to_cam,
)
from .tensor import Tensor, sample_map

MAGIC = b"VGTS"
FORMAT_VERSION = 1
MIN_VALID_FRACTION = 0.5
MIN_RELIEF_FRACTION = 0.02  # pixels off the most-seen surface, so no view is planar
MAX_PLACEMENT_RETRIES = 100


def _relief(idx: np.ndarray, valid: np.ndarray) -> float:
    """Fraction of the image covered by hits other than the dominant surface."""
    counts = np.bincount(idx[valid])
    return (counts.sum() - counts.max()) / idx.size


class GenerationError(RuntimeError):
    pass


@dataclass
class Plane:
    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half: np.ndarray
    colors: np.ndarray
    tex_freq: float
    tex_seed: int

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)

    def scaled(self, s: float) -> "Plane":
        return replace(self, center=self.center * s, half=self.half * s)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        n = self.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ n) / denom
        hit = o + t[..., None] * d
        rel = hit - self.center
        inside = (np.abs(rel @ self.u_axis) <= self.half[0]) & (np.abs(rel @ self.v_axis) <= self.half[1])
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & inside
        return np.where(ok, t, np.inf)

    def surface(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = p - self.center
        uv = np.stack([rel @ self.u_axis / self.half[0], rel @ self.v_axis / self.half[1],
                       np.zeros(p.shape[:-1])], axis=-1)
        return np.broadcast_to(self.normal, p.shape), uv


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    colors: np.ndarray
    tex_freq: float
    tex_seed: int

    def scaled(self, s: float) -> "Sphere":
        return replace(self, center=self.center * s, radius=self.radius * s)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - self.center
        a = (d * d).sum(-1)
        b = 2.0 * (d @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def surface(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = (p - self.center) / self.radius
        return n, n


Surface = Plane | Sphere


@dataclass
class RawScene:
    """World-space scene before normalisation."""

    surfaces: list
    cameras: list[CameraParams]
    light: np.ndarray
    seed: int

    def scaled(self, s: float) -> "RawScene":
        cams = [CameraParams(c.q, c.t * s, c.fov) for c in self.cameras]
        return RawScene([x.scaled(s) for x in self.surfaces], cams, self.light, self.seed)


@dataclass
class SceneSample:
    """Normalised multi-view sample; geometry lives in the first camera's frame."""

    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    cameras: list[CameraParams]
    depth: np.ndarray  # (N, H, W)
    points: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, H, W) bool
    tracks: np.ndarray  # (M, N, 2)
    track_vis: np.ndarray  # (M, N) bool
    seed: int = 0
    scale: float = 1.0
    query_frame: int = 0

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def queries(self) -> np.ndarray:
        return self.tracks[:, self.query_frame]

    def camera_array(self) -> np.ndarray:
        return np.stack([c.as_vector() for c in self.cameras])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "images": self.images,
            "cameras": self.camera_array(),
            "depth": self.depth,
            "points": self.points,
            "masks": self.masks.astype(np.uint8),
            "tracks": self.tracks,
            "track_vis": self.track_vis.astype(np.uint8),
            "seed": np.array([self.seed], dtype=np.int64),
            "scale": np.array([self.scale]),
            "query_frame": np.array([self.query_frame], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "SceneSample":
        return cls(
            images=a["images"],
            cameras=[CameraParams.from_vector(g) for g in a["cameras"]],
            depth=a["depth"],
            points=a["points"],
            masks=a["masks"].astype(bool),
            tracks=a["tracks"],
            track_vis=a["track_vis"].astype(bool),
            seed=int(a["seed"][0]),
            scale=float(a["scale"][0]),
            query_frame=int(a["query_frame"][0]),
        )


# ---------------------------------------------------------------------------
# texture


def value_noise(p: np.ndarray, seed: int, octaves: int = 3) -> np.ndarray:
    """Multi-octave 3-D value noise in [0, 1] at points ``p (..., 3)``."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    table = rng.random(256)
    total = np.zeros(p.shape[:-1])
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        q = p * (2.0**o)
        i0 = np.floor(q).astype(np.int64)
        f = q - i0
        f = f * f * (3 - 2 * f)
        acc = np.zeros(p.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    h = perm[(perm[(perm[(i0[..., 0] + dx) & 255] + i0[..., 1] + dy) & 255] + i0[..., 2] + dz) & 255]
                    w = ((f[..., 0] if dx else 1 - f[..., 0]) * (f[..., 1] if dy else 1 - f[..., 1])
                         * (f[..., 2] if dz else 1 - f[..., 2]))
                    acc += w * table[h]
        total += amp * acc
        norm += amp
        amp *= 0.5
    return total / norm


# ---------------------------------------------------------------------------
# scene sampling and rendering


def look_at(eye: np.ndarray, target: np.ndarray, fov) -> CameraParams:
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])
    return CameraParams.from_rt(R, -R @ eye, fov)


def _random_colors(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.1, 1.0, (2, 3))


def _sample_surfaces(rng: np.random.Generator) -> list:
    surfaces: list = [Plane(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                            np.array([3.0, 3.0]), _random_colors(rng), rng.uniform(3, 6),
                            int(rng.integers(2**31)))]
    for k in range(int(rng.integers(1, 4))):
        # the first extra is a sphere near the orbit target so every view has relief
        if k == 0 or rng.random() < 0.65:
            r = rng.uniform(0.5, 0.8) if k == 0 else rng.uniform(0.35, 0.8)
            xy = rng.uniform(-0.6, 0.6, 2) if k == 0 else rng.uniform(-1.4, 1.4, 2)
            surfaces.append(Sphere(np.array([xy[0], xy[1], r]), r, _random_colors(rng),
                                   rng.uniform(1.5, 3.5), int(rng.integers(2**31))))
        else:
            az = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(2.2, 2.8)
            c = np.array([dist * np.cos(az), dist * np.sin(az), 1.0])
            inward = -np.array([np.cos(az), np.sin(az), 0.0])
            u = np.cross(np.array([0, 0, 1.0]), inward)
            surfaces.append(Plane(c, u, np.array([0, 0, 1.0]), np.array([1.6, 1.0]),
                                  _random_colors(rng), rng.uniform(2, 5), int(rng.integers(2**31))))
    return surfaces


def cast(surfaces: Sequence, cam: CameraParams, H: int, W: int):
    """Nearest hit per pixel: (depth, hit index, world points, world ray dirs)."""
    dirs = camera_rays(cam, H, W) @ cam.R  # rotate camera-frame rays to world
    o = cam.center()
    ts = np.stack([s.intersect(o, dirs) for s in surfaces])
    idx = ts.argmin(axis=0)
    depth = np.take_along_axis(ts, idx[None], axis=0)[0]
    hit = o + np.where(np.isfinite(depth), depth, 0.0)[..., None] * dirs
    return depth, idx, hit, dirs


def render(raw: RawScene, H: int, W: int):
    """Images (N, 3, H, W), depth (N, H, W), world points (N, 3, H, W), masks."""
    N = len(raw.cameras)
    images = np.zeros((N, 3, H, W))
    depth = np.zeros((N, H, W))
    points = np.zeros((N, 3, H, W))
    masks = np.zeros((N, H, W), dtype=bool)
    for k, cam in enumerate(raw.cameras):
        d, idx, hit, dirs = cast(raw.surfaces, cam, H, W)
        valid = np.isfinite(d)
        rgb = np.zeros((H, W, 3))
        for si, s in enumerate(raw.surfaces):
            sel = valid & (idx == si)
            if not sel.any():
                continue
            n, tex = s.surface(hit[sel])
            n = np.where(((n * dirs[sel]).sum(-1) > 0)[:, None], -n, n)
            coords = tex * s.tex_freq
            a = value_noise(coords, s.tex_seed)
            b = value_noise(coords + 17.31, s.tex_seed + 1)
            albedo = s.colors[0] + (s.colors[1] - s.colors[0]) * a[:, None]
            albedo = albedo * (0.6 + 0.4 * b[:, None])
            shade = 0.35 + 0.65 * np.maximum(0.0, n @ raw.light)
            rgb[sel] = albedo * shade[:, None]
        images[k] = np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1)
        depth[k] = np.where(valid, d, 0.0)
        points[k] = np.where(valid[..., None], hit, 0.0).transpose(2, 0, 1)
        masks[k] = valid
    return images, depth, points, masks


def sample_raw_scene(seed: int, n_frames: int, H: int, W: int) -> RawScene:
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    surfaces = _sample_surfaces(rng)
    light = np.array([*rng.uniform(-0.6, 0.6, 2), 1.0])
    light /= np.linalg.norm(light)
    target = np.array([0.0, 0.0, 0.4]) + rng.uniform(-0.2, 0.2, 3)
    base_az = rng.uniform(0, 2 * np.pi)
    step = np.radians(rng.uniform(12, 30))
    cams = []
    for k in range(n_frames):
        for _ in range(MAX_PLACEMENT_RETRIES):
            az = base_az + k * step + np.radians(rng.uniform(-6, 6))
            el = np.radians(rng.uniform(20, 45))
            radius = rng.uniform(3.5, 5.0)
            eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            fx_deg = rng.uniform(50, 70)
            fov_x = np.radians(fx_deg)
            fov_y = 2 * np.arctan(np.tan(fov_x / 2) * H / W)
            cam = look_at(eye, target + rng.uniform(-0.15, 0.15, 3), (fov_x, fov_y))
            d, idx, *_ = cast(surfaces, cam, H, W)
            valid = np.isfinite(d)
            if valid.mean() >= MIN_VALID_FRACTION and _relief(idx, valid) >= MIN_RELIEF_FRACTION:
                cams.append(cam)
                break
        else:
            raise GenerationError(f"seed {seed}: no camera placement for frame {k} "
                                  f"after {MAX_PLACEMENT_RETRIES} retries")
    return RawScene(surfaces, cams, light, seed)


def build_tracks(cameras: Sequence[CameraParams], depth: np.ndarray, masks: np.ndarray,
                 n_queries: int, seed: int, tau: float = 0.02, query_frame: int = 0,
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth tracks by unprojecting query pixels and reprojecting them.

    Query pixels are drawn from the valid mask of ``query_frame``.  A
    reprojection is visible when it lands inside the image, in front of the
    camera, and its depth agrees with the bilinearly sampled target depth to
    within ``tau`` relative.  Positions are stored clamped to the image.
    """
    if n_queries < 1:
        raise ValueError("need at least one query")
    N, H, W = depth.shape
    rng = np.random.default_rng(seed)
    flat = np.flatnonzero(masks[query_frame])
    if len(flat) == 0:
        raise GenerationError("query frame has no valid pixel")
    pick = rng.choice(flat, size=n_queries, replace=len(flat) < n_queries)
    qi, qj = np.divmod(pick, W)
    qy = np.stack([qj, qi], axis=-1).astype(np.float64)
    p3 = unproject_pixels(cameras[query_frame], qy, depth[query_frame][qi, qj], W, H)
    tracks = np.zeros((n_queries, N, 2))
    vis = np.zeros((n_queries, N), dtype=bool)
    dmaps = Tensor(depth[:, None])
    for k, cam in enumerate(cameras):
        pc = world_to_cam(cam, p3)
        z = pc[:, 2]
        fx, fy = cam.focal(W, H)
        zs = np.where(z > 0, z, 1.0)
        y = np.stack([fx * pc[:, 0] / zs + W / 2, fy * pc[:, 1] / zs + H / 2], axis=-1)
        inside = (z > 0) & (y[:, 0] >= 0) & (y[:, 0] <= W - 1) & (y[:, 1] >= 0) & (y[:, 1] <= H - 1)
        yc = np.stack([np.clip(y[:, 0], 0, W - 1), np.clip(y[:, 1], 0, H - 1)], axis=-1)
        dsamp = sample_map(Tensor(dmaps.data[k:k + 1]), Tensor(yc[None])).data[0, :, 0]
        vis[:, k] = inside & (np.abs(z - dsamp) < tau * z)
        tracks[:, k] = yc
    tracks[:, query_frame] = qy
    vis[:, query_frame] = True
    return tracks, vis


def make_sample(cams: Sequence[CameraParams], images: np.ndarray, depth: np.ndarray,
                points: np.ndarray, masks: np.ndarray, n_tracks: int, seed: int,
                tau: float = 0.02) -> SceneSample:
    """Normalise world-space renders and attach tracks queried from frame 1."""
    ncams, P, D, scale = normalize_scene(cams, points, depth, masks)
    tracks, vis = build_tracks(ncams, D, masks, n_tracks, seed, tau)
    return SceneSample(images.astype(np.float32), ncams, D, P, masks.copy(), tracks, vis,
                       seed=seed, scale=scale)


def generate_scene(seed: int, n_frames: int, H: int, W: int, n_tracks: int = 16,
                   tau: float = 0.02, scale: float = 1.0) -> SceneSample:
    """Deterministic sample for ``seed``; ``scale`` rescales the raw world first."""
    raw = sample_raw_scene(seed, n_frames, H, W)
    if scale != 1.0:
        raw = raw.scaled(scale)
    images, depth, points, masks = render(raw, H, W)
    return make_sample(raw.cameras, images, depth, points, masks, n_tracks, seed, tau)


def select_frames(sample: SceneSample, frames: Sequence[int], n_tracks: int, seed: int,
                  tau: float = 0.02, crop: tuple[int, int] | None = None) -> SceneSample:
    """Sub-sample frames (the first listed becomes the reference), optionally
    centre-crop, then re-normalise and rebuild tracks."""
    frames = list(frames)
    images = sample.images[frames]
    depth = sample.depth[frames]
    points = sample.points[frames]
    masks = sample.masks[frames]
    cams = [sample.cameras[i] for i in frames]
    H, W = sample.size
    if crop is not None and tuple(crop) != (H, W):
        h2, w2 = crop
        if (H - h2) % 2 or (W - w2) % 2 or h2 > H or w2 > W:
            raise ValueError(f"crop {crop} must shrink {(H, W)} by an even amount")
        oy, ox = (H - h2) // 2, (W - w2) // 2
        sl = (Ellipsis, slice(oy, oy + h2), slice(ox, ox + w2))
        images, depth, points, masks = images[sl], depth[sl], points[sl], masks[sl]
        new = []
        for c in cams:
            fx, fy = c.focal(W, H)
            new.append(CameraParams(c.q, c.t, (2 * np.arctan(w2 / 2 / fx), 2 * np.arctan(h2 / 2 / fy))))
        cams = new
    out = make_sample(cams, images, depth, points, masks, n_tracks, seed, tau)
    out.scale = sample.scale * out.scale
    return out


# ---------------------------------------------------------------------------
# persistence


def write_sample(sample: SceneSample, path) -> None:
    binio.write_file(path, MAGIC, FORMAT_VERSION, sample.to_arrays())


def read_sample(path) -> SceneSample:
    arrays, _ = binio.read_file(path, MAGIC, FORMAT_VERSION)
    return SceneSample.from_arrays(arrays)


def scene_path(root, seed: int) -> Path:
    return Path(root) / "scenes" / f"scene_{seed}.vgts"


def write_dataset(samples: Sequence[SceneSample], path, params: dict | None = None) -> None:
    root = Path(path)
    for s in samples:
        write_sample(s, scene_path(root, s.seed))
    manifest = {"format_version": FORMAT_VERSION, "seeds": ",".join(str(s.seed) for s in samples)}
    manifest.update(params or {})
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in (Path(path) / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def read_dataset(path) -> list[SceneSample]:
    manifest = read_manifest(path)
    seeds = [int(s) for s in manifest["seeds"].split(",") if s]
    return [read_sample(scene_path(path, s)) for s in seeds]


def color_jitter(images: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Independent brightness/contrast/per-channel gain for every frame."""
    if strength <= 0:
        return images
    N = images.shape[0]
    gain = 1 + rng.uniform(-strength, strength, (N, 3, 1, 1))
    bright = rng.uniform(-strength, strength, (N, 1, 1, 1)) * 0.5
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    contrast = 1 + rng.uniform(-strength, strength, (N, 1, 1, 1))
    out = (images - mean) * contrast + mean
    return np.clip(out * gain + bright, 0.0, 1.0).astype(images.dtype)
