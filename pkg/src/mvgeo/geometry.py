"""Pinhole cameras, depth/point-map conversions, scene normalisation, alignment.

Conventions used throughout the package:

* quaternions are scalar-last ``[x, y, z, w]`` and ground truth keeps ``w >= 0``;
* extrinsics map world to camera, ``p_cam = R(q) p + t``;
* cameras look down +z with x right and y down;
* pixel ``(i, j)`` (row, column) sits at continuous image point ``(x=j, y=i)``
  and the principal point is ``(W/2, H/2)``;
* fields of view are radians, turned into focal lengths only at projection
  time: ``fx = (W/2) / tan(fov_x/2)``;
* dense maps are channel-first: depth ``(H, W)``, point maps ``(3, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


class GeometryError(ValueError):
    """Base class for invalid geometric input."""


class DegenerateError(GeometryError):
    """Rank-deficient or otherwise degenerate configuration."""


class BehindCameraError(GeometryError):
    """A point with non-positive depth was projected."""


class EmptySceneError(GeometryError):
    """No valid 3-D point to work with."""


class DataError(GeometryError):
    """Invalid dense data, e.g. non-positive depth at a valid pixel."""


def canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise DegenerateError("zero quaternion")
    q = q / n
    return -q if q[3] < 0 else q


@dataclass
class CameraParams:
    """Extrinsics (world to camera) plus per-axis field of view."""

    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fov: np.ndarray = field(default_factory=lambda: np.full(2, np.pi / 3))

    def __post_init__(self):
        self.q = canonical_quat(self.q)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.fov = np.asarray(self.fov, dtype=np.float64).reshape(2)
        if not np.all((self.fov > 0) & (self.fov < np.pi)):
            raise GeometryError(f"field of view {self.fov} outside (0, pi)")

    @classmethod
    def identity(cls, fov=(np.pi / 3, np.pi / 3)) -> "CameraParams":
        return cls(IDENTITY_QUAT.copy(), np.zeros(3), np.asarray(fov, dtype=np.float64))

    @classmethod
    def from_vector(cls, g: np.ndarray) -> "CameraParams":
        g = np.asarray(g, dtype=np.float64)
        return cls(g[:4], g[4:7], g[7:9])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray, fov) -> "CameraParams":
        return cls(rotmat_to_quat(R), t, fov)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t, self.fov])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def focal(self, W: int, H: int) -> tuple[float, float]:
        return focal_from_fov(self.fov, W, H)

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M


@dataclass
class SimilarityTransform:
    scale: float
    R: np.ndarray
    u: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(X) @ self.R.T + self.u


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a scalar-last quaternion (renormalised first)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise DegenerateError("zero quaternion")
    x, y, z, w = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    return canonical_quat(Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat())


def focal_from_fov(fov, W: int, H: int) -> tuple[float, float]:
    return (W / 2) / np.tan(fov[0] / 2), (H / 2) / np.tan(fov[1] / 2)


def fov_from_focal(fx: float, fy: float, W: int, H: int) -> np.ndarray:
    return np.array([2 * np.arctan((W / 2) / fx), 2 * np.arctan((H / 2) / fy)])


def world_to_cam(g: CameraParams, p: np.ndarray) -> np.ndarray:
    """Rigidly map world points ``(..., 3)`` into the camera frame."""
    return np.asarray(p, dtype=np.float64) @ g.R.T + g.t


def cam_to_world(g: CameraParams, pc: np.ndarray) -> np.ndarray:
    return (np.asarray(pc, dtype=np.float64) - g.t) @ g.R


def project(g: CameraParams, p: np.ndarray, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(..., 2)`` and depths ``(...)`` of world points."""
    pc = world_to_cam(g, p)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    fx, fy = g.focal(W, H)
    y = np.stack([fx * pc[..., 0] / z + W / 2, fy * pc[..., 1] / z + H / 2], axis=-1)
    return y, z


def pixel_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (x, y) coordinates of every pixel, each (H, W)."""
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    return xs, ys


def camera_rays(g: CameraParams, H: int, W: int) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape (H, W, 3)."""
    fx, fy = g.focal(W, H)
    xs, ys = pixel_grid(H, W)
    return np.stack([(xs - W / 2) / fx, (ys - H / 2) / fy, np.ones_like(xs)], axis=-1)


def unproject_pixels(g: CameraParams, y: np.ndarray, d: np.ndarray, W: int, H: int) -> np.ndarray:
    """World points of continuous pixels ``y (..., 2)`` at depths ``d (...)``."""
    fx, fy = g.focal(W, H)
    d = np.asarray(d, dtype=np.float64)
    pc = np.stack([(y[..., 0] - W / 2) / fx * d, (y[..., 1] - H / 2) / fy * d, d], axis=-1)
    return cam_to_world(g, pc)


def unproject_depth(g: CameraParams, D: np.ndarray, W: int, H: int,
                    mask: np.ndarray | None = None) -> np.ndarray:
    """Back-project a depth map into a (3, H, W) point map in world coordinates.

    With ``g`` expressed relative to the first camera the world frame is that
    camera's frame.  Masked-out pixels are returned as zeros.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (H, W):
        raise DataError(f"depth map shape {D.shape} does not match {(H, W)}")
    valid = np.ones_like(D, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(D[valid] <= 0):
        raise DataError("non-positive depth at a valid pixel")
    pc = camera_rays(g, H, W) * D[..., None]
    P = cam_to_world(g, pc)
    P[~valid] = 0.0
    return np.moveaxis(P, -1, 0)


def camera_from_pointmap(P: np.ndarray, W: int, H: int, mask: np.ndarray | None = None,
                         ) -> tuple[CameraParams, float]:
    """Fit the pinhole camera that observes point map ``P`` (3, H, W).

    Direct linear transform with the principal point fixed at the image
    centre, followed by orthonormalisation, focal extraction and a linear
    re-solve of the translation.  Returns the camera and the reprojection RMS
    in pixels.
    """
    P = np.asarray(P, dtype=np.float64)
    valid = np.ones((H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    xs, ys = pixel_grid(H, W)
    X = np.moveaxis(P, 0, -1)[valid]
    u = xs[valid] - W / 2
    v = ys[valid] - H / 2
    if len(X) < 6:
        raise DegenerateError(f"need at least 6 valid pixels, got {len(X)}")

    # condition the system: centre and scale both the points and the pixels
    mu = X.mean(axis=0)
    sx = np.sqrt(((X - mu) ** 2).sum(axis=1).mean() / 3) or 1.0
    Xn = (X - mu) / sx
    su = np.sqrt((u * u + v * v).mean() / 2) or 1.0
    un, vn = u / su, v / su
    ones = np.ones(len(X))
    zeros = np.zeros((len(X), 4))
    Xh = np.column_stack([Xn, ones])
    A = np.vstack([
        np.hstack([Xh, zeros, -un[:, None] * Xh]),
        np.hstack([zeros, Xh, -vn[:, None] * Xh]),
    ])
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] < 1e-9 * s[0]:
        raise DegenerateError("point map does not constrain a unique camera")
    M = Vt[-1].reshape(3, 4)
    # undo conditioning: pixels = diag(su, su, 1) M [ (X - mu)/sx ; 1 ]
    T = np.eye(4)
    T[:3, :3] /= sx
    T[:3, 3] = -mu / sx
    M = np.diag([su, su, 1.0]) @ M @ T
    M /= np.linalg.norm(M[2, :3])
    if (np.column_stack([X, ones]) @ M[2]).mean() < 0:
        M = -M
    fx = np.linalg.norm(M[0, :3])
    fy = np.linalg.norm(M[1, :3])
    Rraw = np.vstack([M[0, :3] / fx, M[1, :3] / fy, M[2, :3]])
    Uu, _, Vv = np.linalg.svd(Rraw)
    R = Uu @ Vv
    if np.linalg.det(R) < 0:
        raise DegenerateError("fitted rotation is a reflection")
    # translation by linear least squares given R, fx, fy
    Rx = X @ R.T
    B = np.vstack([
        np.column_stack([np.full(len(X), fx), np.zeros(len(X)), -u]),
        np.column_stack([np.zeros(len(X)), np.full(len(X), fy), -v]),
    ])
    rhs = np.concatenate([u * Rx[:, 2] - fx * Rx[:, 0], v * Rx[:, 2] - fy * Rx[:, 1]])
    t, *_ = np.linalg.lstsq(B, rhs, rcond=None)
    g = CameraParams.from_rt(R, t, fov_from_focal(fx, fy, W, H))
    pc = X @ g.R.T + g.t
    if np.any(pc[:, 2] <= 0):
        rms = float("inf")
    else:
        fx2, fy2 = g.focal(W, H)
        du = fx2 * pc[:, 0] / pc[:, 2] - u
        dv = fy2 * pc[:, 1] / pc[:, 2] - v
        rms = float(np.sqrt(np.mean(du * du + dv * dv)))
    return g, rms


def relative_to_first(cams: Sequence[CameraParams]) -> list[CameraParams]:
    """Re-express cameras in the frame of ``cams[0]``."""
    R1, t1 = cams[0].R, cams[0].t
    out = [CameraParams.identity(cams[0].fov)]
    for c in cams[1:]:
        Ri = c.R @ R1.T
        out.append(CameraParams.from_rt(Ri, c.t - Ri @ t1, c.fov))
    return out


def normalize_scene(cams: Sequence[CameraParams], P: np.ndarray, D: np.ndarray,
                    mask: np.ndarray | None = None,
                    ) -> tuple[list[CameraParams], np.ndarray, np.ndarray, float]:
    """Canonicalise ground truth: first camera at the origin, unit mean radius.

    ``P`` (N, 3, H, W) holds world points, ``D`` (N, H, W) depths and ``mask``
    (N, H, W) validity.  Returns the re-expressed cameras, point maps, depth
    maps and the scale that was divided out.
    """
    P = np.asarray(P, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    valid = np.ones(D.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EmptySceneError("no valid 3-D point to normalise")
    R1, t1 = cams[0].R, cams[0].t
    Pc = np.einsum("ij,njhw->nihw", R1, P) + t1[None, :, None, None]
    scale = float(np.linalg.norm(Pc, axis=1)[valid].mean())
    if not scale > 0:
        raise EmptySceneError("all valid points coincide with the first camera")
    out_cams = [CameraParams(c.q, c.t / scale, c.fov) for c in relative_to_first(cams)]
    Pn = np.where(valid[:, None], Pc / scale, 0.0)
    Dn = np.where(valid, D / scale, 0.0)
    return out_cams, Pn, Dn, scale


def umeyama_align(X: np.ndarray, Y: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity mapping points ``X`` (n, 3) onto ``Y`` (n, 3)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[0] < 3:
        raise GeometryError(f"need matching clouds of >= 3 points, got {X.shape} and {Y.shape}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    n = len(X)
    cov = Yc.T @ Xc / n
    U, s, Vt = np.linalg.svd(cov)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise DegenerateError("cross-covariance is rank deficient")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = (Xc * Xc).sum() / n
    scale = float(np.trace(np.diag(s) @ S) / var_x) if with_scale else 1.0
    u = my - scale * R @ mx
    return SimilarityTransform(scale, R, u)


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII PLY with ``x y z`` and optional 8-bit ``r g b`` per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.clip(np.asarray(colors).reshape(-1, 3), 0, 255).astype(np.uint8)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    body = []
    for i, p in enumerate(points):
        row = f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g}"
        if colors is not None:
            c = colors[i]
            row += f" {c[0]} {c[1]} {c[2]}"
        body.append(row)
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    n = next(int(l.split()[-1]) for l in text[:end] if l.startswith("element vertex"))
    rows = np.array([[float(v) for v in l.split()] for l in text[end + 1:end + 1 + n]]).reshape(n, -1)
    return rows[:, :3], (rows[:, 3:6].astype(np.uint8) if rows.shape[1] >= 6 else None)
