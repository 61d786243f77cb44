"""Pinhole cameras, rigid poses and differentiable view synthesis.

Images and depth maps are NCHW batches.  A pose maps target-camera
coordinates into the auxiliary camera: ``X_a = R @ X_t + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEPTH_EPS = 1e-4


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) <= 0:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_euler(cls, rx: float, ry: float, rz: float, translation) -> "Pose":
        return cls(rotation_matrix(rx, ry, rz), np.asarray(translation, dtype=np.float64))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation"], dtype=np.float64), np.asarray(d["translation"], dtype=np.float64))


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation from XYZ Euler angles (radians), applied x then y then z."""
    cx_, sx = np.cos(rx), np.sin(rx)
    cy_, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rxm = np.array([[1, 0, 0], [0, cx_, -sx], [0, sx, cx_]])
    rym = np.array([[cy_, 0, sy], [0, 1, 0], [-sy, 0, cy_]])
    rzm = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rzm @ rym @ rxm


def pixel_grid(height: int, width: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.meshgrid(np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij")
    return u, v


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise T.ShapeError("geometry", x.shape, detail="expected C x H x W or N x C x H x W")


def _unbatch(x: Tensor, squeezed: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeezed else x


def backproject(depth: Tensor, K: CameraIntrinsics, strict: bool = False) -> Tensor:
    """Lift a depth map (1xHxW or Nx1xHxW) to camera-frame points (3xHxW).

    Depth below ``DEPTH_EPS`` raises in strict mode and is clamped otherwise.
    """
    d, squeezed = _as_batch(depth)
    if d.shape[1] != 1:
        raise T.ShapeError("backproject", d.shape, detail="depth must have one channel")
    if strict and np.any(d.data <= 0):
        raise GeometryError("backproject: nonpositive depth")
    if np.any(d.data < DEPTH_EPS):
        d = T.clamp(d, DEPTH_EPS, None)
    h, w = d.shape[2:]
    u, v = pixel_grid(h, w, d.dtype)
    rx = ((u - K.cx) / K.fx).astype(d.dtype)
    ry = ((v - K.cy) / K.fy).astype(d.dtype)
    pts = T.concat([d * rx, d * ry, d], axis=1)
    return _unbatch(pts, squeezed)


def _pose_arrays(poses, n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(poses, Pose):
        poses = [poses] * n
    if len(poses) != n:
        raise GeometryError(f"expected {n} poses, got {len(poses)}")
    r = np.stack([p.rotation for p in poses]).astype(dtype)
    t = np.stack([p.translation for p in poses]).astype(dtype)
    return r, t


def transform_points(points: Tensor, poses) -> Tensor:
    """Apply a pose (or one pose per batch item) to 3xHxW point maps."""
    p, squeezed = _as_batch(points)
    n = p.shape[0]
    r, t = _pose_arrays(poses, n, p.dtype)
    xs = [p[:, i : i + 1] for i in range(3)]
    out = []
    for row in range(3):
        acc = xs[0] * r[:, row, 0].reshape(n, 1, 1, 1)
        acc = acc + xs[1] * r[:, row, 1].reshape(n, 1, 1, 1)
        acc = acc + xs[2] * r[:, row, 2].reshape(n, 1, 1, 1)
        out.append(acc + t[:, row].reshape(n, 1, 1, 1))
    return _unbatch(T.concat(out, axis=1), squeezed)


def project(points: Tensor, pose, K: CameraIntrinsics) -> tuple[Tensor, np.ndarray]:
    """Pixel coordinates (2xHxW: u, v) of pose-transformed points.

    Returns the coordinates and a validity mask (1xHxW) that is 0 wherever
    the transformed point has z <= DEPTH_EPS.
    """
    p, squeezed = _as_batch(points)
    cam = transform_points(p, pose)
    z = cam[:, 2:3]
    valid = (z.data > DEPTH_EPS).astype(p.dtype)
    # keep the division finite for points behind the camera; they are masked anyway
    safe_z = z * valid + (1.0 - valid) * 1.0
    u = cam[:, 0:1] / safe_z * K.fx + K.cx
    v = cam[:, 1:2] / safe_z * K.fy + K.cy
    coords = T.concat([u, v], axis=1)
    if squeezed:
        return _unbatch(coords, True), valid[0]
    return coords, valid


def bilinear_warp(source: Tensor, coords: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample ``source`` at pixel ``coords`` (channel 0 = x, channel 1 = y)."""
    src, squeezed = _as_batch(source)
    c, _ = _as_batch(coords)
    if c.shape[1] != 2:
        raise T.ShapeError("bilinear_warp", c.shape, detail="coords must have 2 channels")
    out, mask = T.bilinear_sample(src, c[:, 0:1], c[:, 1:2])
    if squeezed:
        return _unbatch(out, True), mask[0]
    return out, mask


def synthesize_view(
    aux_image: Tensor,
    depth: Tensor,
    pose,
    K: CameraIntrinsics,
) -> tuple[Tensor, np.ndarray]:
    """Reconstruct the target view by sampling ``aux_image`` through ``depth``.

    The auxiliary image is always the clean frame; ``depth`` may come from
    either the clear or the corrupted branch.
    """
    img, squeezed = _as_batch(aux_image)
    d, _ = _as_batch(depth)
    if img.shape[0] != d.shape[0] or img.shape[2:] != d.shape[2:]:
        raise T.ShapeError("synthesize_view", img.shape, d.shape)
    pts = backproject(d, K)
    coords, front = project(pts, pose, K)
    warped, inb = bilinear_warp(img, coords)
    mask = front * inb
    if squeezed:
        return _unbatch(warped, True), mask[0]
    return warped, mask
