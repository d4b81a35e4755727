"""Pinhole camera with two-coefficient radial distortion.

Pixel coordinates put the origin at the top-left *corner* of the image, so
the centre of pixel ``(col, row)`` is ``(col + 0.5, row + 0.5)``.  Cameras
look down their +z axis; rotations map world to camera::

    X_cam = R @ X_world + t
    (x, y) = X_cam[:2] / X_cam[2]
    (x_d, y_d) = (x, y) * (1 + k1 r^2 + k2 r^4),   r^2 = x^2 + y^2
    u = fx * x_d + cx,  v = fy * y_d + cy

Distortion acts on normalized coordinates before the principal point is
added, so shifting (cx, cy) shifts every projection by exactly that amount.
All functions accept arrays with arbitrary leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCamera, NoConverge

BEHIND_EPS = 1e-9
UNDISTORT_TOL = 1e-10
UNDISTORT_MAX_ITER = 50
ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "k1", "k2"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """World-to-camera pose. ``rotation`` must be a proper rotation matrix."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, Extrinsics):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def from_center(cls, rotation, center) -> "Extrinsics":
        R = np.asarray(rotation, dtype=np.float64)
        return cls(R, -R @ np.asarray(center, dtype=np.float64))


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def with_principal_point(self, cx: float, cy: float) -> "Camera":
        return replace(self, intrinsics=replace(self.intrinsics, cx=cx, cy=cy))

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(height, width, 2) array of pixel-centre coordinates."""
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def _radial_factor(intr: Intrinsics, x, y):
    r2 = x * x + y * y
    return 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2


def distort_normalized(intr: Intrinsics, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    f = _radial_factor(intr, x, y)
    return np.stack([x * f, y * f], axis=-1)


def undistort_normalized(intr: Intrinsics, xy_d) -> np.ndarray:
    """Invert :func:`distort_normalized` by fixed-point iteration.

    Raises:
        NoConverge: some input is still off by more than ``UNDISTORT_TOL``
            after ``UNDISTORT_MAX_ITER`` iterations, which happens outside the
            injective domain of the radial model.
    """
    xy_d = np.asarray(xy_d, dtype=np.float64)
    if not intr.has_distortion:
        return xy_d.copy()
    xd, yd = xy_d[..., 0], xy_d[..., 1]
    x, y = xd.copy(), yd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        f = _radial_factor(intr, x, y)
        err = np.maximum(np.abs(x * f - xd), np.abs(y * f - yd))
        if np.all(err < UNDISTORT_TOL):
            break
        x, y = xd / f, yd / f
    else:
        f = _radial_factor(intr, x, y)
        err = np.maximum(np.abs(x * f - xd), np.abs(y * f - yd))
        if not np.all(err < UNDISTORT_TOL):
            raise NoConverge(
                f"undistortion did not converge (max residual {np.nanmax(err):.3g})"
            )
    return np.stack([x, y], axis=-1)


def world_to_camera(ext: Extrinsics, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ ext.rotation.T + ext.translation


def camera_to_world(ext: Extrinsics, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return (points - ext.translation) @ ext.rotation


def project_points(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns ``(uv, in_front)``.

    ``uv`` is NaN wherever the point is at or behind the camera plane.
    Coordinates are not clipped to the image.
    """
    pc = world_to_camera(camera.extrinsics, points)
    z = pc[..., 2]
    in_front = z > BEHIND_EPS
    zs = np.where(in_front, z, np.nan)
    xy = np.stack([pc[..., 0] / zs, pc[..., 1] / zs], axis=-1)
    xy_d = distort_normalized(camera.intrinsics, xy)
    intr = camera.intrinsics
    uv = np.stack([intr.fx * xy_d[..., 0] + intr.cx, intr.fy * xy_d[..., 1] + intr.cy], axis=-1)
    return uv, in_front


def project(camera: Camera, point) -> np.ndarray:
    """Project a single world point to pixel coordinates.

    Raises:
        BehindCamera: if the camera-frame depth is <= 1e-9.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise ValueError("point must be a finite 3-vector")
    uv, in_front = project_points(camera, point)
    if not in_front:
        raise BehindCamera(f"point {point.tolist()} is behind the camera")
    return uv


def normalized_rays(camera: Camera, pixels) -> np.ndarray:
    """Undistorted normalized coordinates ``(x, y)`` for pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    intr = camera.intrinsics
    xd = (pixels[..., 0] - intr.cx) / intr.fx
    yd = (pixels[..., 1] - intr.cy) / intr.fy
    return undistort_normalized(intr, np.stack([xd, yd], axis=-1))


def unproject(camera: Camera, pixel, depth) -> np.ndarray:
    """Lift pixel(s) at camera-frame depth ``z`` back to world coordinates."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    xy = normalized_rays(camera, pixel)
    shape = np.broadcast_shapes(xy[..., 0].shape, depth.shape)
    pc = np.stack(
        [xy[..., 0] * depth, xy[..., 1] * depth, np.broadcast_to(depth, shape)], axis=-1
    )
    return camera_to_world(camera.extrinsics, pc)


def camera_depth(camera: Camera, points) -> np.ndarray:
    """Camera-frame z of world points."""
    return world_to_camera(camera.extrinsics, points)[..., 2]
