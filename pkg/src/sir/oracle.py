"""Synthetic aerial scene with exact ground truth.

The terrain is a height field ``z = h(x, y)`` over a rectangular extent,
built from seeded value noise.  Noise lattice values come from a fixed
64-bit integer hash (splitmix64 finalizer), never from a library RNG, so a
given seed yields the same scene everywhere.  Views are rendered by
marching each pixel ray against the height field and refining the crossing
by bisection; the recorded depth is the camera-frame z of the hit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .geometry import Camera, Extrinsics, Intrinsics, normalized_rays, project_points
from .model_io import (
    DepthMap,
    SceneModel,
    SparsePoint,
    View,
    ensure_dir,
    write_depth,
    write_image,
    write_sparse_model,
)

HEIGHT_OCTAVES = 3
BISECT_TOL = 1e-6
LIGHT = np.array([0.4, 0.3, 1.0]) / np.linalg.norm([0.4, 0.3, 1.0])

_K1 = np.uint64(0x9E3779B97F4A7C15)
_K2 = np.uint64(0xC2B2AE3D27D4EB4F)
_K3 = np.uint64(0x165667B19E3779F9)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def _lattice(ix, iy, seed):
    z = (np.uint64(ix) * _K1) ^ (np.uint64(iy) * _K2) ^ (np.uint64(seed) * _K3)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    z = z ^ (z >> _S31)
    return float(z >> _S11) * _INV53


@njit(cache=True)
def _value_noise(x, y, seed):
    fx = math.floor(x)
    fy = math.floor(y)
    ix = np.int64(fx)
    iy = np.int64(fy)
    tx = x - fx
    ty = y - fy
    sx = tx * tx * (3.0 - 2.0 * tx)
    sy = ty * ty * (3.0 - 2.0 * ty)
    v00 = _lattice(ix, iy, seed)
    v10 = _lattice(ix + 1, iy, seed)
    v01 = _lattice(ix, iy + 1, seed)
    v11 = _lattice(ix + 1, iy + 1, seed)
    a = v00 + (v10 - v00) * sx
    b = v01 + (v11 - v01) * sx
    return a + (b - a) * sy


@njit(cache=True)
def _fbm(x, y, seed, octaves, wavelength, persistence):
    """Sum of octaves in [-1, 1); wavelength halves each octave."""
    total = 0.0
    norm = 0.0
    amp = 1.0
    lam = wavelength
    for o in range(octaves):
        total += amp * (2.0 * _value_noise(x / lam, y / lam, seed * 131 + o) - 1.0)
        norm += amp
        amp *= persistence
        lam *= 0.5
    return total / norm


@njit(cache=True)
def _height(x, y, seed, amplitude, wavelength):
    if amplitude == 0.0:
        return 0.0
    return amplitude * _fbm(x, y, seed, HEIGHT_OCTAVES, wavelength, 0.5)


@njit(cache=True)
def _height_many(xs, ys, seed, amplitude, wavelength):
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        out[k] = _height(xs[k], ys[k], seed, amplitude, wavelength)
    return out


@njit(cache=True)
def _albedo_many(xs, ys, seed, octaves, wavelength, persistence):
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        a = _fbm(xs[k], ys[k], seed + 7919, octaves, wavelength, persistence)
        out[k] = 0.1 + 0.9 * (0.5 + 0.5 * a)
    return out


@njit(cache=True)
def _cast(rays, rotT, center, seed, amplitude, wavelength, step, tol):
    """Ray-march every pixel; returns camera-frame depth (0 on miss)."""
    h, w = rays.shape[0], rays.shape[1]
    depth = np.zeros((h, w))
    zmax = abs(amplitude) + 1e-9
    for r in range(h):
        for c in range(w):
            x = rays[r, c, 0]
            y = rays[r, c, 1]
            dx = rotT[0, 0] * x + rotT[0, 1] * y + rotT[0, 2]
            dy = rotT[1, 0] * x + rotT[1, 1] * y + rotT[1, 2]
            dz = rotT[2, 0] * x + rotT[2, 1] * y + rotT[2, 2]
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            # parameter t is camera-frame depth; world point = center + t * d
            if dz < 0.0:
                t0 = (zmax - center[2]) / dz
                t1 = (-zmax - center[2]) / dz
            elif dz > 0.0:
                t0 = (-zmax - center[2]) / dz
                t1 = (zmax - center[2]) / dz
            else:
                if abs(center[2]) > zmax:
                    continue
                t0 = 0.0
                t1 = 1e6
            if t1 <= 0.0:
                continue
            t0 = max(t0, 1e-6)
            dt = step / norm
            ta = t0
            fa = center[2] + ta * dz - _height(center[0] + ta * dx, center[1] + ta * dy, seed, amplitude, wavelength)
            if fa <= 0.0:
                continue
            hit = False
            tb = ta
            while ta < t1:
                tb = min(ta + dt, t1)
                fb = center[2] + tb * dz - _height(center[0] + tb * dx, center[1] + tb * dy, seed, amplitude, wavelength)
                if fb <= 0.0:
                    hit = True
                    break
                ta = tb
                if tb >= t1:
                    break
            if not hit:
                continue
            while (tb - ta) * norm > tol:
                tm = 0.5 * (ta + tb)
                fm = center[2] + tm * dz - _height(center[0] + tm * dx, center[1] + tm * dy, seed, amplitude, wavelength)
                if fm > 0.0:
                    ta = tm
                else:
                    tb = tm
            depth[r, c] = 0.5 * (ta + tb)
    return depth


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 42
    extent: tuple[float, float, float, float] = (-50.0, -50.0, 50.0, 50.0)
    height_amplitude: float = 4.0
    texture_octaves: int = 6
    height_wavelength: float = 40.0
    texture_wavelength: float = 4.0
    texture_persistence: float = 0.8

    def __post_init__(self):
        x0, y0, x1, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"extent must be nonempty, got {self.extent}")
        if self.height_amplitude < 0:
            raise ValueError("height_amplitude must be >= 0")
        if int(self.texture_octaves) != self.texture_octaves or self.texture_octaves < 1:
            raise ValueError("texture_octaves must be a positive integer")
        if self.height_wavelength <= 0 or self.texture_wavelength <= 0:
            raise ValueError("wavelengths must be positive")
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    @property
    def min_height_wavelength(self) -> float:
        return self.height_wavelength / 2 ** (HEIGHT_OCTAVES - 1)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["extent"] = tuple(d["extent"])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruthView:
    image: np.ndarray
    depth: np.ndarray
    camera: Camera

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


class Scene:
    """Immutable terrain defined by a :class:`SceneSpec`."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec

    def height(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        s = self.spec
        out = _height_many(x.ravel().copy(), y.ravel().copy(), s.seed, s.height_amplitude, s.height_wavelength)
        return out.reshape(x.shape)

    def albedo(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        s = self.spec
        out = _albedo_many(
            x.ravel().copy(), y.ravel().copy(), s.seed, s.texture_octaves, s.texture_wavelength, s.texture_persistence
        )
        return out.reshape(x.shape)

    def normal(self, x, y, eps: float = 1e-3) -> np.ndarray:
        gx = (self.height(x + eps, y) - self.height(x - eps, y)) / (2 * eps)
        gy = (self.height(x, y + eps) - self.height(x, y - eps)) / (2 * eps)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def color(self, x, y) -> np.ndarray:
        """Shaded RGB in [0, 1]."""
        a = self.albedo(x, y)
        shade = 0.25 + 0.75 * np.clip(self.normal(x, y) @ LIGHT, 0.0, None)
        g = a * shade
        return np.stack([g, g * 0.92, g * 0.8], axis=-1)


def generate_scene(spec: SceneSpec) -> Scene:
    return Scene(spec)


def render_view(scene: Scene, camera: Camera) -> GroundTruthView:
    s = scene.spec
    rays = normalized_rays(camera, _pixel_grid(camera))
    ext = camera.extrinsics
    depth = _cast(
        np.ascontiguousarray(rays),
        np.ascontiguousarray(ext.rotation.T),
        np.ascontiguousarray(ext.center),
        s.seed,
        s.height_amplitude,
        s.height_wavelength,
        s.min_height_wavelength / 4.0,
        BISECT_TOL,
    )
    hit = depth > 0
    image = np.zeros((camera.height, camera.width, 3))
    if np.any(hit):
        d = depth[hit]
        xy = rays[hit]
        pc = np.stack([xy[:, 0] * d, xy[:, 1] * d, d], axis=-1)
        pw = (pc - ext.translation) @ ext.rotation
        image[hit] = scene.color(pw[:, 0], pw[:, 1])
    return GroundTruthView(image, depth, camera)


def _pixel_grid(camera: Camera) -> np.ndarray:
    u = np.arange(camera.width, dtype=np.float64) + 0.5
    v = np.arange(camera.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


NADIR = np.diag([1.0, -1.0, -1.0])


def make_aerial_cameras(
    scene: Scene,
    rows: int,
    cols: int,
    altitude: float,
    overlap_fraction: float,
    width: int = 640,
    height: int = 480,
    focal: float | None = None,
    k1: float = 0.0,
    k2: float = 0.0,
) -> list[Camera]:
    """Nadir cameras on a regular grid centred over the scene extent.

    Adjacent ground footprints (at z = 0) overlap by ``overlap_fraction`` of
    the footprint size.  Cameras are ordered row by row, north to south and
    west to east.  Image +u points east, +v points south.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap_fraction must be in [0, 1)")
    focal = float(width) if focal is None else float(focal)
    intr = Intrinsics(focal, focal, width / 2.0, height / 2.0, k1, k2)
    fw, fh = footprint_size(intr, width, height, altitude)
    sx, sy = fw * (1.0 - overlap_fraction), fh * (1.0 - overlap_fraction)
    x0, y0, x1, y1 = scene.spec.extent
    mx, my = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    cams = []
    for r in range(rows):
        for c in range(cols):
            center = np.array([mx + (c - (cols - 1) / 2.0) * sx, my - (r - (rows - 1) / 2.0) * sy, altitude])
            cams.append(Camera(intr, Extrinsics.from_center(NADIR, center), width, height))
    return cams


def footprint_size(intr: Intrinsics, width: int, height: int, altitude: float) -> tuple[float, float]:
    """Ground footprint (at z = 0) of an undistorted nadir camera."""
    return altitude * width / intr.fx, altitude * height / intr.fy


def sparse_points(scene: Scene, cameras, views: list[GroundTruthView], n_side: int = 40) -> list[SparsePoint]:
    """Surface samples on a regular grid with their observing views.

    A view observes a point when it projects inside the image and the
    rendered depth at that pixel agrees with the point's depth to 1%.
    """
    x0, y0, x1, y1 = scene.spec.extent
    gx = x0 + (np.arange(n_side) + 0.5) * (x1 - x0) / n_side
    gy = y0 + (np.arange(n_side) + 0.5) * (y1 - y0) / n_side
    xx, yy = np.meshgrid(gx, gy)
    xx, yy = xx.ravel(), yy.ravel()
    pts = np.stack([xx, yy, scene.height(xx, yy)], axis=-1)
    rgb = quantize(scene.color(xx, yy))
    observers = [[] for _ in range(len(pts))]
    for vid, (cam, gt) in enumerate(zip(cameras, views), start=1):
        uv, front = project_points(cam, pts)
        inside = front & cam.in_bounds(np.nan_to_num(uv, nan=-1.0))
        idx = np.flatnonzero(inside)
        col = np.floor(uv[idx, 0]).astype(int)
        row = np.floor(uv[idx, 1]).astype(int)
        z = (pts[idx] @ cam.extrinsics.rotation.T + cam.extrinsics.translation)[:, 2]
        g = gt.depth[row, col]
        ok = (g > 0) & (np.abs(g - z) < 0.01 * z)
        for k in idx[ok]:
            observers[k].append(vid)
    out = []
    for k in range(len(pts)):
        if observers[k]:
            out.append(SparsePoint(len(out) + 1, pts[k], tuple(int(c) for c in rgb[k]), observers[k]))
    return out


def write_fixture(out_dir, scene: Scene, cameras: list[Camera]) -> SceneModel:
    """Render every camera and write images, GT depths and a sparse model."""
    out = Path(out_dir)
    img_dir = ensure_dir(out / "images")
    gt_dir = ensure_dir(out / "gt")
    model = SceneModel()
    views = []
    cam_ids: dict[tuple, int] = {}
    for vid, cam in enumerate(cameras, start=1):
        key = (cam.intrinsics, cam.width, cam.height)
        if key not in cam_ids:
            cam_ids[key] = len(cam_ids) + 1
            model.cameras[cam_ids[key]] = Camera(cam.intrinsics, Extrinsics(), cam.width, cam.height)
        name = f"view_{vid - 1:03d}"
        model.views[vid] = View(cam_ids[key], f"{name}.ppm", cam.extrinsics)
        gt = render_view(scene, cam)
        write_image(img_dir / f"{name}.ppm", quantize(gt.image))
        write_depth(gt_dir / f"{name}.sird", DepthMap(name, gt.depth))
        views.append(gt)
    model.sparse_points = sparse_points(scene, cameras, views)
    write_sparse_model(model, ensure_dir(out / "sparse"))
    (out / "scene.json").write_text(scene.spec.to_json() + "\n")
    return model
