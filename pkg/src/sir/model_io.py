"""Readers and writers for sparse models, pixmaps, depth maps and point clouds.

Sparse models use the COLMAP text layout (``cameras.txt``, ``images.txt``,
``points3D.txt``).  Supported camera kinds are ``PINHOLE``, ``RADIAL`` and
``OPENCV`` with zero tangential terms.  Images are 8-bit binary pixmaps
(P5/P6).  Depth maps use a small binary container::

    b"SIRD" | u32 width | u32 height | width*height little-endian f32

with 0 marking invalid pixels.  Point clouds are ASCII PLY.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingFile, ParseError, UnsupportedCameraKind, UnsupportedFormat
from .geometry import Camera, Extrinsics, Intrinsics


@dataclass(frozen=True)
class View:
    camera_id: int
    name: str
    extrinsics: Extrinsics


@dataclass
class SparsePoint:
    point_id: int
    position: np.ndarray
    color: tuple[int, int, int]
    view_ids: list[int]


@dataclass
class SceneModel:
    """Sparse reconstruction.

    ``cameras`` hold intrinsics and image size only (their extrinsics are the
    identity); poses live on the views.
    """

    cameras: dict[int, Camera] = field(default_factory=dict)
    views: dict[int, View] = field(default_factory=dict)
    sparse_points: list[SparsePoint] = field(default_factory=list)

    def view_camera(self, view_id: int) -> Camera:
        view = self.views[view_id]
        cam = self.cameras[view.camera_id]
        return Camera(cam.intrinsics, view.extrinsics, cam.width, cam.height)

    def view_by_name(self, name: str) -> int:
        for vid, view in self.views.items():
            if view.name == name:
                return vid
        raise KeyError(name)

    def validate(self):
        for vid, view in self.views.items():
            if view.camera_id not in self.cameras:
                raise ParseError(f"view {vid} references unknown camera {view.camera_id}")
        for p in self.sparse_points:
            for vid in p.view_ids:
                if vid not in self.views:
                    raise ParseError(f"point {p.point_id} observed by unknown view {vid}")


@dataclass
class DepthMap:
    view_id: str
    depth: np.ndarray

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class PointCloud:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.uint8))
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.positions)


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z), Hamilton convention as in COLMAP
# ---------------------------------------------------------------------------


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# sparse model text layout
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_float(tok: str, path, lineno) -> float:
    try:
        value = float(tok)
    except ValueError:
        raise ParseError(f"bad number {tok!r}", path, lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite number {tok!r}", path, lineno)
    return value


def _parse_int(tok: str, path, lineno) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"bad integer {tok!r}", path, lineno) from None


def _data_lines(path: Path):
    with open(path, encoding="ascii", errors="strict") as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield lineno, raw.rstrip("\r\n")


def _read_cameras(path: Path) -> dict[int, Camera]:
    cameras = {}
    for lineno, line in _data_lines(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        if len(toks) < 4:
            raise ParseError("camera line needs id, model, width, height", path, lineno)
        cam_id = _parse_int(toks[0], path, lineno)
        kind = toks[1]
        width = _parse_int(toks[2], path, lineno)
        height = _parse_int(toks[3], path, lineno)
        params = [_parse_float(t, path, lineno) for t in toks[4:]]
        expected = {"PINHOLE": 4, "RADIAL": 5, "OPENCV": 8}
        if kind not in expected:
            raise UnsupportedCameraKind(f"{path}:{lineno}: camera kind {kind!r}")
        if len(params) != expected[kind]:
            raise ParseError(f"{kind} expects {expected[kind]} parameters, got {len(params)}", path, lineno)
        if kind == "OPENCV" and (params[6] != 0.0 or params[7] != 0.0):
            raise UnsupportedCameraKind(f"{path}:{lineno}: tangential distortion is not supported")
        if cam_id in cameras:
            raise ParseError(f"duplicate camera id {cam_id}", path, lineno)
        try:
            if kind == "PINHOLE":
                intr = Intrinsics(*params)
            elif kind == "RADIAL":
                f, cx, cy, k1, k2 = params
                intr = Intrinsics(f, f, cx, cy, k1, k2)
            else:
                intr = Intrinsics(*params[:6])
            cameras[cam_id] = Camera(intr, Extrinsics(), width, height)
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return cameras


def _read_images(path: Path) -> dict[int, View]:
    views = {}
    lines = list(_data_lines(path))
    k = 0
    while k < len(lines):
        lineno, line = lines[k]
        k += 1
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        toks = s.split()
        if len(toks) < 10:
            raise ParseError("image line needs 10 fields", path, lineno)
        vid = _parse_int(toks[0], path, lineno)
        q = [_parse_float(t, path, lineno) for t in toks[1:5]]
        t = [_parse_float(v, path, lineno) for v in toks[5:8]]
        cam_id = _parse_int(toks[8], path, lineno)
        name = " ".join(toks[9:])
        if np.linalg.norm(q) == 0:
            raise ParseError("zero quaternion", path, lineno)
        # the observation line follows; its content is not used
        if k < len(lines):
            k += 1
        if vid in views:
            raise ParseError(f"duplicate image id {vid}", path, lineno)
        try:
            views[vid] = View(cam_id, name, Extrinsics(quat_to_rotation(q), t))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return views


def _read_points(path: Path) -> list[SparsePoint]:
    points = []
    for lineno, line in _data_lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        toks = s.split()
        if len(toks) < 8 or (len(toks) - 8) % 2:
            raise ParseError("point line needs id, xyz, rgb, error and (image, idx) pairs", path, lineno)
        pid = _parse_int(toks[0], path, lineno)
        xyz = np.array([_parse_float(v, path, lineno) for v in toks[1:4]])
        rgb = tuple(_parse_int(v, path, lineno) for v in toks[4:7])
        if any(c < 0 or c > 255 for c in rgb):
            raise ParseError("color out of range", path, lineno)
        track = [_parse_int(v, path, lineno) for v in toks[8::2]]
        points.append(SparsePoint(pid, xyz, rgb, track))
    return points


def read_sparse_model(directory) -> SceneModel:
    directory = Path(directory)
    paths = {name: directory / f"{name}.txt" for name in ("cameras", "images", "points3D")}
    for name in ("cameras", "images"):
        if not paths[name].is_file():
            raise MissingFile(f"missing {paths[name]}")
    model = SceneModel(
        cameras=_read_cameras(paths["cameras"]),
        views=_read_images(paths["images"]),
        sparse_points=_read_points(paths["points3D"]) if paths["points3D"].is_file() else [],
    )
    model.validate()
    return model


def _camera_line(cam_id: int, cam: Camera) -> str:
    i = cam.intrinsics
    if not i.has_distortion:
        kind, params = "PINHOLE", [i.fx, i.fy, i.cx, i.cy]
    elif i.fx == i.fy:
        kind, params = "RADIAL", [i.fx, i.cx, i.cy, i.k1, i.k2]
    else:
        kind, params = "OPENCV", [i.fx, i.fy, i.cx, i.cy, i.k1, i.k2, 0.0, 0.0]
    return " ".join([str(cam_id), kind, str(cam.width), str(cam.height)] + [_fmt(p) for p in params])


def write_sparse_model(model: SceneModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(model.cameras)}",
    ]
    lines += [_camera_line(cid, model.cameras[cid]) for cid in sorted(model.cameras)]
    (directory / "cameras.txt").write_text("\n".join(lines) + "\n", encoding="ascii")

    # observation index of each point within each view's track list
    obs: dict[int, list[int]] = {vid: [] for vid in model.views}
    for p in model.sparse_points:
        for vid in p.view_ids:
            obs.setdefault(vid, []).append(p.point_id)
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID) (not stored)",
        f"# Number of images: {len(model.views)}",
    ]
    for vid in sorted(model.views):
        v = model.views[vid]
        q = rotation_to_quat(v.extrinsics.rotation)
        fields = [str(vid)] + [_fmt(x) for x in q] + [_fmt(x) for x in v.extrinsics.translation]
        lines.append(" ".join(fields + [str(v.camera_id), v.name]))
        lines.append("")
    (directory / "images.txt").write_text("\n".join(lines) + "\n", encoding="ascii")

    lines = [
        "# 3D point list with one line of data per point:",
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
        f"# Number of points: {len(model.sparse_points)}",
    ]
    counters: dict[int, int] = {}
    for p in model.sparse_points:
        track = []
        for vid in p.view_ids:
            idx = counters.get(vid, 0)
            counters[vid] = idx + 1
            track += [str(vid), str(idx)]
        fields = [str(p.point_id)] + [_fmt(x) for x in p.position] + [str(int(c)) for c in p.color] + ["0"]
        lines.append(" ".join(fields + track))
    (directory / "points3D.txt").write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# pixmaps
# ---------------------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int, path):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, offset)."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated pixmap header", path)
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ParseError("truncated pixmap header", path)
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a P5 (grayscale) or P6 (RGB) 8-bit pixmap."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing image {path}")
    data = path.read_bytes()
    if len(data) < 2:
        raise ParseError("file too short for a pixmap", path)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"{path}: unsupported pixmap magic {magic!r}")
    toks, offset = _pnm_tokens(data[2:], 3, path)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in toks)
    except ValueError:
        raise ParseError("non-integer pixmap header field", path) from None
    if width < 1 or height < 1:
        raise ParseError(f"invalid pixmap size {width}x{height}", path)
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: maxval must be 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    nbytes = width * height * channels
    if len(data) - offset < nbytes:
        raise ParseError(f"truncated pixel data ({len(data) - offset} of {nbytes} bytes)", path)
    arr = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def write_image(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise UnsupportedFormat(f"only 8-bit images are supported, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise UnsupportedFormat(f"cannot write image of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


# ---------------------------------------------------------------------------
# depth maps
# ---------------------------------------------------------------------------

SIRD_MAGIC = b"SIRD"
_SIRD_HEADER = struct.Struct("<4sII")


def write_depth(path, depth_map: DepthMap | np.ndarray) -> None:
    depth = depth_map.depth if isinstance(depth_map, DepthMap) else np.asarray(depth_map)
    h, w = depth.shape
    d = np.where(depth > 0, depth, 0).astype("<f4")
    Path(path).write_bytes(_SIRD_HEADER.pack(SIRD_MAGIC, w, h) + d.tobytes())


def read_depth(path, view_id: str | None = None) -> DepthMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing depth map {path}")
    data = path.read_bytes()
    if len(data) < _SIRD_HEADER.size:
        raise ParseError("truncated depth header", path)
    magic, w, h = _SIRD_HEADER.unpack_from(data)
    if magic != SIRD_MAGIC:
        raise UnsupportedFormat(f"{path}: bad depth magic {magic!r}")
    if len(data) - _SIRD_HEADER.size < 4 * w * h:
        raise ParseError("truncated depth payload", path)
    depth = np.frombuffer(data, dtype="<f4", count=w * h, offset=_SIRD_HEADER.size)
    return DepthMap(view_id if view_id is not None else path.stem, depth.reshape(h, w).astype(np.float64))


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def write_point_cloud(cloud: PointCloud, path) -> None:
    n = len(cloud)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(cloud.positions, cloud.colors):
        lines.append(" ".join([_fmt(p[0]), _fmt(p[1]), _fmt(p[2])] + [str(int(x)) for x in c]))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_point_cloud(path) -> PointCloud:
    """Read an ASCII PLY written by :func:`write_point_cloud`."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing point cloud {path}")
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError("not a PLY file", path)
    n = None
    k = 1
    while k < len(lines) and lines[k] != "end_header":
        toks = lines[k].split()
        if toks[:2] == ["element", "vertex"]:
            n = int(toks[2])
        k += 1
    if n is None or k == len(lines):
        raise ParseError("incomplete PLY header", path)
    body = lines[k + 1 : k + 1 + n]
    if len(body) != n:
        raise ParseError("truncated PLY body", path)
    pos = np.zeros((n, 3))
    col = np.zeros((n, 3), dtype=np.uint8)
    for r, line in enumerate(body):
        toks = line.split()
        pos[r] = [float(t) for t in toks[:3]]
        col[r] = [int(t) for t in toks[3:6]]
    return PointCloud(pos, col, np.ones(n, dtype=np.int64))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
