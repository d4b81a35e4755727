"""Sub-image recapture: per-tile synthesized cameras.

A sub-image cut from a native image at integer origin ``(x_o, y_o)`` is
modelled as a full frame taken by a camera identical to the native one
except for its principal point, which moves to ``(x_p - x_o, y_p - y_o)``.
Pose, focal lengths and distortion are copied untouched, so projecting a
world point with the tile camera and adding the origin gives exactly the
native projection.

For a regular ``I x J`` grid the tile origins are ``i * (S_x // I)`` and
``j * (S_y // J)``; the last column/row absorbs any remainder.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, OutOfBounds
from .geometry import Camera


@dataclass(frozen=True)
class GridSpec:
    I: int
    J: int

    def __post_init__(self):
        if int(self.I) != self.I or int(self.J) != self.J or self.I < 1 or self.J < 1:
            raise ValueError(f"grid counts must be positive integers, got {self.I}x{self.J}")

    @property
    def count(self) -> int:
        return self.I * self.J


@dataclass(frozen=True)
class SubImageRef:
    parent_id: str
    i: int | None
    j: int | None
    origin_x: int
    origin_y: int
    width: int
    height: int

    @property
    def origin(self) -> tuple[int, int]:
        return (self.origin_x, self.origin_y)

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def name(self) -> str:
        if self.i is None or self.j is None:
            return f"{self.parent_id}_r{self.origin_x}_{self.origin_y}_{self.width}x{self.height}"
        return f"{self.parent_id}_s{self.i}_{self.j}"

    def contains(self, col, row):
        """Whether integer native pixel indices fall inside this region."""
        return (
            (col >= self.origin_x)
            & (col < self.origin_x + self.width)
            & (row >= self.origin_y)
            & (row < self.origin_y + self.height)
        )


@dataclass(frozen=True)
class RecaptureSet:
    native_camera: Camera
    refs: tuple[SubImageRef, ...]
    cameras: tuple[Camera, ...]

    def __len__(self):
        return len(self.refs)

    def __iter__(self):
        return iter(zip(self.refs, self.cameras))


def recapture_region(
    camera: Camera, origin: tuple[int, int], size: tuple[int, int], parent_id: str = ""
) -> tuple[SubImageRef, Camera]:
    """Synthesize the camera for an arbitrary rectangular region."""
    ox, oy = (int(o) for o in origin)
    w, h = (int(s) for s in size)
    if w < 1 or h < 1:
        raise OutOfBounds(f"region size must be positive, got {w}x{h}")
    if ox < 0 or oy < 0 or ox + w > camera.width or oy + h > camera.height:
        raise OutOfBounds(
            f"region origin=({ox},{oy}) size=({w},{h}) exceeds "
            f"{camera.width}x{camera.height} image"
        )
    ref = SubImageRef(parent_id, None, None, ox, oy, w, h)
    intr = camera.intrinsics
    sub = replace(
        camera,
        intrinsics=replace(intr, cx=intr.cx - ox, cy=intr.cy - oy),
        width=w,
        height=h,
    )
    return ref, sub


def grid_origins(length: int, count: int) -> list[tuple[int, int]]:
    """(origin, extent) for each tile along one axis."""
    if count > length:
        raise OutOfBounds(f"cannot split {length} pixels into {count} tiles")
    step = length // count
    spans = []
    for k in range(count):
        start = k * step
        stop = length if k == count - 1 else (k + 1) * step
        spans.append((start, stop - start))
    return spans


def grid_refs(width: int, height: int, grid: GridSpec, parent_id: str = "") -> list[SubImageRef]:
    """Tile regions in row-major order (``j`` outer, ``i`` inner)."""
    xs = grid_origins(width, grid.I)
    ys = grid_origins(height, grid.J)
    return [
        SubImageRef(parent_id, i, j, ox, oy, w, h)
        for j, (oy, h) in enumerate(ys)
        for i, (ox, w) in enumerate(xs)
    ]


def recapture_grid(camera: Camera, grid: GridSpec, parent_id: str = "") -> RecaptureSet:
    refs = grid_refs(camera.width, camera.height, grid, parent_id)
    cameras = []
    for ref in refs:
        _, sub = recapture_region(camera, ref.origin, ref.size, parent_id)
        cameras.append(sub)
    return RecaptureSet(camera, tuple(refs), tuple(cameras))


def split_image(pixels: np.ndarray, grid: GridSpec, parent_id: str = "", camera: Camera | None = None):
    """Cut an image buffer into grid tiles (copies, bit-exact).

    Returns a list of ``(SubImageRef, tile)`` in the same order as
    :func:`recapture_grid`.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim not in (2, 3):
        raise DimensionMismatch(f"expected a 2-D or 3-D image buffer, got shape {pixels.shape}")
    height, width = pixels.shape[:2]
    if camera is not None and (camera.width, camera.height) != (width, height):
        raise DimensionMismatch(
            f"image is {width}x{height} but camera is {camera.width}x{camera.height}"
        )
    refs = grid_refs(width, height, grid, parent_id)
    return [
        (ref, pixels[ref.origin_y : ref.origin_y + ref.height, ref.origin_x : ref.origin_x + ref.width].copy())
        for ref in refs
    ]


def assemble_tiles(tiles, width: int, height: int) -> np.ndarray:
    """Paste ``(SubImageRef, tile)`` pairs back into a native-size buffer."""
    tiles = list(tiles)
    first = tiles[0][1]
    out = np.zeros((height, width) + first.shape[2:], dtype=first.dtype)
    for ref, tile in tiles:
        if tile.shape[:2] != (ref.height, ref.width):
            raise DimensionMismatch(f"tile {ref.name} has shape {tile.shape}")
        out[ref.origin_y : ref.origin_y + ref.height, ref.origin_x : ref.origin_x + ref.width] = tile
    return out


def map_sub_to_native(ref: SubImageRef, pixel) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    return pixel + np.array([ref.origin_x, ref.origin_y], dtype=np.float64)


def map_native_to_sub(ref: SubImageRef, pixel) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    return pixel - np.array([ref.origin_x, ref.origin_y], dtype=np.float64)


def native_camera_of(ref: SubImageRef, sub_camera: Camera, native_size: tuple[int, int]) -> Camera:
    """Undo a recapture: shift the principal point back by the tile origin."""
    intr = sub_camera.intrinsics
    return replace(
        sub_camera,
        intrinsics=replace(intr, cx=intr.cx + ref.origin_x, cy=intr.cy + ref.origin_y),
        width=native_size[0],
        height=native_size[1],
    )
