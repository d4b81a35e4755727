"""Analytic memory accounting for one MVS step.

The model counts image buffers, the cost volume and per-pixel output
buffers.  Backend scratch space is deliberately left out so the numbers
stay independent of the stereo algorithm.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from .errors import MemoryOverflow
from .recapture import GridSpec

INT64_MAX = 2**63 - 1
COST_BYTES = 4
# depth (f32) + validity mask (u8) + best cost (f32)
OUTPUT_BYTES_PER_PIXEL = 4 + 1 + 4


def _check(value: int) -> int:
    if value > INT64_MAX:
        raise MemoryOverflow(f"{value} bytes exceeds the 64-bit range")
    return value


def image_bytes(width: int, height: int, channels: int, bytes_per_sample: int) -> int:
    for name, v in (("width", width), ("height", height), ("channels", channels),
                    ("bytes_per_sample", bytes_per_sample)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return _check(int(width) * int(height) * int(channels) * int(bytes_per_sample))


@dataclass(frozen=True)
class MemoryReport:
    tile_width: int
    tile_height: int
    per_image_bytes: int
    num_images: int
    image_term: int
    cost_volume_bytes: int
    buffer_bytes: int
    peak_bytes: int
    grid_factor: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("tile size", f"{self.tile_width} x {self.tile_height}"),
            ("grid factor", f"{self.grid_factor}"),
            ("images resident", f"{self.num_images}"),
            ("bytes per image", _human(self.per_image_bytes)),
            ("image buffers", _human(self.image_term)),
            ("cost volume", _human(self.cost_volume_bytes)),
            ("output buffers", _human(self.buffer_bytes)),
            ("peak", _human(self.peak_bytes)),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v:>20}" for k, v in rows)


def _human(n: int) -> str:
    return f"{n:,} B ({n / 1e9:.3f} GB)"


def estimate_cluster_peak(
    num_sources: int,
    width: int,
    height: int,
    channels: int,
    bytes_per_sample: int,
    grid: GridSpec = GridSpec(1, 1),
    num_hypotheses: int = 128,
) -> MemoryReport:
    """Peak bytes for one reference tile plus ``num_sources`` source tiles.

    Tiles are sized ``ceil(W / I) x ceil(H / J)``.  This is exact for
    divisible sizes; when the remainder is large the last grid tile can be
    bigger, and the pipeline budgets from the real tile sizes instead.
    """
    if num_sources < 0:
        raise ValueError("num_sources must be >= 0")
    if num_hypotheses < 2:
        raise ValueError("num_hypotheses must be >= 2")
    tw = math.ceil(width / grid.I)
    th = math.ceil(height / grid.J)
    per_image = image_bytes(tw, th, channels, bytes_per_sample)
    n_images = 1 + int(num_sources)
    image_term = _check(n_images * per_image)
    pixels = tw * th
    volume = _check(pixels * int(num_hypotheses) * COST_BYTES)
    buffers = _check(pixels * OUTPUT_BYTES_PER_PIXEL)
    return MemoryReport(
        tile_width=tw,
        tile_height=th,
        per_image_bytes=per_image,
        num_images=n_images,
        image_term=image_term,
        cost_volume_bytes=volume,
        buffer_bytes=buffers,
        peak_bytes=_check(image_term + volume + buffers),
        grid_factor=grid.count,
    )


class ResidentImages:
    """Instrumented cache of decoded images.

    Tracks the bytes currently held and the high-water mark so callers can
    assert that a processing stage stayed within its budget.
    """

    def __init__(self, loader):
        self._loader = loader
        self._images = {}
        self.current_bytes = 0
        self.peak_bytes = 0

    def load(self, key):
        if key not in self._images:
            img = self._loader(key)
            self._images[key] = img
            self.current_bytes += img.nbytes
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        return self._images[key]

    def __getitem__(self, key):
        return self._images[key]

    def release(self, key):
        img = self._images.pop(key, None)
        if img is not None:
            self.current_bytes -= img.nbytes

    def release_all(self):
        for key in list(self._images):
            self.release(key)

    def reset_peak(self):
        self.peak_bytes = self.current_bytes
