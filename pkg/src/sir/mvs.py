"""Plane-sweep stereo, geometric consistency filtering and depth fusion.

The sweep tests fronto-parallel planes at inverse-depth-uniform depths in
the reference camera.  For every hypothesis the whole reference grid is
lifted to that depth, projected into each source and bilinearly sampled;
photo-consistency is zero-mean NCC over a square window.

Sources may be recaptured tiles.  Tiles that share a parent image are
sampled as one source through the parent's camera (tile principal point
plus tile origin), so a sweep over tiles performs exactly the arithmetic of
a sweep over the native images wherever the needed tiles are present.
Window sums are taken in a fixed per-pixel order, which makes costs at
pixels away from tile borders independent of where the tile was cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import DegenerateRange, NoSources
from .geometry import (
    BEHIND_EPS,
    Camera,
    camera_depth,
    normalized_rays,
    pixel_centers,
    project_points,
    unproject,
)
from .model_io import DepthMap, PointCloud

VARIANCE_FLOOR = 1e-12
FLAT_COST_TOL = 1e-12


@dataclass(frozen=True)
class SweepParams:
    num_hypotheses: int = 128
    window: int = 7
    cost_threshold: float = 0.3
    min_depth: float | None = None
    max_depth: float | None = None

    def __post_init__(self):
        if self.num_hypotheses < 2:
            raise ValueError("num_hypotheses must be >= 2")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.min_depth is not None and self.min_depth <= 0:
            raise ValueError("min_depth must be positive")

    def with_range(self, min_depth: float, max_depth: float) -> "SweepParams":
        return replace(self, min_depth=min_depth, max_depth=max_depth)


@dataclass(frozen=True)
class FuseParams:
    min_support: int = 2
    reproj_tol: float = 1.0
    depth_rel_tol: float = 0.01

    def __post_init__(self):
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if self.reproj_tol <= 0 or self.depth_rel_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class StereoView:
    """An image with its camera.

    ``parent`` and ``origin`` identify recaptured tiles; a native image is
    its own parent with origin ``(0, 0)``.
    """

    view_id: str
    camera: Camera
    image: np.ndarray
    parent: str | None = None
    origin: tuple[int, int] = (0, 0)

    @property
    def parent_id(self) -> str:
        return self.parent if self.parent is not None else self.view_id


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img / 255.0


def depth_hypotheses(min_depth: float, max_depth: float, n: int) -> np.ndarray:
    """``n`` depths uniform in inverse depth, nearest first, endpoints exact."""
    if not (0 < min_depth < max_depth):
        raise DegenerateRange(f"need 0 < min_depth < max_depth, got [{min_depth}, {max_depth}]")
    inv = np.linspace(1.0 / min_depth, 1.0 / max_depth, n)
    d = 1.0 / inv
    d[0] = min_depth
    d[-1] = max_depth
    return d


def inverse_depth_step(min_depth: float, max_depth: float, n: int) -> float:
    return (1.0 / min_depth - 1.0 / max_depth) / (n - 1)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True, error_model="numpy")
def _find_tile(meta, xi, yi):
    """Index of the loaded tile holding parent pixel (xi, yi), or -1.

    ``meta`` rows are (origin_x, origin_y, width, height, offset) into the
    flat pixel buffer.
    """
    for t in range(meta.shape[0]):
        lx = xi - meta[t, 0]
        ly = yi - meta[t, 1]
        if 0 <= lx < meta[t, 2] and 0 <= ly < meta[t, 3]:
            return t
    return -1


@njit(cache=True, nogil=True, error_model="numpy")
def _pixel(pix, meta, t, xi, yi):
    return pix[meta[t, 4] + (yi - meta[t, 1]) * meta[t, 2] + (xi - meta[t, 0])]


@njit(cache=True, nogil=True, error_model="numpy")
def _project_row(r, rx, ry, depth, geo, xs, ys):
    """Source pixel-index coordinates of reference row ``r`` lifted to
    ``depth``; NaN where the point is behind the source camera.

    ``geo`` packs the reference rotation transpose and translation, the
    source rotation and translation, then fx, fy, cx, cy, k1, k2 and the
    behind-camera epsilon.
    """
    w = rx.shape[1]
    g0, g1, g2, g3, g4, g5, g6, g7, g8 = geo[0], geo[1], geo[2], geo[3], geo[4], geo[5], geo[6], geo[7], geo[8]
    t0, t1, t2 = geo[9], geo[10], geo[11]
    s0, s1, s2, s3, s4, s5, s6, s7, s8 = (
        geo[12], geo[13], geo[14], geo[15], geo[16], geo[17], geo[18], geo[19], geo[20])
    u0, u1, u2 = geo[21], geo[22], geo[23]
    fx, fy, cx, cy, k1, k2, eps = geo[24], geo[25], geo[26], geo[27], geo[28], geo[29], geo[30]
    pz = depth - t2
    for c in range(w):
        px = rx[r, c] * depth - t0
        py = ry[r, c] * depth - t1
        X = g0 * px + g1 * py + g2 * pz
        Y = g3 * px + g4 * py + g5 * pz
        Z = g6 * px + g7 * py + g8 * pz
        sx = s0 * X + s1 * Y + s2 * Z + u0
        sy = s3 * X + s4 * Y + s5 * Z + u1
        sz = s6 * X + s7 * Y + s8 * Z + u2
        xn = sx / sz
        yn = sy / sz
        r2 = xn * xn + yn * yn
        f = 1.0 + k1 * r2 + k2 * r2 * r2
        front = sz > eps
        xs[c] = fx * (xn * f) + cx - 0.5 if front else np.nan
        ys[c] = fy * (yn * f) + cy - 0.5 if front else np.nan


@njit(cache=True, nogil=True, error_model="numpy")
def _sample_row(r, rx, ry, depth, geo, pix, meta, a, out, valid, xs, ys):
    """Bilinearly sample the loaded tiles at the projections of row ``r``.

    Writes b, b*b, a*b (zero where unavailable) into ``out`` and 0/1 into
    ``valid``.
    """
    _project_row(r, rx, ry, depth, geo, xs, ys)
    w = rx.shape[1]
    hint = 0
    for c in range(w):
        out[0, c] = 0.0
        out[1, c] = 0.0
        out[2, c] = 0.0
        valid[c] = 0
        x = xs[c]
        y = ys[c]
        if not (x > -1.0 and y > -1.0 and x < 1e9 and y < 1e9):
            continue
        fx0 = math.floor(x)
        fy0 = math.floor(y)
        x0 = int(fx0)
        y0 = int(fy0)
        tx = x - fx0
        ty = y - fy0
        t = hint
        lx = x0 - meta[t, 0]
        ly = y0 - meta[t, 1]
        if not (0 <= lx and lx + 1 < meta[t, 2] and 0 <= ly and ly + 1 < meta[t, 3]):
            t = _find_tile(meta, x0, y0)
            if t >= 0:
                hint = t
                lx = x0 - meta[t, 0]
                ly = y0 - meta[t, 1]
        if t >= 0 and lx + 1 < meta[t, 2] and ly + 1 < meta[t, 3]:
            base = meta[t, 4] + ly * meta[t, 2] + lx
            v00 = pix[base]
            v10 = pix[base + 1]
            v01 = pix[base + meta[t, 2]]
            v11 = pix[base + meta[t, 2] + 1]
        else:
            # neighbours straddle a tile seam
            t00 = _find_tile(meta, x0, y0)
            t10 = _find_tile(meta, x0 + 1, y0)
            t01 = _find_tile(meta, x0, y0 + 1)
            t11 = _find_tile(meta, x0 + 1, y0 + 1)
            if t00 < 0 or t10 < 0 or t01 < 0 or t11 < 0:
                continue
            v00 = _pixel(pix, meta, t00, x0, y0)
            v10 = _pixel(pix, meta, t10, x0 + 1, y0)
            v01 = _pixel(pix, meta, t01, x0, y0 + 1)
            v11 = _pixel(pix, meta, t11, x0 + 1, y0 + 1)
        top = v00 * (1.0 - tx) + v10 * tx
        bot = v01 * (1.0 - tx) + v11 * tx
        b = top * (1.0 - ty) + bot * ty
        out[0, c] = b
        out[1, c] = b * b
        out[2, c] = a[r, c] * b
        valid[c] = 1


@njit(cache=True, nogil=True, error_model="numpy")
def _warp_sample(rx, ry, depth, geo, pix, meta, a, planes, valid):
    w = rx.shape[1]
    xs = np.empty(w)
    ys = np.empty(w)
    for r in range(rx.shape[0]):
        _sample_row(r, rx, ry, depth, geo, pix, meta, a, planes[:, r], valid[r], xs, ys)


@njit(cache=True, nogil=True, error_model="numpy")
def _hsum_row(row, rad, padded, out):
    """Horizontal window sums of one row.

    Each output starts at 0.0 and adds the window in ascending column
    order; columns outside the image contribute zeros.  The value at a
    pixel therefore depends only on the samples inside its window.
    """
    w = row.shape[0]
    for c in range(w):
        padded[c + rad] = row[c]
    for c in range(w):
        out[c] = 0.0
    for d in range(2 * rad + 1):
        for c in range(w):
            out[c] += padded[c + d]


@njit(cache=True, nogil=True, error_model="numpy")
def _icount_row(flags, rad, out):
    w = flags.shape[0]
    s = 0
    for c in range(min(rad, w)):
        s += flags[c]
    for c in range(w):
        if c + rad < w:
            s += flags[c + rad]
        if c - rad - 1 >= 0:
            s -= flags[c - rad - 1]
        out[c] = s


@njit(cache=True, nogil=True, error_model="numpy")
def _window_sums(planes, rad):
    """Clipped square-window sums of each ``planes[k]`` (same order as the
    streaming sweep kernel)."""
    m, h, w = planes.shape
    span = 2 * rad + 1
    horiz = np.empty((m, h, w))
    padded = np.zeros(w + 2 * rad)
    for k in range(m):
        for r in range(h):
            _hsum_row(planes[k, r], rad, padded, horiz[k, r])
    out = np.zeros((m, h, w))
    for k in range(m):
        for r in range(h):
            for d in range(span):
                rr = r + d - rad
                if 0 <= rr < h:
                    for c in range(w):
                        out[k, r, c] += horiz[k, rr, c]
    return out


@njit(cache=True, nogil=True, error_model="numpy")
def _window_counts(flags, rad):
    """Number of set flags in each clipped square window (exact integers)."""
    h, w = flags.shape
    horiz = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        _icount_row(flags[r], rad, horiz[r])
    out = np.zeros((h, w), dtype=np.int64)
    for r in range(h):
        for rr in range(max(0, r - rad), min(h, r + rad + 1)):
            for c in range(w):
                out[r, c] += horiz[rr, c]
    return out


@njit(cache=True, nogil=True, error_model="numpy")
def _window_size(o, c, rad, h, w):
    return (min(h - 1, o + rad) - max(0, o - rad) + 1) * (min(w - 1, c + rad) - max(0, c - rad) + 1)


@njit(cache=True, nogil=True, error_model="numpy")
def _sweep_depth(h_index, rx, ry, depth, geos, pix, metas, spans, a, rad, ref_sum, ref_var, floor,
                 best_cost, best_idx, max_cost, n_supported, row, flags, padded, ring, iring, vsum, vcnt,
                 csum, ccnt, xs, ys):
    """Score one depth hypothesis against every source group.

    Rows stream through a ring of the last ``2*rad+1`` horizontally reduced
    rows per group and are summed vertically in ascending row order, which
    is the arithmetic of :func:`_window_sums`.  A group contributes
    ``1 - NCC`` where its whole clipped window has samples; the mean over
    contributing groups updates the running best, worst and support count.
    """
    h, w = a.shape
    span = 2 * rad + 1
    n_groups = geos.shape[0]
    for r in range(h + rad):
        if r < h:
            slot = r % span
            for g in range(n_groups):
                meta = metas[spans[g, 0]:spans[g, 1]]
                _sample_row(r, rx, ry, depth, geos[g], pix, meta, a, row, flags, xs, ys)
                for k in range(3):
                    _hsum_row(row[k], rad, padded, ring[g, k, slot])
                _icount_row(flags, rad, iring[g, slot])
        o = r - rad
        if o < 0:
            continue
        csum[:] = 0.0
        ccnt[:] = 0
        for g in range(n_groups):
            vsum[:] = 0.0
            vcnt[:] = 0
            for d in range(span):
                rr = o + d - rad
                if rr < 0 or rr >= h:
                    continue
                slot = rr % span
                for k in range(3):
                    src = ring[g, k, slot]
                    dst = vsum[k]
                    for c in range(w):
                        dst[c] += src[c]
                isrc = iring[g, slot]
                for c in range(w):
                    vcnt[c] += isrc[c]
            for c in range(w):
                n = _window_size(o, c, rad, h, w)
                if vcnt[c] != n:
                    continue
                inv_n = 1.0 / n
                var_a = ref_var[o, c]
                sb = vsum[0, c]
                var_b = vsum[1, c] - sb * sb * inv_n
                if var_a * inv_n < floor or var_b * inv_n < floor:
                    continue
                cov = vsum[2, c] - ref_sum[o, c] * sb * inv_n
                csum[c] += 1.0 - cov / math.sqrt(var_a * var_b)
                ccnt[c] += 1
        for c in range(w):
            k = ccnt[c]
            if k == 0:
                continue
            cost = csum[c] / k
            n_supported[o, c] += 1
            if cost < best_cost[o, c]:
                best_cost[o, c] = cost
                best_idx[o, c] = h_index
            if cost > max_cost[o, c]:
                max_cost[o, c] = cost


# ---------------------------------------------------------------------------
# source groups
# ---------------------------------------------------------------------------


@dataclass
class _SourceGroup:
    """All loaded tiles of one parent image, packed for the sampler."""

    parent: str
    camera: Camera
    pix: np.ndarray
    meta: np.ndarray


def _group_sources(sources: Sequence[StereoView]) -> list[_SourceGroup]:
    grouped: dict[str, list] = {}
    cams: dict[str, Camera] = {}
    for s in sources:
        ox, oy = (int(o) for o in s.origin)
        intr = s.camera.intrinsics
        cam = replace(s.camera, intrinsics=replace(intr, cx=intr.cx + ox, cy=intr.cy + oy))
        known = cams.setdefault(s.parent_id, cam)
        if known.intrinsics != cam.intrinsics or known.extrinsics != cam.extrinsics:
            raise ValueError(f"tiles of {s.parent_id} disagree on the parent camera")
        grouped.setdefault(s.parent_id, []).append((to_gray(s.image), ox, oy))
    groups = []
    for parent in sorted(grouped):
        tiles = grouped[parent]
        meta = np.zeros((len(tiles), 5), dtype=np.int64)
        offset = 0
        for k, (gray, ox, oy) in enumerate(tiles):
            th, tw = gray.shape
            meta[k] = (ox, oy, tw, th, offset)
            offset += gray.size
        pix = np.concatenate([g.ravel() for g, _, _ in tiles])
        groups.append(_SourceGroup(parent, cams[parent], pix, meta))
    return groups


class _Workspace:
    """Per-sweep scratch for :func:`_sweep_depth`."""

    def __init__(self, n_groups, w, rad):
        span = 2 * rad + 1
        self.row = np.zeros((3, w))
        self.flags = np.zeros(w, dtype=np.int64)
        self.padded = np.zeros(w + 2 * rad)
        self.ring = np.zeros((n_groups, 3, span, w))
        self.iring = np.zeros((n_groups, span, w), dtype=np.int64)
        self.vsum = np.zeros((3, w))
        self.vcnt = np.zeros(w, dtype=np.int64)
        self.csum = np.zeros(w)
        self.ccnt = np.zeros(w, dtype=np.int64)
        self.xs = np.zeros(w)
        self.ys = np.zeros(w)


def _pack(groups: list[_SourceGroup]):
    """Concatenate group buffers: flat pixels, tile rows and per-group row spans."""
    pix = np.concatenate([g.pix for g in groups])
    metas, spans = [], []
    offset = row = 0
    for g in groups:
        m = g.meta.copy()
        m[:, 4] += offset
        metas.append(m)
        spans.append((row, row + len(m)))
        offset += len(g.pix)
        row += len(m)
    return pix, np.concatenate(metas), np.array(spans, dtype=np.int64)


def _geometry(group: _SourceGroup, ref_camera: Camera) -> np.ndarray:
    re, se, si = ref_camera.extrinsics, group.camera.extrinsics, group.camera.intrinsics
    return np.concatenate([
        re.rotation.T.ravel(), re.translation, se.rotation.ravel(), se.translation,
        [si.fx, si.fy, si.cx, si.cy, si.k1, si.k2, BEHIND_EPS],
    ]).astype(np.float64)


def _rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    xy = normalized_rays(camera, pixel_centers(camera.width, camera.height))
    return np.ascontiguousarray(xy[..., 0]), np.ascontiguousarray(xy[..., 1])


def sample_source(sources: Sequence[StereoView], ref_camera: Camera, depth: float):
    """Warp the reference grid at ``depth`` into one source parent.

    Returns ``(values, valid)`` sampled from whichever of ``sources`` (tiles
    of a single parent) hold the needed pixels.
    """
    (group,) = _group_sources(sources)
    h, w = ref_camera.height, ref_camera.width
    planes = np.zeros((3, h, w))
    valid = np.zeros((h, w), dtype=np.int64)
    _warp_sample(*_rays(ref_camera), float(depth), _geometry(group, ref_camera), group.pix, group.meta,
                 np.zeros((h, w)), planes, valid)
    return planes[0], valid.astype(bool)


def plane_sweep(reference: StereoView, sources: Sequence[StereoView], params: SweepParams) -> DepthMap:
    """Winner-take-all plane sweep with NCC cost.

    Cost at a hypothesis is the mean of ``1 - NCC`` over the source images
    whose warped window is fully available.  A pixel is invalid if no
    hypothesis has support, if its best NCC is below ``cost_threshold`` or
    if its cost does not vary with depth (e.g. zero baseline).

    Raises:
        NoSources: ``sources`` is empty.
        DegenerateRange: the depth range is missing or empty.
    """
    if not sources:
        raise NoSources(f"no sources for {reference.view_id}")
    if params.min_depth is None or params.max_depth is None:
        raise DegenerateRange("plane sweep needs min_depth and max_depth")
    hyps = depth_hypotheses(params.min_depth, params.max_depth, params.num_hypotheses)
    cam = reference.camera
    rx, ry = _rays(cam)
    a = to_gray(reference.image)
    h, w = a.shape
    rad = params.window // 2
    sums = _window_sums(np.stack([a, a * a]), rad)
    ref_sum = sums[0]
    ref_inv_n = 1.0 / _window_counts(np.ones((h, w), dtype=np.int64), rad)
    ref_var = sums[1] - ref_sum * ref_sum * ref_inv_n
    groups = _group_sources(sources)
    geos = np.stack([_geometry(g, cam) for g in groups])
    pix, metas, spans = _pack(groups)
    ws = _Workspace(len(groups), w, rad)

    best_cost = np.full((h, w), np.inf)
    best_idx = np.zeros((h, w), dtype=np.int64)
    max_cost = np.full((h, w), -np.inf)
    n_supported = np.zeros((h, w), dtype=np.int64)
    for h_index, d in enumerate(hyps):
        _sweep_depth(h_index, rx, ry, float(d), geos, pix, metas, spans, a, rad, ref_sum, ref_var,
                     VARIANCE_FLOOR, best_cost, best_idx, max_cost, n_supported, ws.row, ws.flags,
                     ws.padded, ws.ring, ws.iring, ws.vsum, ws.vcnt, ws.csum, ws.ccnt, ws.xs, ws.ys)

    ok = (
        np.isfinite(best_cost)
        & (1.0 - best_cost >= params.cost_threshold)
        & (n_supported >= 2)
        & (max_cost - best_cost > FLAT_COST_TOL)
    )
    depth = np.where(ok, hyps[best_idx], 0.0)
    return DepthMap(reference.view_id, depth)


# ---------------------------------------------------------------------------
# filtering and fusion
# ---------------------------------------------------------------------------


def _pixel_lookup(camera: Camera, uv: np.ndarray, front: np.ndarray):
    """Integer pixel indices for projected coordinates; -1 where outside."""
    inside = front & camera.in_bounds(np.nan_to_num(uv, nan=-1.0))
    col = np.where(inside, np.floor(np.nan_to_num(uv[..., 0])), -1).astype(np.int64)
    row = np.where(inside, np.floor(np.nan_to_num(uv[..., 1])), -1).astype(np.int64)
    return inside, col, row


def _consistent(ref_cam, ref_uv, ref_d, X, nb_depth, nb_cam, params: FuseParams):
    """Forward-backward check of reference samples against one neighbour.

    Returns ``(agree, col, row)``; ``col``/``row`` index the neighbour pixel.
    """
    uv, front = project_points(nb_cam, X)
    inside, col, row = _pixel_lookup(nb_cam, uv, front)
    agree = np.zeros(len(X), dtype=bool)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return agree, col, row
    dn = nb_depth[row[idx], col[idx]]
    has = dn > 0
    idx, dn = idx[has], dn[has]
    if len(idx) == 0:
        return agree, col, row
    centers = np.stack([col[idx] + 0.5, row[idx] + 0.5], axis=-1)
    Xn = unproject(nb_cam, centers, dn)
    back, bfront = project_points(ref_cam, Xn)
    err = np.linalg.norm(back - ref_uv[idx], axis=-1)
    zb = camera_depth(ref_cam, Xn)
    rel = np.abs(zb - ref_d[idx]) / ref_d[idx]
    agree[idx] = bfront & (err < params.reproj_tol) & (rel < params.depth_rel_tol)
    return agree, col, row


def geometric_consistency_filter(
    ref_depth: DepthMap,
    ref_camera: Camera,
    neighbors: Sequence[tuple[DepthMap, Camera]],
    params: FuseParams,
) -> DepthMap:
    """Keep reference pixels confirmed by at least ``min_support - 1``
    neighbours (forward-backward reprojection and relative depth)."""
    depth = ref_depth.depth
    valid = depth > 0
    need = params.min_support - 1
    if need <= 0:
        return DepthMap(ref_depth.view_id, np.where(valid, depth, 0.0))
    if not neighbors or not valid.any():
        return DepthMap(ref_depth.view_id, np.zeros_like(depth))
    rows, cols = np.nonzero(valid)
    uv = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    d = depth[rows, cols]
    X = unproject(ref_camera, uv, d)
    support = np.zeros(len(d), dtype=np.int64)
    for nb_depth, nb_cam in neighbors:
        agree, _, _ = _consistent(ref_camera, uv, d, X, nb_depth.depth, nb_cam, params)
        support += agree
    out = np.zeros_like(depth)
    keep = support >= need
    out[rows[keep], cols[keep]] = d[keep]
    return DepthMap(ref_depth.view_id, out)


def fuse_depth_maps(
    depths: Sequence[DepthMap],
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray] | Callable[[int], np.ndarray],
    params: FuseParams,
    candidates: Sequence[Sequence[int]] | None = None,
) -> PointCloud:
    """Merge filtered depth maps into one cloud.

    Views are visited in the given order.  Each unclaimed valid pixel of the
    current view spawns a point; matching unclaimed pixels of later views
    are merged into it (position averaged, support incremented) and marked
    claimed.  Points are emitted by reference view, then pixel index.
    ``images`` may be a callable ``k -> image`` so colours are loaded one
    view at a time.  ``candidates[k]`` optionally restricts the views that
    view ``k`` may merge with (indices; only later ones are used).
    """
    get_image = images if callable(images) else (lambda k: images[k])
    claimed = [np.zeros(d.depth.shape, dtype=bool) for d in depths]
    pos_out, col_out, sup_out = [], [], []
    for r, (dm, cam) in enumerate(zip(depths, cameras)):
        sel = (dm.depth > 0) & ~claimed[r]
        if not sel.any():
            continue
        rows, cols = np.nonzero(sel)
        uv = np.stack([cols + 0.5, rows + 0.5], axis=-1)
        d = dm.depth[rows, cols]
        X = unproject(cam, uv, d)
        acc = X.copy()
        support = np.ones(len(d), dtype=np.int64)
        later = range(r + 1, len(depths)) if candidates is None else sorted(w for w in candidates[r] if w > r)
        for w in later:
            nb = depths[w].depth
            agree, ncol, nrow = _consistent(cam, uv, d, X, nb, cameras[w], params)
            idx = np.flatnonzero(agree)
            if len(idx) == 0:
                continue
            flat = nrow[idx] * nb.shape[1] + ncol[idx]
            free = ~claimed[w].ravel()[flat]
            idx, flat = idx[free], flat[free]
            flat, first = np.unique(flat, return_index=True)
            idx = idx[first]
            rr, cc = np.divmod(flat, nb.shape[1])
            centers = np.stack([cc + 0.5, rr + 0.5], axis=-1)
            acc[idx] += unproject(cameras[w], centers, nb[rr, cc])
            support[idx] += 1
            claimed[w].ravel()[flat] = True
        image = np.asarray(get_image(r))
        rgb = image[rows, cols] if image.ndim == 3 else np.repeat(image[rows, cols][:, None], 3, axis=1)
        pos_out.append(acc / support[:, None])
        col_out.append(rgb.astype(np.uint8))
        sup_out.append(support)
    if not pos_out:
        return PointCloud()
    return PointCloud(np.concatenate(pos_out), np.concatenate(col_out), np.concatenate(sup_out))
