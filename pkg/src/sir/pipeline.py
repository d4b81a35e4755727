"""End-to-end orchestration: fixture generation, recapture, clustering,
depth estimation, filtering, fusion and evaluation.

Stages talk to each other only through files in the output directory::

    run.json                 resolved configuration and mode
    views/sparse/            sparse model of the stereo views
    views/images/            their pixmaps (tiles or resized images)
    views/views.json         stereo view -> parent image, origin, scale
    clusters.txt             clusters of parent views
    depth/<view>.sird        raw plane-sweep depth maps
    depth/plan.json          per-reference sources and depth range
    filtered/<view>.sird     depth maps after the consistency filter
    cloud.ply                fused point cloud
    memory.json              analytic figures and observed resident bytes
    metrics.json             evaluation against ground truth

Clustering and source ranking always happen on the parent (native)
views.  A stereo view is a tile in ``sir`` mode, a resized image in
``downsample`` mode and the image itself in ``native`` mode.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .clustering import (
    Cluster,
    OverlapGraph,
    build_overlap_graph,
    cluster_views,
    read_clusters,
    select_source_views,
    write_clusters,
)
from .errors import (
    DegenerateRange,
    EmptyProxy,
    MemoryOverflow,
    MissingFile,
    MissingGroundTruth,
    NoSources,
)
from .geometry import Camera, Extrinsics, camera_depth, pixel_centers, project_points, unproject
from .memory import ResidentImages, estimate_cluster_peak
from .model_io import (
    DepthMap,
    SceneModel,
    SparsePoint,
    View,
    ensure_dir,
    read_depth,
    read_image,
    read_point_cloud,
    read_sparse_model,
    write_depth,
    write_image,
    write_point_cloud,
    write_sparse_model,
)
from .mvs import (
    FuseParams,
    StereoView,
    SweepParams,
    depth_hypotheses,
    fuse_depth_maps,
    geometric_consistency_filter,
    inverse_depth_step,
    plane_sweep,
)
from .oracle import SceneSpec, generate_scene, make_aerial_cameras, write_fixture
from .recapture import GridSpec, grid_refs, recapture_grid

log = logging.getLogger(__name__)

MODES = ("sir", "downsample", "native")
RANGE_PAD = 0.2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class OracleConfig:
    rows: int = 2
    cols: int = 3
    altitude: float = 50.0
    overlap: float = 0.7
    width: int = 640
    height: int = 480
    focal: float | None = None
    k1: float = 0.0
    k2: float = 0.0
    scene: SceneSpec = field(default_factory=SceneSpec)


@dataclass
class RunConfig:
    """Everything a run needs.  ``fixture`` fills unset input paths with
    ``<fixture>/sparse``, ``<fixture>/images`` and ``<fixture>/gt``."""

    fixture: str | None = None
    model_dir: str | None = None
    image_dir: str | None = None
    gt_dir: str | None = None
    out_dir: str = "out"
    mode: str = "sir"
    grid: tuple[int, int] = (5, 5)
    max_image_size: int = 2304
    cluster_size: int = 20
    num_sources: int = 4
    sweep: SweepParams = field(default_factory=SweepParams)
    fuse: FuseParams = field(default_factory=FuseParams)
    workers: int = 1
    seed: int = 42
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.grid = tuple(int(g) for g in self.grid)
        GridSpec(*self.grid)
        for name in ("max_image_size", "cluster_size", "num_sources", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cluster_size < 2:
            raise ValueError("cluster_size must be >= 2")
        if self.fixture is not None:
            root = Path(self.fixture)
            self.model_dir = self.model_dir or str(root / "sparse")
            self.image_dir = self.image_dir or str(root / "images")
            self.gt_dir = self.gt_dir or str(root / "gt")
        paths = [Path(p).resolve() for p in (self.model_dir, self.image_dir, self.out_dir) if p]
        if len(set(paths)) != len(paths):
            raise ValueError("model, image and output directories must be distinct")

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(*self.grid)

    @property
    def scene_file(self) -> Path | None:
        return Path(self.fixture) / "scene.json" if self.fixture else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["oracle"]["scene"]["extent"] = list(self.oracle.scene.extent)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "sweep" in data:
            data["sweep"] = _build(SweepParams, data["sweep"], "sweep")
        if "fuse" in data:
            data["fuse"] = _build(FuseParams, data["fuse"], "fuse")
        if "oracle" in data:
            o = dict(data["oracle"])
            if "scene" in o:
                s = dict(o["scene"])
                if "extent" in s:
                    s["extent"] = tuple(s["extent"])
                o["scene"] = _build(SceneSpec, s, "oracle.scene")
            data["oracle"] = _build(OracleConfig, o, "oracle")
        return cls(**data)


def _build(kind, values, where):
    if isinstance(values, kind):
        return values
    known = {f.name for f in fields(kind)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return kind(**values)


def env_workers(default: int) -> int:
    value = os.environ.get("SIR_WORKERS")
    if value is None or value == "":
        return default
    n = int(value)
    if n < 1:
        raise ValueError("SIR_WORKERS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# fixture generation
# ---------------------------------------------------------------------------


def cmd_oracle_gen(cfg: RunConfig) -> SceneModel:
    o = cfg.oracle
    spec = replace(o.scene, seed=cfg.seed)
    scene = generate_scene(spec)
    cams = make_aerial_cameras(scene, o.rows, o.cols, o.altitude, o.overlap, o.width, o.height, o.focal, o.k1, o.k2)
    return write_fixture(cfg.out_dir, scene, cams)


# ---------------------------------------------------------------------------
# stereo views
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewRecord:
    """How a stereo view relates to its parent image."""

    name: str
    parent: int
    parent_name: str
    origin: tuple[int, int]
    scale: tuple[float, float]
    image: str

    def to_dict(self):
        return {
            "name": self.name,
            "parent": self.parent,
            "parent_name": self.parent_name,
            "origin": list(self.origin),
            "scale": list(self.scale),
            "image": self.image,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], int(d["parent"]), d["parent_name"], tuple(d["origin"]), tuple(d["scale"]), d["image"])


@dataclass
class ViewSet:
    model: SceneModel
    records: dict[int, ViewRecord]
    root: Path

    def camera(self, vid: int) -> Camera:
        return self.model.view_camera(vid)

    def image_path(self, vid: int) -> Path:
        p = Path(self.records[vid].image)
        return p if p.is_absolute() else self.root / p

    def by_parent(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for vid in sorted(self.records):
            out.setdefault(self.records[vid].parent, []).append(vid)
        return out

    def by_name(self) -> dict[str, int]:
        return {r.name: vid for vid, r in self.records.items()}

    def stereo_view(self, vid: int, image) -> StereoView:
        r = self.records[vid]
        return StereoView(r.name, self.camera(vid), image, parent=r.parent_name, origin=r.origin)


def _stem(name: str) -> str:
    return Path(name).stem


def _image_file(image_dir, name) -> Path:
    path = Path(image_dir) / name
    if not path.is_file():
        raise MissingFile(f"missing image {path}")
    return path


def _write_views(root: Path, model: SceneModel, records: dict[int, ViewRecord]) -> ViewSet:
    write_sparse_model(model, ensure_dir(root / "sparse"))
    payload = [records[v].to_dict() for v in sorted(records)]
    (root / "views.json").write_text(json.dumps(payload, indent=2) + "\n")
    return ViewSet(model, records, root)


def load_views(root) -> ViewSet:
    root = Path(root)
    meta = root / "views.json"
    if not meta.is_file():
        raise MissingFile(f"missing {meta}")
    model = read_sparse_model(root / "sparse")
    records = {}
    for d in json.loads(meta.read_text()):
        rec = ViewRecord.from_dict(d)
        records[model.view_by_name(rec.name + ".ppm")] = rec
    return ViewSet(model, records, root)


def _tile_points(model: SceneModel, cams: dict[int, Camera], tile_of: dict[int, list]) -> list[SparsePoint]:
    """Re-attach sparse observations to the tiles their projections land in."""
    out = []
    for p in model.sparse_points:
        obs = []
        for vid in p.view_ids:
            for tid, ref in tile_of.get(vid, []):
                uv, front = project_points(cams[vid], p.position[None])
                if not front[0]:
                    continue
                col, row = np.floor(uv[0]).astype(int)
                if ref.contains(col, row):
                    obs.append(tid)
        if obs:
            out.append(SparsePoint(p.point_id, p.position, p.color, sorted(obs)))
    return out


def recapture_model(model: SceneModel, image_dir, out_root, grid: GridSpec) -> ViewSet:
    """Split every image of ``model`` and write the tile model."""
    out_root = Path(out_root)
    img_out = ensure_dir(out_root / "images")
    tiles = SceneModel()
    records = {}
    tile_of: dict[int, list] = {}
    cams = {vid: model.view_camera(vid) for vid in model.views}
    next_id = 1
    for vid in sorted(model.views):
        view = model.views[vid]
        stem = _stem(view.name)
        pixels = read_image(_image_file(image_dir, view.name))
        rset = recapture_grid(cams[vid], grid, stem)
        for ref, sub in rset:
            tid = next_id
            next_id += 1
            tiles.cameras[tid] = Camera(sub.intrinsics, Extrinsics(), sub.width, sub.height)
            tiles.views[tid] = View(tid, ref.name + ".ppm", view.extrinsics)
            tile = pixels[ref.origin_y : ref.origin_y + ref.height, ref.origin_x : ref.origin_x + ref.width]
            write_image(img_out / (ref.name + ".ppm"), tile)
            records[tid] = ViewRecord(ref.name, vid, stem, ref.origin, (1.0, 1.0), f"images/{ref.name}.ppm")
            tile_of.setdefault(vid, []).append((tid, ref))
    tiles.sparse_points = _tile_points(model, cams, tile_of)
    return _write_views(out_root, tiles, records)


def cmd_recapture(cfg: RunConfig) -> ViewSet:
    """Write the tile model and pixmaps to ``<out>/views``."""
    model = read_sparse_model(cfg.model_dir)
    return recapture_model(model, cfg.image_dir, Path(cfg.out_dir) / "views", cfg.grid_spec)


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging input cells over each output cell."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)
    w = np.clip(np.minimum(edges[1:, None], lo[None] + 1) - np.maximum(edges[:-1, None], lo[None]), 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def resized_size(width: int, height: int, max_size: int) -> tuple[int, int]:
    s = max(width, height)
    if s <= max_size:
        return width, height
    f = max_size / s
    return max(1, round(width * f)), max(1, round(height * f))


def resize_image(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    ay, ax = area_weights(h, height), area_weights(w, width)
    src = pixels.astype(np.float64)
    if src.ndim == 2:
        out = ay @ src @ ax.T
    else:
        rows = np.tensordot(ay, src, axes=(1, 0))
        out = np.tensordot(rows, ax, axes=(1, 1)).transpose(0, 2, 1)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_camera(camera: Camera, width: int, height: int) -> Camera:
    """Scale intrinsics to a resized image; distortion acts on normalized
    coordinates and is kept as is."""
    sx, sy = width / camera.width, height / camera.height
    i = camera.intrinsics
    intr = replace(i, fx=i.fx * sx, fy=i.fy * sy, cx=i.cx * sx, cy=i.cy * sy)
    return replace(camera, intrinsics=intr, width=width, height=height)


def downsample_model(model: SceneModel, image_dir, out_root, max_size: int) -> ViewSet:
    out_root = Path(out_root)
    img_out = ensure_dir(out_root / "images")
    small = SceneModel(sparse_points=list(model.sparse_points))
    for cid, cam in model.cameras.items():
        w, h = resized_size(cam.width, cam.height, max_size)
        small.cameras[cid] = resize_camera(cam, w, h)
    records = {}
    for vid in sorted(model.views):
        view = model.views[vid]
        cam = small.cameras[view.camera_id]
        native = model.cameras[view.camera_id]
        pixels = read_image(_image_file(image_dir, view.name))
        stem = _stem(view.name)
        write_image(img_out / f"{stem}.ppm", resize_image(pixels, cam.width, cam.height))
        small.views[vid] = View(view.camera_id, f"{stem}.ppm", view.extrinsics)
        scale = (cam.width / native.width, cam.height / native.height)
        records[vid] = ViewRecord(stem, vid, stem, (0, 0), scale, f"images/{stem}.ppm")
    return _write_views(out_root, small, records)


def native_model(model: SceneModel, image_dir, out_root) -> ViewSet:
    out_root = ensure_dir(out_root)
    records = {}
    for vid in sorted(model.views):
        view = model.views[vid]
        stem = _stem(view.name)
        path = _image_file(image_dir, view.name).resolve()
        records[vid] = ViewRecord(stem, vid, stem, (0, 0), (1.0, 1.0), str(path))
    renamed = SceneModel(dict(model.cameras), {v: replace(model.views[v], name=_stem(model.views[v].name) + ".ppm")
                                               for v in model.views}, list(model.sparse_points))
    return _write_views(out_root, renamed, records)


def prepare_views(cfg: RunConfig, model: SceneModel) -> ViewSet:
    root = Path(cfg.out_dir) / "views"
    if cfg.mode == "sir":
        return recapture_model(model, cfg.image_dir, root, cfg.grid_spec)
    if cfg.mode == "downsample":
        return downsample_model(model, cfg.image_dir, root, cfg.max_image_size)
    return native_model(model, cfg.image_dir, root)


# ---------------------------------------------------------------------------
# clustering and planning
# ---------------------------------------------------------------------------


def proxy_points(model: SceneModel, depth_hint: float | None = None) -> np.ndarray:
    """Sparse points, or ground samples along view frusta when absent."""
    if model.sparse_points:
        return np.array([p.position for p in model.sparse_points])
    if depth_hint is None:
        raise EmptyProxy("model has no sparse points and no depth range is configured")
    pts = []
    for vid in sorted(model.views):
        cam = model.view_camera(vid)
        u = (np.arange(8) + 0.5) * cam.width / 8
        v = (np.arange(8) + 0.5) * cam.height / 8
        uu, vv = np.meshgrid(u, v)
        pts.append(unproject(cam, np.stack([uu.ravel(), vv.ravel()], axis=-1), depth_hint))
    return np.concatenate(pts)


def _depth_hint(sweep: SweepParams):
    if sweep.min_depth is not None and sweep.max_depth is not None:
        return 0.5 * (sweep.min_depth + sweep.max_depth)
    return None


def overlap_graph(model: SceneModel, sweep: SweepParams) -> OverlapGraph:
    cams = {vid: model.view_camera(vid) for vid in model.views}
    return build_overlap_graph(cams, proxy_points(model, _depth_hint(sweep)))


def cmd_cluster(cfg: RunConfig) -> list[Cluster]:
    model = read_sparse_model(cfg.model_dir)
    graph = overlap_graph(model, cfg.sweep)
    clusters = cluster_views(graph, cfg.cluster_size)
    ensure_dir(cfg.out_dir)
    write_clusters(clusters, Path(cfg.out_dir) / "clusters.txt")
    return clusters


def cluster_depth_range(model: SceneModel, cluster: Cluster, sweep: SweepParams) -> tuple[float, float]:
    """Configured range if given, else the depths of sparse points seen by
    the members, padded by 20% on each side."""
    if sweep.min_depth is not None and sweep.max_depth is not None:
        return float(sweep.min_depth), float(sweep.max_depth)
    depths = []
    members = set(cluster.members)
    for p in model.sparse_points:
        for vid in p.view_ids:
            if vid in members:
                depths.append(float(camera_depth(model.view_camera(vid), p.position)))
    depths = [d for d in depths if d > 0]
    if not depths:
        raise DegenerateRange(f"cluster {cluster.members} has no sparse points; set sweep.min_depth/max_depth")
    lo, hi = (1.0 - RANGE_PAD) * min(depths), (1.0 + RANGE_PAD) * max(depths)
    if not lo < hi:
        raise DegenerateRange(f"degenerate depth range [{lo}, {hi}]")
    return lo, hi


def needed_region(ref: Camera, src: Camera, hyps: np.ndarray) -> tuple[int, int, int, int] | None:
    """Pixel-index box ``(x0, y0, x1, y1)`` (inclusive) of ``src`` that a
    sweep of ``ref`` over ``hyps`` can touch, or None if it touches nothing.

    At each depth the warp is a continuous bijection of the reference
    rectangle, so the border's image bounds the whole image.  A one-pixel
    guard covers bilinear neighbours and rounding.
    """
    w, h = ref.width, ref.height
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    border = np.concatenate([
        np.stack([cols, np.full(w, 0.5)], -1),
        np.stack([cols, np.full(w, h - 0.5)], -1),
        np.stack([np.full(h, 0.5), rows], -1),
        np.stack([np.full(h, w - 0.5), rows], -1),
    ])
    pts = unproject(ref, border[None], hyps[:, None]).reshape(-1, 3)
    uv, front = project_points(src, pts)
    if not front.all():
        return 0, 0, src.width - 1, src.height - 1
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    x0 = int(math.floor(x.min())) - 1
    y0 = int(math.floor(y.min())) - 1
    x1 = int(math.floor(x.max())) + 2
    y1 = int(math.floor(y.max())) + 2
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, src.width - 1), min(y1, src.height - 1)
    if x0 > x1 or y0 > y1:
        return None
    return x0, y0, x1, y1


@dataclass
class Job:
    cluster: int
    reference: str
    sources: list[str]
    min_depth: float
    max_depth: float

    def to_dict(self):
        return asdict(self)


def plan_jobs(cfg: RunConfig, parents: SceneModel, views: ViewSet, clusters: list[Cluster]) -> list[Job]:
    graph = overlap_graph(parents, cfg.sweep)
    children = views.by_parent()
    names = {vid: r.name for vid, r in views.records.items()}
    parent_cams = {vid: parents.view_camera(vid) for vid in parents.views}
    jobs = []
    for k, cluster in enumerate(clusters):
        lo, hi = cluster_depth_range(parents, cluster, cfg.sweep)
        hyps = depth_hypotheses(lo, hi, cfg.sweep.num_hypotheses)
        for ref_parent in cluster.members:
            try:
                src_parents = select_source_views(ref_parent, cluster, graph, cfg.num_sources)
            except NoSources:
                log.warning("view %s has no stereo sources; skipped", ref_parent)
                continue
            for ref_vid in children[ref_parent]:
                ref_cam = views.camera(ref_vid)
                sources = []
                for sp in src_parents:
                    sp_cam = _stereo_parent_camera(views, children[sp][0], parent_cams[sp])
                    box = needed_region(ref_cam, sp_cam, hyps)
                    if box is None:
                        continue
                    for sv in children[sp]:
                        if _overlaps(views, sv, box):
                            sources.append(names[sv])
                if sources:
                    jobs.append(Job(k, names[ref_vid], sources, lo, hi))
                else:
                    log.warning("%s sees no source pixels; skipped", names[ref_vid])
    return jobs


def _stereo_parent_camera(views: ViewSet, child_vid: int, native: Camera) -> Camera:
    """The parent image's camera at stereo resolution."""
    cam = views.camera(child_vid)
    ox, oy = views.records[child_vid].origin
    i = cam.intrinsics
    sx, sy = views.records[child_vid].scale
    w, h = round(native.width * sx), round(native.height * sy)
    return replace(cam, intrinsics=replace(i, cx=i.cx + ox, cy=i.cy + oy), width=w, height=h)


def _overlaps(views: ViewSet, vid: int, box) -> bool:
    r = views.records[vid]
    cam = views.camera(vid)
    ox, oy = r.origin
    x0, y0, x1, y1 = box
    return not (ox + cam.width - 1 < x0 or ox > x1 or oy + cam.height - 1 < y0 or oy > y1)


def write_plan(jobs: list[Job], path) -> None:
    Path(path).write_text(json.dumps([j.to_dict() for j in jobs], indent=2) + "\n")


def read_plan(path) -> list[Job]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing plan {path}")
    return [Job(**d) for d in json.loads(path.read_text())]


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------


class SharedResident(ResidentImages):
    """Thread-safe resident-image counter shared by a cluster's jobs."""

    def __init__(self, loader):
        super().__init__(loader)
        self._lock = threading.Lock()

    def load(self, key):
        with self._lock:
            return super().load(key)


def _run_pool(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sweep_params(cfg: RunConfig, job: Job) -> SweepParams:
    return replace(cfg.sweep, min_depth=job.min_depth, max_depth=job.max_depth)


def run_depth(cfg: RunConfig, views: ViewSet, jobs: list[Job], workers: int) -> dict:
    """Sweep every job, one cluster resident at a time.

    Returns the memory record: per-cluster budget (bytes of every image the
    cluster's jobs need) and the observed peak of resident image bytes.
    """
    out = ensure_dir(Path(cfg.out_dir) / "depth")
    ids = views.by_name()
    record = {"clusters": [], "peak_bytes": 0, "max_job_bytes": 0}
    for k in sorted({j.cluster for j in jobs}):
        cj = [j for j in jobs if j.cluster == k]
        needed = sorted({n for j in cj for n in [j.reference] + j.sources})
        cache = SharedResident(lambda name: read_image(views.image_path(ids[name])))
        budget = sum(_image_nbytes(views, ids[n]) for n in needed)

        def work(job: Job):
            ref = views.stereo_view(ids[job.reference], cache.load(job.reference))
            srcs = [views.stereo_view(ids[s], cache.load(s)) for s in job.sources]
            dm = plane_sweep(ref, srcs, _sweep_params(cfg, job))
            write_depth(out / f"{job.reference}.sird", dm)
            return sum(_image_nbytes(views, ids[n]) for n in [job.reference] + job.sources)

        job_bytes = _run_pool(work, cj, workers)
        if cache.peak_bytes > budget:
            raise MemoryOverflow(f"cluster {k} held {cache.peak_bytes} bytes, budget {budget}")
        record["clusters"].append({"cluster": k, "budget_bytes": budget, "peak_bytes": cache.peak_bytes})
        record["peak_bytes"] = max(record["peak_bytes"], cache.peak_bytes)
        record["max_job_bytes"] = max([record["max_job_bytes"]] + job_bytes)
        cache.release_all()
    write_plan(jobs, out / "plan.json")
    return record


def _image_nbytes(views: ViewSet, vid: int) -> int:
    cam = views.camera(vid)
    return cam.width * cam.height * 3


def cmd_depth(cfg: RunConfig) -> dict:
    """Plan and sweep from an existing ``views/`` and ``clusters.txt``."""
    out = Path(cfg.out_dir)
    parents = read_sparse_model(cfg.model_dir)
    views = load_views(out / "views")
    graph = overlap_graph(parents, cfg.sweep)
    clusters = read_clusters(out / "clusters.txt", graph)
    jobs = plan_jobs(cfg, parents, views, clusters)
    return run_depth(cfg, views, jobs, env_workers(cfg.workers))


# ---------------------------------------------------------------------------
# filtering and fusion
# ---------------------------------------------------------------------------


def run_filter(cfg: RunConfig, views: ViewSet, jobs: list[Job], workers: int) -> None:
    src = Path(cfg.out_dir) / "depth"
    out = ensure_dir(Path(cfg.out_dir) / "filtered")
    ids = views.by_name()

    def work(job: Job):
        ref = read_depth(src / f"{job.reference}.sird", job.reference)
        nbs = [(read_depth(src / f"{s}.sird", s), views.camera(ids[s])) for s in job.sources
               if (src / f"{s}.sird").is_file()]
        dm = geometric_consistency_filter(ref, views.camera(ids[job.reference]), nbs, cfg.fuse)
        write_depth(out / f"{job.reference}.sird", dm)

    _run_pool(work, jobs, workers)


def run_fuse(cfg: RunConfig, views: ViewSet, jobs: list[Job]):
    src = Path(cfg.out_dir) / "filtered"
    ids = views.by_name()
    order = sorted(j.reference for j in jobs)
    index = {n: k for k, n in enumerate(order)}
    neighbours = {n: set() for n in order}
    for j in jobs:
        for s in j.sources:
            if s in index:
                neighbours[j.reference].add(index[s])
                neighbours[s].add(index[j.reference])
    depths = [read_depth(src / f"{n}.sird", n) for n in order]
    cams = [views.camera(ids[n]) for n in order]
    candidates = [sorted(neighbours[n]) for n in order]
    cloud = fuse_depth_maps(
        depths, cams, lambda k: read_image(views.image_path(ids[order[k]])), cfg.fuse, candidates=candidates
    )
    write_point_cloud(cloud, Path(cfg.out_dir) / "cloud.ply")
    return cloud


def cmd_fuse(cfg: RunConfig):
    out = Path(cfg.out_dir)
    views = load_views(out / "views")
    jobs = read_plan(out / "depth" / "plan.json")
    run_filter(cfg, views, jobs, env_workers(cfg.workers))
    return run_fuse(cfg, views, jobs)


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


def memory_summary(cfg: RunConfig, parents: SceneModel, jobs: list[Job], record: dict) -> dict:
    cam = next(iter(parents.cameras.values()))
    grid = cfg.grid_spec if cfg.mode == "sir" else GridSpec(1, 1)
    width, height = cam.width, cam.height
    if cfg.mode == "downsample":
        width, height = resized_size(width, height, cfg.max_image_size)
    n_src = max((len(j.sources) for j in jobs), default=0)
    step = estimate_cluster_peak(n_src, width, height, 3, 1, grid, cfg.sweep.num_hypotheses)
    native = estimate_cluster_peak(cfg.num_sources, cam.width, cam.height, 3, 1, GridSpec(1, 1),
                                   cfg.sweep.num_hypotheses)
    return {
        "mode": cfg.mode,
        "step_estimate": json.loads(step.to_json()),
        "native_estimate": json.loads(native.to_json()),
        **record,
    }


def cmd_reconstruct(cfg: RunConfig) -> dict:
    """Run every stage for ``cfg.mode`` and return the memory summary."""
    out = ensure_dir(cfg.out_dir)
    workers = env_workers(cfg.workers)
    (out / "run.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    parents = read_sparse_model(cfg.model_dir)
    views = prepare_views(cfg, parents)
    graph = overlap_graph(parents, cfg.sweep)
    clusters = cluster_views(graph, cfg.cluster_size)
    write_clusters(clusters, out / "clusters.txt")
    jobs = plan_jobs(cfg, parents, views, clusters)
    record = run_depth(cfg, views, jobs, workers)
    run_filter(cfg, views, jobs, workers)
    run_fuse(cfg, views, jobs)
    summary = memory_summary(cfg, parents, jobs, record)
    (out / "memory.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.gt_dir and Path(cfg.gt_dir).is_dir():
        cmd_evaluate(cfg)
    return summary


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample at pixel-index coordinates; 0 where any neighbour is invalid."""
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    tx, ty = x - x0, y - y0
    x1 = np.where(tx > 0, x0 + 1, x0)
    y1 = np.where(ty > 0, y0 + 1, y0)
    inside = (x0 >= 0) & (y0 >= 0) & (x1 < w) & (y1 < h)
    xs = [np.clip(a, 0, w - 1) for a in (x0, x1)]
    ys = [np.clip(a, 0, h - 1) for a in (y0, y1)]
    v00, v10 = img[ys[0], xs[0]], img[ys[0], xs[1]]
    v01, v11 = img[ys[1], xs[0]], img[ys[1], xs[1]]
    ok = inside & (v00 > 0) & (v10 > 0) & (v01 > 0) & (v11 > 0)
    val = (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty
    return np.where(ok, val, 0.0)


def gt_for_view(record: ViewRecord, shape, gt: np.ndarray) -> np.ndarray:
    """Ground truth resampled onto a stereo view's pixel grid."""
    h, w = shape
    uv = pixel_centers(w, h)
    sx, sy = record.scale
    x = uv[..., 0] / sx + record.origin[0] - 0.5
    y = uv[..., 1] / sy + record.origin[1] - 0.5
    return _bilinear(gt, x, y)


def depth_stats(est: np.ndarray, gt: np.ndarray, step: float) -> dict:
    gt_ok = gt > 0
    both = gt_ok & (est > 0)
    err = np.abs(est[both] - gt[both])
    good = both.copy()
    good[both] = np.abs(1.0 / est[both] - 1.0 / gt[both]) <= 2.0 * step
    n_gt = int(gt_ok.sum())
    return {
        "gt_pixels": n_gt,
        "estimated_pixels": int(both.sum()),
        "complete_pixels": int(good.sum()),
        "median_abs_error": float(np.median(err)) if len(err) else None,
        "completeness": float(good.sum()) / n_gt if n_gt else None,
        "errors": err,
    }


def _pool(stats: list[dict]) -> dict:
    err = np.concatenate([s["errors"] for s in stats]) if stats else np.zeros(0)
    n_gt = sum(s["gt_pixels"] for s in stats)
    good = sum(s["complete_pixels"] for s in stats)
    return {
        "median_abs_error": float(np.median(err)) if len(err) else None,
        "completeness": good / n_gt if n_gt else None,
        "gt_pixels": n_gt,
        "estimated_pixels": int(len(err)),
    }


def cloud_accuracy(cloud_path: Path, scene_file: Path | None):
    """Median vertical distance from fused points to the terrain."""
    if scene_file is None or not scene_file.is_file() or not cloud_path.is_file():
        return None
    cloud = read_point_cloud(cloud_path)
    if len(cloud) == 0:
        return None
    scene = generate_scene(SceneSpec.from_json(scene_file.read_text()))
    p = cloud.positions
    return float(np.median(np.abs(p[:, 2] - scene.height(p[:, 0], p[:, 1]))))


def cmd_evaluate(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    if not cfg.gt_dir or not Path(cfg.gt_dir).is_dir():
        raise MissingGroundTruth(f"ground-truth directory {cfg.gt_dir!r} not found")
    views = load_views(out / "views")
    jobs = {j.reference: j for j in read_plan(out / "depth" / "plan.json")}
    gts: dict[str, np.ndarray] = {}
    result = {"views": {}, "filtered": {}}
    for stage, key in (("depth", "views"), ("filtered", "filtered")):
        by_parent: dict[str, list] = {}
        for vid in sorted(views.records):
            rec = views.records[vid]
            cam = views.camera(vid)
            gt_path = Path(cfg.gt_dir) / f"{rec.parent_name}.sird"
            if rec.parent_name not in gts:
                if not gt_path.is_file():
                    raise MissingGroundTruth(f"missing ground truth {gt_path}")
                gts[rec.parent_name] = read_depth(gt_path).depth
            gt = gt_for_view(rec, (cam.height, cam.width), gts[rec.parent_name])
            path = out / stage / f"{rec.name}.sird"
            est = read_depth(path).depth if path.is_file() else np.zeros_like(gt)
            job = jobs.get(rec.name)
            if job is None:
                lo, hi = cfg.sweep.min_depth, cfg.sweep.max_depth
            else:
                lo, hi = job.min_depth, job.max_depth
            step = inverse_depth_step(lo, hi, cfg.sweep.num_hypotheses) if lo and hi else 0.0
            by_parent.setdefault(rec.parent_name, []).append(depth_stats(est, gt, step))
        per_view = {p: _pool(s) for p, s in sorted(by_parent.items())}
        result[key] = per_view
        result[f"{stage}_overall"] = _pool([s for ss in by_parent.values() for s in ss])
    result["cloud_accuracy"] = cloud_accuracy(out / "cloud.ply", cfg.scene_file)
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig, width: int | None = None, height: int | None = None):
    """Analytic memory report for one stereo step at the configured grid."""
    if width is None or height is None:
        model = read_sparse_model(cfg.model_dir)
        cam = next(iter(model.cameras.values()))
        width, height = cam.width, cam.height
    return estimate_cluster_peak(cfg.num_sources, width, height, 3, 4, cfg.grid_spec, cfg.sweep.num_hypotheses)
