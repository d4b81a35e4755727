"""Overlap-driven view clustering and source selection.

Overlap between two views is measured on proxy 3-D points (sparse points
or sampled ground points): the fraction of proxies visible in view A that
also land in view B, averaged with the reverse direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyProxy, NoSources, ParseError
from .geometry import Camera, project_points

SCORE_FLOOR = 0.05


def visible(camera: Camera, points: np.ndarray) -> np.ndarray:
    uv, front = project_points(camera, points)
    return front & camera.in_bounds(np.nan_to_num(uv, nan=-1.0))


def _directed(va: np.ndarray, vb: np.ndarray) -> float:
    n = int(va.sum())
    if n == 0:
        return 0.0
    return float((va & vb).sum()) / n


def overlap_score(view_a: Camera, view_b: Camera, proxy_points) -> float:
    proxy_points = np.asarray(proxy_points, dtype=np.float64).reshape(-1, 3)
    if len(proxy_points) == 0:
        raise EmptyProxy("overlap needs at least one proxy point")
    va = visible(view_a, proxy_points)
    vb = visible(view_b, proxy_points)
    return 0.5 * (_directed(va, vb) + _directed(vb, va))


@dataclass
class OverlapGraph:
    """Symmetric overlap scores; ``scores[a, b]`` indexes into ``ids``."""

    ids: list
    scores: np.ndarray

    def __post_init__(self):
        self._index = {v: k for k, v in enumerate(self.ids)}

    def index(self, view_id) -> int:
        return self._index[view_id]

    def score(self, a, b) -> float:
        return float(self.scores[self._index[a], self._index[b]])

    def degree(self, view_id) -> int:
        row = self.scores[self._index[view_id]]
        return int((row > SCORE_FLOOR).sum()) - 1


def build_overlap_graph(cameras: dict, proxy_points) -> OverlapGraph:
    """Pairwise overlap for ``{view_id: Camera}`` (ids sorted ascending)."""
    proxy_points = np.asarray(proxy_points, dtype=np.float64).reshape(-1, 3)
    if len(proxy_points) == 0:
        raise EmptyProxy("overlap needs at least one proxy point")
    ids = sorted(cameras)
    vis = np.stack([visible(cameras[v], proxy_points) for v in ids]).astype(np.int64)
    shared = vis @ vis.T
    counts = vis.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        directed = np.where(counts[:, None] > 0, shared / counts[:, None], 0.0)
    scores = 0.5 * (directed + directed.T)
    np.fill_diagonal(scores, 1.0)
    return OverlapGraph(ids, scores)


@dataclass
class Cluster:
    members: list
    borrowed: list = field(default_factory=list)
    isolated: bool = False

    @property
    def references(self) -> list:
        return list(self.members)


def cluster_views(graph: OverlapGraph, target_size: int) -> list[Cluster]:
    """Greedy agglomeration into clusters of about ``target_size`` views.

    Seeds are the unassigned views with the most neighbours above the score
    floor; clusters grow by the unassigned view with the largest summed
    overlap to the current members.  Ties go to the smaller view id.
    """
    if target_size < 2:
        raise ValueError("target_size must be >= 2")
    ids = list(graph.ids)
    S = graph.scores
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    unassigned = set(range(len(ids)))
    degree = ((S > SCORE_FLOOR).sum(axis=1) - 1).tolist()
    clusters = []
    while unassigned:
        seed = min(unassigned, key=lambda k: (-degree[k], ids[k]))
        members = [seed]
        unassigned.discard(seed)
        total = S[seed].copy()
        while len(members) < target_size and unassigned:
            best = None
            for k in order:
                if k not in unassigned:
                    continue
                if best is None or total[k] > total[best]:
                    best = k
            if total[best] <= SCORE_FLOOR:
                break
            members.append(best)
            unassigned.discard(best)
            total += S[best]
        member_set = set(members)
        borrowed = [
            ids[k]
            for k in order
            if k not in member_set and any(S[k, m] > SCORE_FLOOR for m in members)
        ]
        clusters.append(
            Cluster(
                members=sorted(ids[m] for m in members),
                borrowed=borrowed,
                isolated=len(members) == 1,
            )
        )
    return clusters


def select_source_views(reference, cluster: Cluster, graph: OverlapGraph, k: int) -> list:
    """Top-``k`` overlapping views for ``reference`` among the cluster's
    members and borrowed boundary views.

    Raises:
        NoSources: no candidate scores above the floor.
    """
    if reference not in cluster.members:
        raise ValueError(f"{reference} is not a member of the cluster")
    candidates = [v for v in list(cluster.members) + list(cluster.borrowed) if v != reference]
    scored = [(graph.score(reference, v), v) for v in candidates]
    scored = [sv for sv in scored if sv[0] > SCORE_FLOOR]
    if not scored:
        raise NoSources(f"view {reference} has no source above the overlap floor")
    scored.sort(key=lambda sv: (-sv[0], sv[1]))
    return [v for _, v in scored[:k]]


def write_clusters(clusters: list[Cluster], path) -> None:
    lines = [f"cluster {k}: " + " ".join(str(v) for v in c.members) for k, c in enumerate(clusters)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_clusters(path, graph: OverlapGraph | None = None) -> list[Cluster]:
    """Parse a cluster file; borrowed views are recomputed from ``graph``."""
    clusters = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        head, _, rest = line.partition(":")
        if not head.startswith("cluster ") or not _:
            raise ParseError("expected 'cluster <id>: <view ids...>'", path, lineno)
        try:
            members = [int(t) for t in rest.split()]
        except ValueError:
            raise ParseError("view ids must be integers", path, lineno) from None
        if not members:
            raise ParseError("empty cluster", path, lineno)
        clusters.append(Cluster(members=members, isolated=len(members) == 1))
    if graph is not None:
        for c in clusters:
            ms = set(c.members)
            c.borrowed = [
                v for v in graph.ids if v not in ms and any(graph.score(v, m) > SCORE_FLOOR for m in c.members)
            ]
    return clusters
