import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import nadir_camera, seeds
from sir.clustering import (
    SCORE_FLOOR,
    Cluster,
    OverlapGraph,
    build_overlap_graph,
    cluster_views,
    overlap_score,
    read_clusters,
    select_source_views,
    write_clusters,
)
from sir.errors import EmptyProxy, NoSources, ParseError
from sir.geometry import Camera, Extrinsics, Intrinsics
from sir.oracle import NADIR


def ground_grid(n=200, half=60.0):
    g = np.linspace(-half, half, n)
    xx, yy = np.meshgrid(g, g)
    return np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=-1)


def graph_from(scores):
    scores = np.asarray(scores, dtype=float)
    return OverlapGraph(list(range(1, len(scores) + 1)), scores)


class TestOverlapScore:
    def test_identical(self):
        cam = nadir_camera([0, 0, 20.0])
        assert overlap_score(cam, cam, ground_grid()) == 1.0

    def test_opposite(self):
        down = nadir_camera([0, 0, 20.0])
        up = Camera(down.intrinsics, Extrinsics.from_center(np.eye(3), [0, 0, 20.0]), 64, 48)
        assert overlap_score(down, up, ground_grid()) == 0.0

    def test_half_footprint(self):
        # footprint at altitude 20 with focal 64 and width 64 is 20 units wide
        a = nadir_camera([0, 0, 20.0])
        b = nadir_camera([10.0, 0, 20.0])
        assert overlap_score(a, b, ground_grid(400)) == pytest.approx(0.5, abs=0.05)

    def test_empty_proxy(self):
        cam = nadir_camera([0, 0, 20.0])
        with pytest.raises(EmptyProxy):
            overlap_score(cam, cam, np.zeros((0, 3)))
        with pytest.raises(EmptyProxy):
            build_overlap_graph({1: cam}, [])

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = nadir_camera([*rng.uniform(-15, 15, 2), rng.uniform(10, 30)])
        b = nadir_camera([*rng.uniform(-15, 15, 2), rng.uniform(10, 30)])
        pts = ground_grid(60)
        s = overlap_score(a, b, pts)
        assert s == overlap_score(b, a, pts) and 0.0 <= s <= 1.0

    def test_graph_matches_pairwise(self):
        cams = {k: nadir_camera([6.0 * k, 0, 20.0]) for k in range(1, 5)}
        pts = ground_grid(100)
        g = build_overlap_graph(cams, pts)
        assert np.array_equal(g.scores, g.scores.T)
        assert np.all(np.diag(g.scores) == 1.0)
        for a in cams:
            for b in cams:
                if a != b:
                    assert g.score(a, b) == pytest.approx(overlap_score(cams[a], cams[b], pts), abs=1e-15)


class TestClusterViews:
    def test_forty_overlapping_views(self):
        clusters = cluster_views(graph_from(np.full((40, 40), 0.6)), 20)
        assert [len(c.members) for c in clusters] == [20, 20]
        assert clusters[0].members == list(range(1, 21))

    def test_disconnected(self):
        clusters = cluster_views(graph_from(np.eye(5)), 3)
        assert len(clusters) == 5 and all(c.isolated and len(c.members) == 1 for c in clusters)

    def test_single_view(self):
        [c] = cluster_views(graph_from([[1.0]]), 20)
        assert c.members == [1] and c.isolated

    def test_target_size_validated(self):
        with pytest.raises(ValueError):
            cluster_views(graph_from([[1.0]]), 1)

    def test_borrowed_boundary_views(self):
        # chain 1-2-3-4 with neighbouring overlap only
        s = np.eye(4)
        for k in range(3):
            s[k, k + 1] = s[k + 1, k] = 0.5
        clusters = cluster_views(graph_from(s), 2)
        members = sorted(v for c in clusters for v in c.members)
        assert members == [1, 2, 3, 4]
        for c in clusters:
            for b in c.borrowed:
                assert b not in c.members

    @settings(max_examples=100, deadline=None)
    @given(seeds, st.integers(1, 30), st.integers(2, 8))
    def test_partition_property(self, seed, n, target):
        rng = np.random.default_rng(seed)
        s = rng.uniform(0, 1, (n, n)) * (rng.uniform(size=(n, n)) < 0.4)
        s = np.maximum(s, s.T)
        np.fill_diagonal(s, 1.0)
        g = graph_from(s)
        clusters = cluster_views(g, target)
        members = [v for c in clusters for v in c.members]
        assert sorted(members) == list(range(1, n + 1))
        assert all(1 <= len(c.members) <= target for c in clusters)
        assert clusters == cluster_views(g, target)


class TestSourceSelection:
    def test_pair(self):
        g = graph_from([[1, 0.6], [0.6, 1]])
        assert select_source_views(1, Cluster([1, 2]), g, 4) == [2]

    def test_top_k(self):
        scores = np.eye(7)
        for k, v in enumerate([0.9, 0.8, 0.7, 0.6, 0.5, 0.4], start=1):
            scores[0, k] = scores[k, 0] = v
        g = graph_from(scores)
        assert select_source_views(1, Cluster(list(range(1, 8))), g, 3) == [2, 3, 4]

    def test_ties_by_id_and_floor(self):
        s = np.eye(4)
        s[0, 1:] = s[1:, 0] = [0.3, 0.3, SCORE_FLOOR]
        g = graph_from(s)
        assert select_source_views(1, Cluster([1, 2, 3, 4]), g, 5) == [2, 3]

    def test_borrowed_views_are_candidates(self):
        g = graph_from([[1, 0.2, 0.7], [0.2, 1, 0], [0.7, 0, 1]])
        assert select_source_views(1, Cluster([1, 2], borrowed=[3]), g, 1) == [3]

    def test_no_sources(self):
        with pytest.raises(NoSources):
            select_source_views(1, Cluster([1, 2]), graph_from(np.eye(2)), 3)

    def test_reference_must_be_member(self):
        with pytest.raises(ValueError):
            select_source_views(3, Cluster([1, 2]), graph_from(np.eye(3)), 3)

    def test_sub_view_sources_share_footprint(self, tmp_path):
        """Sources picked for a tile come from other parents and cover the same ground."""
        from sir.recapture import GridSpec, recapture_grid

        cams = [nadir_camera([x, 0, 20.0], 128, 96, 128.0) for x in (0.0, 5.0, 10.0)]
        subs = {}
        for p, cam in enumerate(cams):
            for ref, sub in recapture_grid(cam, GridSpec(2, 2)):
                subs[10 * p + ref.j * 2 + ref.i] = sub
        pts = ground_grid(300, 30.0)
        g = build_overlap_graph(subs, pts)
        cluster = Cluster(sorted(subs))
        for ref_id in subs:
            for src in select_source_views(ref_id, cluster, g, 3):
                assert src // 10 != ref_id // 10
                assert g.score(ref_id, src) >= 0.3


class TestClusterFile:
    def test_round_trip(self, tmp_path):
        clusters = [Cluster([1, 2, 5]), Cluster([3])]
        write_clusters(clusters, tmp_path / "c.txt")
        assert (tmp_path / "c.txt").read_text() == "cluster 0: 1 2 5\ncluster 1: 3\n"
        back = read_clusters(tmp_path / "c.txt")
        assert [c.members for c in back] == [[1, 2, 5], [3]] and back[1].isolated

    def test_borrowed_recomputed(self, tmp_path):
        g = graph_from([[1, 0.5, 0], [0.5, 1, 0], [0, 0, 1]])
        write_clusters([Cluster([1]), Cluster([2, 3])], tmp_path / "c.txt")
        back = read_clusters(tmp_path / "c.txt", g)
        assert back[0].borrowed == [2] and back[1].borrowed == [1]

    @pytest.mark.parametrize("text", ["cluster 0 1 2\n", "cluster 0: a b\n", "cluster 0:\n", "group 0: 1\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "c.txt").write_text(text)
        with pytest.raises(ParseError):
            read_clusters(tmp_path / "c.txt")
