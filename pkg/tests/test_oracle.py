import numpy as np
import pytest

from conftest import nadir_camera
from sir.geometry import Camera, Extrinsics, Intrinsics, normalized_rays, pixel_centers, project, unproject
from sir.model_io import read_depth, read_image, read_sparse_model
from sir.oracle import (
    NADIR,
    SceneSpec,
    footprint_size,
    generate_scene,
    make_aerial_cameras,
    render_view,
    write_fixture,
)


def flat_scene():
    return generate_scene(SceneSpec(height_amplitude=0.0))


def tilted(angle_deg):
    a = np.radians(angle_deg)
    tilt = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    return tilt @ NADIR


class TestScene:
    def test_zero_amplitude_is_flat(self):
        xs = np.random.default_rng(0).uniform(-50, 50, size=(2, 1000))
        assert np.all(flat_scene().height(*xs) == 0.0)

    def test_same_seed_is_bit_identical(self):
        xs = np.random.default_rng(0).uniform(-50, 50, size=(2, 1000))
        a = generate_scene(SceneSpec(seed=7)).height(*xs)
        b = generate_scene(SceneSpec(seed=7)).height(*xs)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        xs = np.random.default_rng(0).uniform(-50, 50, size=(2, 10_000))
        a = generate_scene(SceneSpec(seed=1)).height(*xs)
        b = generate_scene(SceneSpec(seed=2)).height(*xs)
        assert np.mean(a != b) > 0.5

    def test_albedo_range(self):
        xs = np.random.default_rng(0).uniform(-50, 50, size=(2, 1000))
        a = generate_scene(SceneSpec()).albedo(*xs)
        assert a.min() >= 0.0 and a.max() <= 1.0 and a.std() > 0.05

    @pytest.mark.parametrize("kw", [{"extent": (0, 0, 0, 1)}, {"height_amplitude": -1}, {"texture_octaves": 0}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)

    def test_spec_json_round_trip(self):
        spec = SceneSpec(seed=3, extent=(-1, -2, 3, 4))
        assert SceneSpec.from_json(spec.to_json()) == spec


class TestRender:
    def test_flat_fronto_parallel(self):
        cam = nadir_camera([3.0, -2.0, 17.0], 40, 30, 35.0)
        gt = render_view(flat_scene(), cam)
        assert gt.valid.all()
        assert np.max(np.abs(gt.depth - 17.0)) < 1e-6

    @pytest.mark.parametrize("angle", [10.0, 25.0])
    def test_tilted_matches_ray_plane(self, angle):
        intr = Intrinsics(40, 40, 20, 15)
        cam = Camera(intr, Extrinsics.from_center(tilted(angle), [0.0, 0.0, 12.0]), 40, 30)
        gt = render_view(flat_scene(), cam)
        rays = normalized_rays(cam, pixel_centers(40, 30))
        dirs = np.concatenate([rays, np.ones(rays.shape[:2] + (1,))], axis=-1) @ cam.extrinsics.rotation
        # z-component of the world ray per unit camera depth; plane z = 0
        expected = 12.0 / -dirs[..., 2]
        assert gt.valid.all()
        assert np.max(np.abs(gt.depth - expected)) < 1e-6

    def test_looking_away_misses(self):
        cam = Camera(Intrinsics(40, 40, 20, 15), Extrinsics.from_center(np.eye(3), [0, 0, 10.0]), 40, 30)
        gt = render_view(flat_scene(), cam)
        assert not gt.valid.any() and np.all(gt.image == 0)

    def test_render_is_deterministic(self):
        scene = generate_scene(SceneSpec())
        cam = nadir_camera([1.0, 2.0, 40.0], 48, 36, 40.0)
        a, b = render_view(scene, cam), render_view(scene, cam)
        assert a.depth.tobytes() == b.depth.tobytes() and a.image.tobytes() == b.image.tobytes()

    def test_gt_lies_on_surface(self):
        scene = generate_scene(SceneSpec())
        intr = Intrinsics(50, 50, 25, 20, k1=0.02)
        cam = Camera(intr, Extrinsics.from_center(tilted(15.0), [-5.0, 4.0, 35.0]), 50, 40)
        gt = render_view(scene, cam)
        pts = unproject(cam, pixel_centers(50, 40)[gt.valid], gt.depth[gt.valid])
        assert np.max(np.abs(pts[:, 2] - scene.height(pts[:, 0], pts[:, 1]))) < 1e-5

    def test_cross_view_consistency(self):
        scene = generate_scene(SceneSpec())
        cams = make_aerial_cameras(scene, 1, 2, 40.0, 0.6, 64, 48)
        first = render_view(scene, cams[0])
        rows, cols = np.nonzero(first.valid)
        pick = np.random.default_rng(3).choice(len(rows), 20, replace=False)
        centers = np.stack([cols[pick] + 0.5, rows[pick] + 0.5], axis=-1)
        pts = unproject(cams[0], centers, first.depth[rows[pick], cols[pick]])
        checked = 0
        for p in pts:
            uv = project(cams[1], p)
            if not cams[1].in_bounds(uv[None])[0]:
                continue
            # shift the principal point so the point lands on a pixel centre
            shift = np.floor(uv) + 0.5 - uv
            i = cams[1].intrinsics
            cam = cams[1].with_principal_point(i.cx + shift[0], i.cy + shift[1])
            col, row = np.floor(uv).astype(int)
            d = render_view(scene, cam).depth[row, col]
            assert np.linalg.norm(unproject(cam, [col + 0.5, row + 0.5], d) - p) < 1e-5
            checked += 1
        assert checked >= 5


class TestCameras:
    def test_single_camera_is_centered(self):
        [cam] = make_aerial_cameras(flat_scene(), 1, 1, 50.0, 0.7)
        assert np.allclose(cam.extrinsics.center, [0, 0, 50.0])
        assert np.allclose(cam.extrinsics.rotation, NADIR)

    def test_half_overlap_spacing(self):
        a, b = make_aerial_cameras(flat_scene(), 1, 2, 50.0, 0.5)
        fw, _ = footprint_size(a.intrinsics, a.width, a.height, 50.0)
        assert b.extrinsics.center[0] - a.extrinsics.center[0] == pytest.approx(0.5 * fw)

    def test_zero_overlap_tiles_edge_to_edge(self):
        cams = make_aerial_cameras(flat_scene(), 2, 3, 50.0, 0.0, 64, 48)
        fw, fh = footprint_size(cams[0].intrinsics, 64, 48, 50.0)
        xs = sorted({round(c.extrinsics.center[0], 9) for c in cams})
        ys = sorted({round(c.extrinsics.center[1], 9) for c in cams})
        assert np.allclose(np.diff(xs), fw) and np.allclose(np.diff(ys), fh)
        # the union of footprints spans cols * fw exactly
        assert xs[-1] - xs[0] + fw == pytest.approx(3 * fw)

    def test_nadir_looks_down(self):
        [cam] = make_aerial_cameras(flat_scene(), 1, 1, 30.0, 0.5, 64, 48)
        gt = render_view(flat_scene(), cam)
        assert np.allclose(gt.depth, 30.0, atol=1e-6)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            make_aerial_cameras(flat_scene(), 0, 1, 10.0, 0.5)
        with pytest.raises(ValueError):
            make_aerial_cameras(flat_scene(), 1, 1, 10.0, 1.0)


def test_fixture_files(tmp_path):
    scene = generate_scene(SceneSpec())
    cams = make_aerial_cameras(scene, 1, 2, 40.0, 0.6, 48, 36)
    model = write_fixture(tmp_path, scene, cams)
    back = read_sparse_model(tmp_path / "sparse")
    assert sorted(back.views) == [1, 2] and len(back.sparse_points) == len(model.sparse_points) > 0
    assert read_image(tmp_path / "images" / "view_000.ppm").shape == (36, 48, 3)
    assert read_depth(tmp_path / "gt" / "view_001.sird").depth.shape == (36, 48)
    assert SceneSpec.from_json((tmp_path / "scene.json").read_text()) == scene.spec
