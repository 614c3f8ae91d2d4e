import json
import math

import numpy as np
import pytest

from surfchart.errors import CameraError, ConfigurationError, RenderError
from surfchart.metrics import discontinuity_histogram
from surfchart.synthcam import (FAMILIES, Camera, build_dataset, generate_shape, load_dataset,
                                render_view, sample_camera)
from surfchart.synthcam.dataset import dataset_checksum, quantize_nocs


def _camera(res=(24, 32)):
    return Camera([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 1, 0], math.radians(40), res)


def test_project_inverts_pixel_rays():
    cam = _camera()
    rays = cam.rays()
    pts = cam.position + 1.7 * rays
    rc, depth = cam.project(pts)
    rows, cols = np.mgrid[0:24, 0:32]
    np.testing.assert_allclose(rc[..., 0], rows + 0.5, atol=1e-9)
    np.testing.assert_allclose(rc[..., 1], cols + 0.5, atol=1e-9)
    assert np.all(depth > 0)


def test_points_behind_camera_project_to_nan():
    cam = _camera()
    rc, depth = cam.project(np.array([[0.5, 0.5, 3.0]]))
    assert depth[0] < 0 and np.all(np.isnan(rc))


def test_camera_rejects_degenerate_setups():
    with pytest.raises(CameraError):
        Camera([0, 0, 0], [0, 0, 0], [0, 1, 0], 0.5)
    with pytest.raises(CameraError):
        Camera([0, 0, 0], [0, 1, 0], [0, 1, 0], 0.5)
    with pytest.raises(CameraError):
        Camera([0, 0, 0], [0, 0, 1], [0, 1, 0], math.pi)


def test_camera_json_round_trip():
    cam = sample_camera(np.random.default_rng(0))
    again = Camera.from_dict(json.loads(cam.to_json()))
    np.testing.assert_array_equal(again.rays(), cam.rays())


@pytest.mark.parametrize("family", FAMILIES)
def test_shapes_are_deterministic_and_inside_container(family):
    a, b = generate_shape(family, 3), generate_shape(family, 3)
    assert a == b
    assert a != generate_shape(family, 4)
    lo, hi = a.bounds()
    assert np.all(np.asarray(lo) >= 0.05 - 1e-12) and np.all(np.asarray(hi) <= 0.95 + 1e-12)
    pts = a.sample_surface(0.02)
    assert len(pts) > 100
    assert pts.min() >= 0.05 - 1e-9 and pts.max() <= 0.95 + 1e-9


def _march_oracle(shape, origin, d, step=1e-4):
    t = np.arange(0.5, 4.0, step)
    inside = shape.contains(origin + t[:, None] * d)
    if not inside.any():
        return None
    k = np.flatnonzero(inside)
    return t[k[0]], t[k[-1]]


@pytest.mark.parametrize("family", FAMILIES)
def test_intersection_matches_dense_marching(family):
    shape = generate_shape(family, 11)
    rng = np.random.default_rng(0)
    cam = sample_camera(rng, (16, 16))
    dirs = cam.rays().reshape(-1, 3)
    t0, t1, hit = shape.intersect(cam.position, dirs)
    for i in rng.choice(len(dirs), 40, replace=False):
        ref = _march_oracle(shape, cam.position, dirs[i])
        assert hit[i] == (ref is not None)
        if ref is not None:
            assert abs(t0[i] - ref[0]) < 2e-3 and abs(t1[i] - ref[1]) < 2e-3


@pytest.mark.parametrize("family", FAMILIES)
def test_render_layers(family):
    shape = generate_shape(family, 5)
    cam = sample_camera(np.random.default_rng(1), (32, 32))
    view = render_view(shape, cam)
    assert view.mask.any()
    np.testing.assert_array_equal(view.mask, view.nocs_visible.valid)
    vis, hid = view.nocs_visible.points, view.nocs_hidden.points
    d_vis = np.linalg.norm(vis - cam.position, axis=1)
    d_hid = np.linalg.norm(hid - cam.position, axis=1)
    assert np.all(d_hid >= d_vis - 1e-12)
    assert np.all(view.rgb[~view.mask] == 1.0)
    assert view.rgb.min() >= 0 and view.rgb.max() <= 1


def test_render_inside_shape_raises():
    shape = generate_shape("superellipsoid", 0)
    cam = Camera([0.5, 0.5, 0.5], [0.5, 0.5, 0.0], [0, 1, 0], 0.5, (8, 8))
    with pytest.raises(RenderError):
        render_view(shape, cam)


def test_box_unions_show_depth_jumps():
    jumps = 0
    for seed in range(4):
        shape = generate_shape("box-union", seed)
        for k in range(3):
            cam = sample_camera(np.random.default_rng([seed, k]), (64, 64))
            jumps += discontinuity_histogram(render_view(shape, cam).nocs_visible).total
    assert jumps > 0


def test_synth_is_reproducible(tmp_path):
    build_dataset(2, 2, (16, 16), 3, tmp_path / "a")
    build_dataset(2, 2, (16, 16), 3, tmp_path / "b")
    build_dataset(2, 2, (16, 16), 4, tmp_path / "c")
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
    assert dataset_checksum(tmp_path / "a") != dataset_checksum(tmp_path / "c")


def test_dataset_round_trip_quantization(tmp_path):
    shape = generate_shape("swept-profile", 2)
    build_dataset(1, 2, (16, 16), 0, tmp_path, families=("swept-profile",))
    ds = load_dataset(tmp_path, verify=True)
    view = ds.shapes["shape_000"][0]
    fresh = render_view(ds.load_shape("shape_000"), view.camera)
    np.testing.assert_array_equal(view.mask, fresh.mask)
    err = np.abs(view.nocs_visible.coords - fresh.nocs_visible.coords).max()
    assert err <= 0.5 / 65535 + 1e-12
    assert ds.families == {"shape_000": "swept-profile"}
    assert shape.family == "swept-profile"


def test_quantize_nocs_rounds_to_16_bits():
    q = quantize_nocs(np.array([0.0, 1.0, 0.5]))
    assert q.dtype == np.uint16 and q.tolist() == [0, 65535, 32768]


def test_dataset_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        build_dataset(0, 1, (8, 8), 0, tmp_path)
    with pytest.raises(ConfigurationError):
        build_dataset(1, 1, (8, 8), 0, tmp_path, families=("teapot",))
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path / "missing")


def test_verify_detects_tampering(tmp_path):
    build_dataset(1, 1, (8, 8), 0, tmp_path)
    target = next(tmp_path.glob("shape_000/*_rgb.png"))
    target.write_bytes(target.read_bytes() + b"x")
    with pytest.raises(ConfigurationError, match="checksum"):
        load_dataset(tmp_path, verify=True)
