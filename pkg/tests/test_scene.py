import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eikonal.fields import Box
from eikonal.scene import (Camera, ConfigError, Dataset, DatasetError, SceneSpec, build_scene,
                           box_from_points, default_spec, estimate_box, generate_rays,
                           load_dataset, make_dataset, save_dataset, split_views)
from eikonal.transport import Model, render_rays


def small_spec(name="blob-lens", count=4, res=16):
    spec = default_spec(name)
    spec.cameras.count = count
    spec.cameras.resolution = [res, res]
    return spec


# ---------------------------------------------------------------- cameras

def test_center_pixel_is_optical_axis():
    cam = Camera([1.0, 2.0, 5.0], [0.2, -0.1, 0.0], [0, 1, 0], 40, (5, 5))
    _, d = generate_rays(cam)
    axis = cam.look_at - cam.position
    np.testing.assert_allclose(d[2, 2], axis / np.linalg.norm(axis), atol=1e-15)


def test_corner_symmetry():
    cam = Camera([0, 0, 4], [0, 0, 0], [0, 1, 0], 50, (8, 8))
    _, d = generate_rays(cam)
    a, b = d[0, 0], d[-1, -1]
    assert a[2] == pytest.approx(b[2])
    np.testing.assert_allclose(a[:2], -b[:2], atol=1e-15)


def test_fov_90_top_center():
    cam = Camera([0, 0, 4], [0, 0, 0], [0, 1, 0], 90, (1000, 1000))
    _, d = generate_rays(cam)
    top = 0.5 * (d[0, 499] + d[0, 500])
    top /= np.linalg.norm(top)
    ang = math.degrees(math.acos(top @ np.array([0, 0, -1.0])))
    assert ang == pytest.approx(45.0, abs=0.1)


@given(st.floats(1, 170), st.integers(1, 12), st.integers(1, 12))
def test_rays_unit_length(fov, w, h):
    cam = Camera([0.3, -1, 3], [0, 0, 0], [0, 1, 0], fov, (w, h))
    o, d = generate_rays(cam)
    assert d.shape == (h, w, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
    assert np.all(o == cam.position)


def test_camera_errors():
    with pytest.raises(ConfigError):
        Camera([0, 0, 0], [0, 0, 0], [0, 1, 0], 30, (4, 4))
    with pytest.raises(ConfigError):
        Camera([0, 0, 1], [0, 0, 0], [0, 0, 1], 30, (4, 4))
    with pytest.raises(ConfigError):
        Camera([0, 0, 1], [0, 0, 0], [0, 1, 0], 180, (4, 4))
    with pytest.raises(ConfigError):
        Camera([0, 0, 1], [0, 0, 0], [0, 1, 0], 30, (0, 4))


# ----------------------------------------------------------------- scenes

def test_empty_scene_is_black():
    sc = build_scene(small_spec("empty", count=2))
    for cam in sc.cameras:
        from eikonal.scene import generate_rays as gr
        o, d = gr(cam)
        assert not np.any(render_rays(o, d, sc.model(), sc.trace_config())[:, 0:3])


def test_blob_lens_distorts_background():
    spec = default_spec()
    spec.cameras.count = 6
    sc = build_scene(spec)
    diffs = []
    for cam in sc.cameras:
        o, d = generate_rays(cam)
        a = render_rays(o, d, sc.model(), sc.trace_config())[:, 0:3]
        b = render_rays(o, d, Model(sc.exterior), sc.trace_config())[:, 0:3]
        diffs.append(np.abs(a - b).mean())
    assert np.mean(diffs) > 0.02


def test_scene_spec_errors():
    with pytest.raises(ConfigError):
        default_spec("nope")
    with pytest.raises(ConfigError):
        SceneSpec.from_json({"planes": [{"bogus": 1}]})
    spec = small_spec()
    spec.box_min = [0.5, 0.5, 0.5]
    with pytest.raises(ConfigError):
        build_scene(spec)
    spec = small_spec()
    spec.planes[0].point = [0.0, 0.0, 0.0]
    with pytest.raises(ConfigError):
        build_scene(spec)
    spec = small_spec()
    spec.ior = {"kind": "prism"}
    with pytest.raises(ConfigError):
        build_scene(spec)


def test_spec_json_roundtrip():
    spec = default_spec("blob-stick")
    assert SceneSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


# ------------------------------------------------------------ box estimate

def test_box_from_cube_lattice():
    g = np.linspace(0.0, 1.0, 51)
    pts = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
    b = box_from_points(pts)
    np.testing.assert_allclose(b.lo, -0.076, atol=1e-3)
    np.testing.assert_allclose(b.hi, 1.076, atol=1e-3)


def test_box_degenerate_cloud():
    with pytest.raises(ConfigError):
        box_from_points(np.tile([[0.3, 0.3, 0.3]], (100, 1)))
    with pytest.raises(ConfigError):
        box_from_points(np.zeros((0, 3)))


def test_box_robust_to_outliers(rng):
    pts = rng.uniform(0, 1, (20000, 3))
    clean = box_from_points(pts)
    pts[:200] = 100.0 + rng.uniform(0, 1, (200, 3))
    dirty = box_from_points(pts)
    np.testing.assert_allclose(dirty.lo, clean.lo, atol=0.03)
    np.testing.assert_allclose(dirty.hi, clean.hi, atol=0.03)


def test_estimate_box_from_masks_contains_lens():
    spec = small_spec(count=6, res=24)
    sc = build_scene(spec)
    ds = make_dataset(sc, seed=0, with_masks=True)
    b = estimate_box([v.mask for v in ds.views], [v.depth for v in ds.views],
                     [v.camera for v in ds.views])
    assert np.all(b.contains(np.array([sc.box.center])))
    assert np.all(b.size < 3.0)


# --------------------------------------------------------------- datasets

def test_split_24_views():
    s = split_views(24, seed=0)
    assert len(s["train"]) == 22 and len(s["test"]) == 2
    assert sorted(s["train"] + s["test"]) == list(range(24))
    assert split_views(24, seed=0) == s
    assert split_views(1, seed=0) == {"train": [0], "test": []}
    with pytest.raises(ConfigError):
        split_views(0, 0)


@given(st.integers(2, 60), st.integers(0, 1000))
def test_split_partition(count, seed):
    s = split_views(count, seed)
    assert not set(s["train"]) & set(s["test"])
    assert len(s["train"]) + len(s["test"]) == count
    assert 1 <= len(s["test"]) <= count - 1


def test_dataset_roundtrip(tmp_path):
    sc = build_scene(small_spec())
    ds = make_dataset(sc, seed=3, with_masks=True)
    save_dataset(tmp_path / "ds", ds)
    back = load_dataset(tmp_path / "ds")
    assert back.split == ds.split and back.seed == 3
    for a, b in zip(ds.views, back.views):
        assert a.image.tobytes() == b.image.tobytes()
        assert np.array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(np.isinf(a.depth), np.isinf(b.depth))
        fin = np.isfinite(a.depth)
        np.testing.assert_allclose(a.depth[fin], b.depth[fin], rtol=1e-6)
        np.testing.assert_array_equal(a.camera.position, b.camera.position)


def test_dataset_missing_image(tmp_path):
    sc = build_scene(small_spec(count=2))
    save_dataset(tmp_path, make_dataset(sc, with_masks=False))
    (tmp_path / "images" / "view_001.pfm").unlink()
    with pytest.raises(DatasetError, match="view_001.pfm"):
        load_dataset(tmp_path)


def test_dataset_bad_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "dataset.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_make_dataset_deterministic():
    sc = build_scene(small_spec(count=2))
    a = make_dataset(sc, with_masks=False)
    b = make_dataset(sc, with_masks=False)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.views, b.views))
    assert isinstance(a, Dataset)
