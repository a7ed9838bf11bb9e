import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eikonal.fields import (RAW_INIT, Box, EAField, GridField, IorField, softplus,
                            sphere_row)
from eikonal.imageio import PSNR_INF
from eikonal.recon import (FitConfig, FitError, FitLog, OptimState, _box_hits, adam_step,
                           background_pyramid, baseline_trivial, compare_images,
                           dataset_rays, evaluate, fit_background, fit_interior, fit_ior,
                           load_checkpoint, loss_l1, read_report, save_checkpoint,
                           write_report)
from eikonal.scene import build_scene, default_spec, make_dataset
from eikonal.transport import Model


def tiny_spec(name="blob-lens", count=4, res=12):
    spec = default_spec(name)
    spec.cameras.count = count
    spec.cameras.resolution = [res, res]
    return spec


def tiny_config(**kw):
    base = dict(batch_rays=64, iters_ior=6, iters_background=5, iters_interior=5,
                doubling_every=2, levels=3, ior_dims=8, background_dims=8,
                interior_dims=6, bake_dims=24, steps_outside=48, steps_inside=32,
                interior_steps_outside=48)
    base.update(kw)
    return FitConfig(**base)


# ------------------------------------------------------------- loss, adam

def test_loss_examples(rng):
    a = rng.uniform(size=(10, 3))
    assert loss_l1(a, a)[0] == 0.0
    assert loss_l1(a + 0.5, a)[0] == pytest.approx(0.5)
    b = rng.uniform(size=(10, 3))
    v, g = loss_l1(a, b)
    assert v == pytest.approx(np.abs(a - b).sum() / a.size)
    np.testing.assert_array_equal(g, np.sign(a - b) / a.size)
    with pytest.raises(ValueError):
        loss_l1(a, b[:5])


def test_adam_zero_grad():
    p = np.ones(4)
    st_ = OptimState.like(p, 0.1)
    st_.m[:] = 1.0
    st_.v[:] = 1.0
    adam_step(p, np.zeros(4), st_)
    assert st_.m[0] == pytest.approx(0.9) and st_.v[0] == pytest.approx(0.999)
    # zero raw gradient with nonzero history still moves; a fresh state does not
    q = np.ones(4)
    adam_step(q, np.zeros(4), OptimState.like(q, 0.1))
    assert np.all(q == 1.0)


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_adam_constant_gradient_step_size(g):
    p = np.zeros(1)
    st_ = OptimState.like(p, 0.01)
    for _ in range(200):
        before = p.copy()
        adam_step(p, np.array([g]), st_)
    assert abs(p[0] - before[0]) == pytest.approx(0.01, rel=1e-3)
    assert np.sign(before[0] - p[0]) == np.sign(g)


def test_adam_rejects_nonfinite():
    p = np.ones(3)
    st_ = OptimState.like(p)
    assert not adam_step(p, np.array([1.0, np.nan, 0.0]), st_)
    assert st_.t == 0 and np.all(p == 1.0)


def test_adam_deterministic(rng):
    g = rng.normal(size=(50, 5))

    def run():
        p = np.zeros(5)
        s = OptimState.like(p, 0.05)
        for row in g:
            adam_step(p, row, s)
        return p

    assert run().tobytes() == run().tobytes()


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(batch_rays=0)
    with pytest.raises(ValueError):
        FitConfig(lr_ior=0.0)
    with pytest.raises(ValueError):
        FitConfig(progression="sometimes")
    with pytest.raises(ValueError):
        FitConfig(lr_level_decay=0.0)
    assert FitConfig().to_json()["batch_rays"] == 1024


# --------------------------------------------------------------- stages

@pytest.fixture(scope="module")
def blob_data():
    sc = build_scene(tiny_spec())
    return sc, make_dataset(sc, seed=0, with_masks=False)


@pytest.fixture(scope="module")
def null_data():
    sc = build_scene(tiny_spec("no-refraction"))
    return sc, make_dataset(sc, seed=0, with_masks=False)


def test_batch_rays_all_hit_box(blob_data):
    sc, ds = blob_data
    o, d, _ = dataset_rays(ds.train_views())
    hits = _box_hits(o, d, sc.box, 10.0)
    assert 0 < hits.sum() < len(o)
    from eikonal.transport import intersect_box
    for i in np.nonzero(hits)[0][:50]:
        assert intersect_box(o[i], d[i], sc.box) is not None


def test_fit_ior_runs_and_logs(blob_data):
    sc, ds = blob_data
    cfg = tiny_config()
    bounds = Box(sc.spec.bounds_min, sc.spec.bounds_max)
    pyr = background_pyramid(sc.exterior, sc.box, bounds, cfg)
    assert len(pyr) == 3
    ior, flog = fit_ior(ds, pyr, sc.box, cfg)
    assert len(flog.rows) == cfg.iters_ior
    levels = [r[2] for r in flog.rows]
    assert levels == sorted(levels) and levels[-1] == 2
    assert ior.raw.dims == (8, 8, 8)
    assert np.all(np.isfinite(ior.raw.values))
    # same seed, same result
    ior2, _ = fit_ior(ds, pyr, sc.box, cfg)
    assert ior.raw.values.tobytes() == ior2.raw.values.tobytes()


def test_fit_ior_no_hits(blob_data):
    sc, ds = blob_data
    cfg = tiny_config()
    far_box = Box([20, 20, 20], [21, 21, 21])
    pyr = background_pyramid(sc.exterior, sc.box, Box(sc.spec.bounds_min, sc.spec.bounds_max),
                             cfg)
    with pytest.raises(FitError):
        fit_ior(ds, pyr, far_box, cfg)


def test_fit_ior_null_control_small(null_data):
    sc, ds = null_data
    cfg = tiny_config(iters_ior=20)
    pyr = background_pyramid(sc.exterior, sc.box, Box(sc.spec.bounds_min, sc.spec.bounds_max),
                             cfg)
    ior, _ = fit_ior(ds, pyr, sc.box, cfg)
    n = softplus(ior.raw.values) + 1.0
    assert n.max() - 1.0 < 1e-3


def test_fit_background_box_is_zero(null_data):
    sc, ds = null_data
    bounds = Box(sc.spec.bounds_min, sc.spec.bounds_max)
    q, s, flog = fit_background(ds, sc.box, bounds, (10, 10, 8), tiny_config())
    inside = sc.box.contains(q.node_positions())
    assert inside.any()
    assert not np.any(q.values[inside]) and not np.any(s.values[inside])
    assert len(flog.rows) == 5


def test_fit_background_reduces_loss(null_data):
    sc, ds = null_data
    bounds = Box(sc.spec.bounds_min, sc.spec.bounds_max)
    _, _, flog = fit_background(ds, None, bounds, (16, 16, 8),
                                tiny_config(iters_background=60, batch_rays=256))
    first = np.mean([r[1] for r in flog.rows[:5]])
    last = np.mean([r[1] for r in flog.rows[-5:]])
    assert last < first


def test_fit_interior_freezes_exterior(blob_data):
    sc, ds = blob_data
    ext_before = sc.exterior.kernel_tuple()[0].copy() if sc.exterior.has_grid else None
    q, s, flog = fit_interior(ds, sc.ior, sc.exterior, sc.box, tiny_config())
    assert q.dims == (6, 6, 6)
    assert np.allclose(q.origin, sc.box.lo)
    if ext_before is not None:
        assert ext_before.tobytes() == sc.exterior.kernel_tuple()[0].tobytes()
    assert len(flog.rows) == 5


def test_interior_null_control():
    sc = build_scene(tiny_spec("blob-lens"))
    ds = make_dataset(sc, seed=0, with_masks=False)
    q, _, _ = fit_interior(ds, sc.ior, sc.exterior, sc.box,
                           tiny_config(iters_interior=30, batch_rays=128))
    assert q.values.mean() < 1e-3


# ------------------------------------------------------------ baseline

def _ray_bundle(n=12):
    g = np.linspace(-0.3, 0.3, n)
    X, Y = np.meshgrid(g, g)
    o = np.stack([X.ravel(), Y.ravel(), np.full(X.size, 3.0)], axis=1)
    d = np.tile([0.0, 0.0, -1.0], (len(o), 1))
    return o, d


def test_baseline_no_absorption():
    box = Box([-0.5] * 3, [0.5] * 3)
    P = GridField.zeros(box.lo, box.size, (8, 8, 8))
    ior = baseline_trivial(P, box, 1.5, _ray_bundle(4), dims=(8, 8, 8))
    assert np.all(ior.raw.values == RAW_INIT)


def test_baseline_sphere():
    box = Box([-0.5] * 3, [0.5] * 3)
    ea = EAField(prims=sphere_row([0, 0, 0], 0.3, 50.0, [1, 1, 1])[None])
    P = GridField.from_function(lambda p: ea.eval(p)[1], box.lo, box.size, (48, 48, 48),
                                dtype=np.float64)
    o, d = _ray_bundle(24)
    ior = baseline_trivial(P, box, 1.5, (o, d), dims=(16, 16, 16))
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, (4000, 3))
    r = np.linalg.norm(pts, axis=1)
    n = ior.eval(pts)
    assert abs(np.mean(n[r < 0.2]) - 1.5) < 0.05
    outside = (r > 0.42) & (np.abs(pts[:, 0]) < 0.3) & (np.abs(pts[:, 1]) < 0.3)
    assert abs(np.mean(n[outside]) - 1.0) < 0.05


def test_baseline_zero_threshold_front_at_entry():
    from eikonal.recon import _surface_points
    box = Box([-0.5] * 3, [0.5] * 3)
    P = GridField(box.lo, box.size, np.full((4, 4, 4, 1), 1e-3))
    s = _surface_points(P, np.array([0.0, 0.0, 3.0]), np.array([0.0, 0.0, -1.0]), box, 0.0)
    assert s is not None
    t0, tf, _, _ = s
    assert tf - t0 < 1.0 / 64


# ----------------------------------------------------------- evaluation

def test_evaluate_self_and_offset(blob_data, tmp_path):
    sc, ds = blob_data
    rep, renders = evaluate(sc.model(), ds.views[:2], sc.trace_config(steps_outside=128))
    assert all(r["psnr_db"] == PSNR_INF and r["ssim"] == pytest.approx(1.0)
               for r in rep["views"])
    a = np.full((16, 16, 3), 0.3, np.float32)
    rep2 = compare_images([a], [a + np.float32(0.1)])
    assert rep2["mean_psnr_db"] == pytest.approx(20.0, abs=1e-4)
    write_report(tmp_path / "r.json", rep2)
    assert read_report(tmp_path / "r.json") == json.loads(json.dumps(rep2))
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError):
        read_report(tmp_path / "bad.json")


def test_checkpoint_roundtrip(tmp_path):
    g = GridField.zeros([0, 0, 0], [1, 1, 1], (3, 4, 5))
    box = Box([0, 0, 0], [1, 1, 1])
    save_checkpoint(tmp_path, {"ior": g}, box, "ior", {"a": 1})
    grids, doc = load_checkpoint(tmp_path)
    assert grids["ior"].values.tobytes() == g.values.tobytes()
    assert doc["stage"] == "ior" and Box.from_json(doc["box"]).diag == box.diag
    (tmp_path / "ior.eikgrid").unlink()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)


def test_fitlog_csv(tmp_path):
    fl = FitLog(rows=[(0, 0.5, 0), (1, 0.25, 1)])
    fl.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines == ["iteration,loss,level", "0,0.5,0", "1,0.25,1"]
