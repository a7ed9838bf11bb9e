import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eikonal.fields import (IDENTITY_KERNEL, Box, EAField, GaussianBlob, GridField, IorField,
                            Luneburg, MlpIorField, MlpParams, SmoothingKernel,
                            bake_masked_grid, bandwidth_schedule, decode_grid, encode_grid,
                            gaussian_smooth, ior_eval, ior_grad, mlp_field_eval,
                            sample_gradient, sample_trilinear, softplus, softplus_inv,
                            vjp_gradient, vjp_sample)


def random_grid(rng, dims=(4, 4, 4), channels=1, origin=(0.0, 0.0, 0.0), extent=(1.0, 1.0, 1.0)):
    nx, ny, nz = dims
    return GridField(origin, extent, rng.normal(size=(nz, ny, nx, channels)))


def away_from_faces(g: GridField, rng, margin=0.1):
    """Random point whose fractional cell coordinates lie in [margin, 1 - margin]."""
    nx, ny, nz = g.dims
    idx = np.array([rng.integers(0, n - 1) for n in (nx, ny, nz)])
    frac = rng.uniform(margin, 1 - margin, 3)
    return g.origin + (idx + frac) * g.cell


def trilinear_by_hand(g: GridField, p):
    u = (np.asarray(p) - g.origin) * g.scale
    i = np.minimum(np.floor(u).astype(int), np.array(g.dims) - 2)
    f = u - i
    out = np.zeros(g.channels)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                out += w * g.values[i[2] + dz, i[1] + dy, i[0] + dx]
    return out


# ------------------------------------------------------------- trilinear

def test_constant_field_samples_constant():
    g = GridField((0, 0, 0), (1, 1, 1), np.full((3, 3, 3, 1), 5.0))
    for p in ([0.3, 0.7, 0.1], [-4.0, 2.0, 9.0]):
        assert sample_trilinear(g, p)[0] == pytest.approx(5.0)
        assert np.all(sample_gradient(g, p) == 0.0)


def test_two_node_x_ramp_center():
    vals = np.zeros((2, 2, 2, 1))
    vals[:, :, 1, 0] = 1.0
    g = GridField((0, 0, 0), (1, 1, 1), vals)
    assert sample_trilinear(g, [0.5, 0.5, 0.5])[0] == pytest.approx(0.5)


def test_random_grid_matches_hand_blend(rng):
    g = random_grid(rng, channels=3)
    for _ in range(20):
        p = rng.uniform(0, 1, 3)
        np.testing.assert_allclose(sample_trilinear(g, p), trilinear_by_hand(g, p), rtol=1e-12)


def test_clamp_to_edge_outside_domain(rng):
    g = random_grid(rng)
    inside = sample_trilinear(g, [1.0, 0.4, 0.2])
    outside = sample_trilinear(g, [3.0, 0.4, 0.2])
    assert inside[0] == outside[0]
    assert sample_gradient(g, [3.0, 0.4, 0.2])[0, 0] == 0.0


def test_affine_field_reproduced(rng):
    g = GridField.from_function(lambda p: 2 * p[..., 0] + 3 * p[..., 1] - p[..., 2],
                                (-1, -1, -1), (2, 2, 2), (5, 6, 7), dtype=np.float64)
    for _ in range(20):
        p = rng.uniform(-0.99, 0.99, 3)
        assert sample_trilinear(g, p)[0] == pytest.approx(2 * p[0] + 3 * p[1] - p[2], abs=1e-12)
        np.testing.assert_allclose(sample_gradient(g, p)[0], [2, 3, -1], atol=1e-12)


def test_gradient_matches_finite_differences(rng):
    g = random_grid(rng, dims=(5, 5, 5))
    for _ in range(20):
        p = away_from_faces(g, rng)
        eps = 1e-4 * g.cell[0]
        fd = [(sample_trilinear(g, p + eps * e)[0] - sample_trilinear(g, p - eps * e)[0])
              / (2 * eps) for e in np.eye(3)]
        np.testing.assert_allclose(sample_gradient(g, p)[0], fd, rtol=1e-3, atol=1e-9)


# ------------------------------------------------------------------ VJPs

def test_vjp_zero_upstream(rng):
    g = random_grid(rng)
    assert not np.any(vjp_sample(g, [0.3, 0.3, 0.3], [0.0]))
    assert not np.any(vjp_gradient(g, [0.3, 0.3, 0.3], [0.0, 0.0, 0.0]))


def test_vjp_at_node_is_indicator():
    g = GridField.zeros((0, 0, 0), (1, 1, 1), (4, 4, 4), dtype=np.float64)
    p = g.origin + np.array([1, 2, 1]) * g.cell
    out = vjp_sample(g, p, [1.0])
    assert out[1, 2, 1, 0] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)


def _fd_wrt_values(g, fn, eps=1e-6):
    out = np.zeros(g.values.shape)
    for idx in np.ndindex(g.values.shape):
        old = g.values[idx]
        g.values[idx] = old + eps
        fp = fn(g)
        g.values[idx] = old - eps
        fm = fn(g)
        g.values[idx] = old
        out[idx] = (fp - fm) / (2 * eps)
    return out


def test_vjp_sample_matches_fd(rng):
    g = random_grid(rng, dims=(3, 3, 3), channels=3)
    p = away_from_faces(g, rng)
    up = rng.normal(size=3)
    fd = _fd_wrt_values(g, lambda gg: float(up @ sample_trilinear(gg, p)))
    out = vjp_sample(g, p, up)
    np.testing.assert_allclose(out, fd, rtol=1e-5, atol=1e-8)
    assert np.count_nonzero(out) <= 8 * 3


def test_vjp_gradient_matches_fd(rng):
    g = random_grid(rng, dims=(3, 3, 3))
    p = away_from_faces(g, rng)
    up = rng.normal(size=3)
    fd = _fd_wrt_values(g, lambda gg: float(np.sum(up * sample_gradient(gg, p)[0])))
    np.testing.assert_allclose(vjp_gradient(g, p, up), fd, rtol=1e-5, atol=1e-8)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_vjp_linear_in_upstream(a, b, seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng)
    p = rng.uniform(0, 1, 3)
    u, w = rng.normal(size=3), rng.normal(size=3)
    lhs = vjp_gradient(g, p, a * u + b * w)
    rhs = a * vjp_gradient(g, p, u) + b * vjp_gradient(g, p, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------- IoR fields

BOX = Box([-0.5] * 3, [0.5] * 3)


def test_softplus_tail_ior():
    ior = IorField.constant(BOX, (4, 4, 4), raw_value=-20.0)
    p = [0.1, -0.2, 0.3]
    assert ior_eval(ior, p) == pytest.approx(1 + 2.06e-9, rel=1e-3, abs=0)
    assert np.all(np.abs(ior_grad(ior, p)) < 1e-15)


def test_constant_raw_gives_constant_n():
    ior = IorField.constant(BOX, (4, 4, 4), raw_value=float(softplus_inv(0.5)))
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, (10, 3))
    np.testing.assert_allclose(ior.eval(pts), 1.5, atol=1e-12)
    assert np.all(ior.grad(pts) == 0.0)


def test_ior_grad_matches_fd(rng):
    raw = random_grid(rng, dims=(6, 6, 6), origin=BOX.lo, extent=BOX.size)
    ior = IorField(raw)
    for _ in range(20):
        p = away_from_faces(raw, rng)
        eps = 1e-4 * raw.cell[0]
        fd = [(ior.eval(p + eps * e) - ior.eval(p - eps * e)) / (2 * eps) for e in np.eye(3)]
        np.testing.assert_allclose(ior.grad(p), fd, rtol=1e-3, atol=1e-10)


def test_ior_param_vjp_matches_fd(rng):
    raw = random_grid(rng, dims=(3, 3, 3), origin=BOX.lo, extent=BOX.size)
    ior = IorField(raw)
    p = away_from_faces(raw, rng)
    a_n, a_g = 0.7, np.array([0.2, -0.4, 0.9])

    def f(g):
        i = IorField(g)
        return float(a_n * i.eval(p) + a_g @ i.grad(p))

    np.testing.assert_allclose(ior.vjp_params(p, a_n, a_g), _fd_wrt_values(raw, f),
                               rtol=1e-5, atol=1e-8)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_ior_always_above_one(lo, hi):
    vals = np.linspace(lo, hi, 8).reshape(2, 2, 2, 1)
    ior = IorField(GridField(BOX.lo, BOX.size, vals))
    pts = np.random.default_rng(0).uniform(-0.7, 0.7, (16, 3))
    n = ior.eval(pts)
    # strictly above one in exact arithmetic; deep softplus tails round to 1.0
    assert np.all(n >= 1.0) and np.all(np.isfinite(n))


def test_softplus_inverse_roundtrip():
    y = np.array([1e-6, 0.1, 0.5, 2.0, 40.0])
    np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-10)


def test_luneburg_values():
    lens = Luneburg([0, 0, 0], 2.0)
    assert lens.eval([0, 0, 0]) == pytest.approx(math.sqrt(2))
    assert lens.eval([2.0, 0, 0]) == pytest.approx(1.0)
    assert lens.eval([3.0, 0, 0]) == pytest.approx(1.0)
    p = np.array([0.3, -0.5, 0.9])
    r = np.linalg.norm(p)
    expect = -p / (4.0 * math.sqrt(2 - (r / 2) ** 2))
    np.testing.assert_allclose(lens.grad(p), expect, rtol=1e-12)


def test_blob_values():
    assert np.all(GaussianBlob([0, 0, 0], 0.0, 0.2).eval(np.eye(3) * 0.1) == 1.0)
    blob = GaussianBlob([0.1, 0, 0], 0.3, 0.2)
    p = np.array([0.2, 0.1, -0.1])
    d = p - blob.center
    n = 1 + 0.3 * math.exp(-d @ d / (2 * 0.04))
    assert blob.eval(p) == pytest.approx(n)
    np.testing.assert_allclose(blob.grad(p), -(n - 1) * d / 0.04, rtol=1e-12)


def test_analytic_hessians_match_fd():
    for f in (GaussianBlob([0, 0, 0], 0.3, 0.2), Luneburg([0, 0, 0], 1.0)):
        p = np.array([0.11, -0.07, 0.05])
        eps = 1e-5
        fd = np.stack([(f.grad(p + eps * e) - f.grad(p - eps * e)) / (2 * eps) for e in np.eye(3)])
        np.testing.assert_allclose(f.hess(p), fd, rtol=1e-6, atol=1e-8)


# -------------------------------------------------------------------- MLP

def test_zero_mlp_closed_form():
    params = MlpParams.init(seed=0).zeroed()
    # every hidden unit is softplus_beta(0) = ln2 / beta, output layer is zero
    out = mlp_field_eval(params, np.array([[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]]))
    assert np.all(out == 0.0)
    assert MlpIorField(params).eval([0.0, 0.0, 0.0]) == pytest.approx(1 + math.log(2))


def test_mlp_deterministic_and_smooth():
    params = MlpParams.init(seed=3)
    p = np.array([0.12, -0.3, 0.25])
    assert mlp_field_eval(params, p) == mlp_field_eval(params, p.copy())
    g3 = MlpIorField(params, fd_step=1e-3).grad(p)
    g4 = MlpIorField(params, fd_step=1e-4).grad(p)
    np.testing.assert_allclose(g3, g4, rtol=1e-2, atol=1e-6)


# -------------------------------------------------------------- smoothing

def test_smoothing_preserves_constant():
    g = GridField((0, 0, 0), (1, 1, 1), np.full((6, 6, 6, 1), 0.7))
    np.testing.assert_allclose(gaussian_smooth(g, SmoothingKernel(0.08)).values, 0.7, rtol=1e-6)


def test_impulse_response():
    vals = np.zeros((9, 9, 9, 1))
    vals[4, 4, 4] = 1.0
    out = gaussian_smooth(GridField((0, 0, 0), (1, 1, 1), vals), SmoothingKernel(0.25)).values
    assert out.sum() == pytest.approx(1.0, abs=1e-6)
    assert out[4, 4, 4] == out.max()
    np.testing.assert_allclose(out, out[::-1, ::-1, ::-1], atol=1e-7)
    np.testing.assert_allclose(out, np.transpose(out, (2, 1, 0, 3)), atol=1e-7)


def test_identity_kernel():
    g = random_grid(np.random.default_rng(0), dims=(5, 5, 5))
    assert np.array_equal(gaussian_smooth(g, IDENTITY_KERNEL).values, g.values)


def test_bandwidth_to_sigma():
    # Gaussian whose frequency response halves at the bandwidth
    k = SmoothingKernel(0.08)
    f = 0.08
    assert math.exp(-2 * (math.pi * f * k.sigma_samples) ** 2) == pytest.approx(0.5)
    sched = bandwidth_schedule(0.08, 5)
    assert [s.bandwidth for s in sched] == pytest.approx([0.08, 0.16, 0.32, 0.64, 1.28])


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_smoothing_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    A = random_grid(rng, dims=(6, 5, 4))
    B = random_grid(rng, dims=(6, 5, 4))
    k = SmoothingKernel(0.16)
    lhs = gaussian_smooth(A.with_values(a * A.values + b * B.values), k).values
    rhs = a * gaussian_smooth(A, k).values + b * gaussian_smooth(B, k).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_smoothing_preserves_mean_interior_support():
    vals = np.zeros((24, 24, 24, 1))
    vals[8:16, 9:14, 10:13] = np.random.default_rng(0).uniform(size=(8, 5, 3, 1))
    g = GridField((0, 0, 0), (1, 1, 1), vals)
    assert gaussian_smooth(g, SmoothingKernel(0.16)).values.mean() == pytest.approx(
        vals.mean(), abs=1e-6)


# ------------------------------------------------------------------- bake

def test_bake_masks_inside_box():
    box = Box([-0.25] * 3, [0.25] * 3)
    ea = EAField.constant(q=(0.5, 0.5, 0.5), sigma=2.0).masked(box)
    levels = bake_masked_grid(ea, box, (-1, -1, -1), (2, 2, 2), (9, 9, 9),
                              [IDENTITY_KERNEL, SmoothingKernel(0.16)])
    Q0, P0 = levels[0]
    inside = box.contains(Q0.node_positions())
    assert np.all(Q0.values[inside] == 0) and np.all(P0.values[inside] == 0)
    np.testing.assert_allclose(Q0.values[~inside], 0.5)
    np.testing.assert_allclose(P0.values[~inside], 2.0)
    Q1, _ = levels[1]
    c = Q1.values[4, 4, 4, 0]
    assert 0.0 < c < 0.5  # blurred transition


def test_bake_zero_absorption():
    box = Box([-0.25] * 3, [0.25] * 3)
    ea = EAField.constant(q=(0.2, 0.2, 0.2), sigma=0.0)
    for _, P in bake_masked_grid(ea, box, (-1, -1, -1), (2, 2, 2), (6, 6, 6),
                                 bandwidth_schedule(0.08, 3)):
        assert not np.any(P.values)


def test_bake_rejects_disjoint_box():
    with pytest.raises(ValueError):
        bake_masked_grid(EAField.constant(), Box([5, 5, 5], [6, 6, 6]), (-1, -1, -1),
                         (2, 2, 2), (4, 4, 4))


# -------------------------------------------------------------- EIKGRID1

@given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.sampled_from([1, 3, 4]),
       st.integers(0, 2**31 - 1))
def test_grid_roundtrip_bitwise(nx, ny, nz, c, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(nz, ny, nx, c)).astype(np.float32)
    g = GridField(rng.normal(size=3), rng.uniform(0.1, 5, 3), vals)
    back = decode_grid(encode_grid(g))
    assert back.values.tobytes() == vals.tobytes()
    assert back.origin.tobytes() == g.origin.tobytes()
    assert back.extent.tobytes() == g.extent.tobytes()


def test_grid_decode_errors():
    g = GridField.zeros((0, 0, 0), (1, 1, 1), (2, 2, 2))
    buf = encode_grid(g)
    with pytest.raises(ValueError, match="EIKGRID1"):
        decode_grid(b"NOTAGRID" + buf[8:])
    with pytest.raises(ValueError, match="payload"):
        decode_grid(buf[:-4], "x.eikgrid")


def test_box_validation():
    with pytest.raises(ValueError):
        Box([0, 0, 0], [1, 0, 1])
    b = Box([0, 0, 0], [1, 2, 2])
    assert b.diag == pytest.approx(3.0)
    back = Box.from_json(b.to_json())
    assert np.array_equal(back.lo, b.lo) and np.array_equal(back.hi, b.hi)
