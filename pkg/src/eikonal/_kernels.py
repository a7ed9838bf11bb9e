"""Compiled per-ray kernels shared by fields, transport and recon.

Conventions used throughout:

* grid values are indexed ``vals[iz, iy, ix, c]``; node ``i`` along an axis sits
  at ``lo + i / sc`` with ``sc = (n - 1) / extent``;
* an IoR tuple is ``(kind, raw, lo, sc, prm)`` with kind 0 = softplus grid,
  1 = Luneburg, 2 = Gaussian blob;
* an EA tuple is ``(vals4, lo, sc, has_grid, prims, masked, box)`` where
  ``vals4[..., :3]`` is emission q and ``vals4[..., 3]`` absorption sigma;
* the ray state is ``z = (p, v, L, T)`` packed as 10 floats.

Segment records (one row per traversed segment) have the layout
``[type, s_a, s_b, nsteps, flag, z_a(10), z_b(10)]``.
"""
import math

import numpy as np
from numba import config, njit, prange

# TBB in this image is too old for numba; workqueue is always available.
config.THREADING_LAYER = "workqueue"

SEG_EA = 0
SEG_EIK = 1
REC_WIDTH = 25
SAMPLE_WIDTH = 6

PRIM_PLANE = 1
PRIM_CYLINDER = 2
PRIM_SPHERE = 3
PRIM_WIDTH = 24

TEX_CHECKER = 0
TEX_NOISE = 1
TEX_SOLID = 2


# ---------------------------------------------------------------- scalar math

@njit(cache=True)
def softplus(r):
    if r > 0.0:
        return r + math.log1p(math.exp(-r))
    return math.log1p(math.exp(r))


@njit(cache=True)
def sigmoid(r):
    if r >= 0.0:
        return 1.0 / (1.0 + math.exp(-r))
    e = math.exp(r)
    return e / (1.0 + e)


@njit(cache=True, inline='always')
def softplus_sigmoid(r):
    e = math.exp(-abs(r))
    if r > 0.0:
        return r + math.log1p(e), 1.0 / (1.0 + e)
    return math.log1p(e), e / (1.0 + e)


@njit(cache=True, inline='always')
def _axis(n, lo, sc, x):
    u = (x - lo) * sc
    clamped = False
    if u < 0.0:
        u = 0.0
        clamped = True
    elif u > n - 1.0:
        u = n - 1.0
        clamped = True
    i = int(math.floor(u))
    if i > n - 2:
        i = n - 2
    return i, u - i, clamped


# ------------------------------------------------------------ grid primitives

@njit(cache=True, inline='always')
def grid_sample(vals, lo, sc, x, y, z, out):
    nz, ny, nx, nc = vals.shape
    ix, fx, _ = _axis(nx, lo[0], sc[0], x)
    iy, fy, _ = _axis(ny, lo[1], sc[1], y)
    iz, fz, _ = _axis(nz, lo[2], sc[2], z)
    for c in range(nc):
        c00 = vals[iz, iy, ix, c] * (1 - fx) + vals[iz, iy, ix + 1, c] * fx
        c10 = vals[iz, iy + 1, ix, c] * (1 - fx) + vals[iz, iy + 1, ix + 1, c] * fx
        c01 = vals[iz + 1, iy, ix, c] * (1 - fx) + vals[iz + 1, iy, ix + 1, c] * fx
        c11 = vals[iz + 1, iy + 1, ix, c] * (1 - fx) + vals[iz + 1, iy + 1, ix + 1, c] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[c] = c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def grid_sample_grad(vals, lo, sc, x, y, z, out, gout):
    """Value and spatial gradient; gradient is zero along clamped axes."""
    nz, ny, nx, nc = vals.shape
    ix, fx, cx = _axis(nx, lo[0], sc[0], x)
    iy, fy, cy = _axis(ny, lo[1], sc[1], y)
    iz, fz, cz = _axis(nz, lo[2], sc[2], z)
    sx = 0.0 if cx else sc[0]
    sy = 0.0 if cy else sc[1]
    sz = 0.0 if cz else sc[2]
    for c in range(nc):
        v000 = vals[iz, iy, ix, c]
        v001 = vals[iz, iy, ix + 1, c]
        v010 = vals[iz, iy + 1, ix, c]
        v011 = vals[iz, iy + 1, ix + 1, c]
        v100 = vals[iz + 1, iy, ix, c]
        v101 = vals[iz + 1, iy, ix + 1, c]
        v110 = vals[iz + 1, iy + 1, ix, c]
        v111 = vals[iz + 1, iy + 1, ix + 1, c]
        c00 = v000 * (1 - fx) + v001 * fx
        c10 = v010 * (1 - fx) + v011 * fx
        c01 = v100 * (1 - fx) + v101 * fx
        c11 = v110 * (1 - fx) + v111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[c] = c0 * (1 - fz) + c1 * fz
        d00 = v001 - v000
        d10 = v011 - v010
        d01 = v101 - v100
        d11 = v111 - v110
        gx = ((d00 * (1 - fy) + d10 * fy) * (1 - fz) + (d01 * (1 - fy) + d11 * fy) * fz)
        gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
        gz = c1 - c0
        gout[c, 0] = gx * sx
        gout[c, 1] = gy * sy
        gout[c, 2] = gz * sz


@njit(cache=True, inline='always')
def scalar_full(raw, lo, sc, x, y, z):
    """Trilinear value, gradient and (mixed) Hessian of a 3D scalar grid."""
    nz, ny, nx = raw.shape
    ix, fx, cx = _axis(nx, lo[0], sc[0], x)
    iy, fy, cy = _axis(ny, lo[1], sc[1], y)
    iz, fz, cz = _axis(nz, lo[2], sc[2], z)
    sx = 0.0 if cx else sc[0]
    sy = 0.0 if cy else sc[1]
    sz = 0.0 if cz else sc[2]
    v000 = raw[iz, iy, ix]
    v001 = raw[iz, iy, ix + 1]
    v010 = raw[iz, iy + 1, ix]
    v011 = raw[iz, iy + 1, ix + 1]
    v100 = raw[iz + 1, iy, ix]
    v101 = raw[iz + 1, iy, ix + 1]
    v110 = raw[iz + 1, iy + 1, ix]
    v111 = raw[iz + 1, iy + 1, ix + 1]
    c00 = v000 * (1 - fx) + v001 * fx
    c10 = v010 * (1 - fx) + v011 * fx
    c01 = v100 * (1 - fx) + v101 * fx
    c11 = v110 * (1 - fx) + v111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    val = c0 * (1 - fz) + c1 * fz
    d00 = v001 - v000
    d10 = v011 - v010
    d01 = v101 - v100
    d11 = v111 - v110
    gx = (d00 * (1 - fy) + d10 * fy) * (1 - fz) + (d01 * (1 - fy) + d11 * fy) * fz
    gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
    gz = c1 - c0
    hxy = (d10 - d00) * (1 - fz) + (d11 - d01) * fz
    hxz = (d01 * (1 - fy) + d11 * fy) - (d00 * (1 - fy) + d10 * fy)
    hyz = (c11 - c01) - (c10 - c00)
    return (val, gx * sx, gy * sy, gz * sz,
            hxy * sx * sy, hxz * sx * sz, hyz * sy * sz)


@njit(cache=True)
def scalar_scatter(grads, lo, sc, x, y, z, cval, ax, ay, az):
    """grads[corner] += cval * w + (ax, ay, az) . grad(w) over the 8 corners."""
    nz, ny, nx = grads.shape
    ix, fx, cx = _axis(nx, lo[0], sc[0], x)
    iy, fy, cy = _axis(ny, lo[1], sc[1], y)
    iz, fz, cz = _axis(nz, lo[2], sc[2], z)
    sx = 0.0 if cx else sc[0]
    sy = 0.0 if cy else sc[1]
    sz = 0.0 if cz else sc[2]
    for kz in range(2):
        wz = fz if kz == 1 else 1.0 - fz
        dz = sz if kz == 1 else -sz
        for ky in range(2):
            wy = fy if ky == 1 else 1.0 - fy
            dy = sy if ky == 1 else -sy
            for kx in range(2):
                wx = fx if kx == 1 else 1.0 - fx
                dx = sx if kx == 1 else -sx
                w = wx * wy * wz
                g = cval * w + ax * dx * wy * wz + ay * wx * dy * wz + az * wx * wy * dz
                grads[iz + kz, iy + ky, ix + kx] += g


@njit(cache=True)
def grid_scatter(grads, lo, sc, x, y, z, up):
    """Adjoint of grid_sample: grads[corner, c] += w * up[c]."""
    nz, ny, nx, nc = grads.shape
    ix, fx, _ = _axis(nx, lo[0], sc[0], x)
    iy, fy, _ = _axis(ny, lo[1], sc[1], y)
    iz, fz, _ = _axis(nz, lo[2], sc[2], z)
    for kz in range(2):
        wz = fz if kz == 1 else 1.0 - fz
        for ky in range(2):
            wy = fy if ky == 1 else 1.0 - fy
            for kx in range(2):
                wx = fx if kx == 1 else 1.0 - fx
                w = wx * wy * wz
                if w == 0.0:
                    continue
                for c in range(nc):
                    grads[iz + kz, iy + ky, ix + kx, c] += w * up[c]


@njit(cache=True)
def grid_scatter_grad(grads, lo, sc, x, y, z, up):
    """Adjoint of the spatial gradient: up has shape (C, 3)."""
    nz, ny, nx, nc = grads.shape
    ix, fx, cx = _axis(nx, lo[0], sc[0], x)
    iy, fy, cy = _axis(ny, lo[1], sc[1], y)
    iz, fz, cz = _axis(nz, lo[2], sc[2], z)
    sx = 0.0 if cx else sc[0]
    sy = 0.0 if cy else sc[1]
    sz = 0.0 if cz else sc[2]
    for kz in range(2):
        wz = fz if kz == 1 else 1.0 - fz
        dz = sz if kz == 1 else -sz
        for ky in range(2):
            wy = fy if ky == 1 else 1.0 - fy
            dy = sy if ky == 1 else -sy
            for kx in range(2):
                wx = fx if kx == 1 else 1.0 - fx
                dx = sx if kx == 1 else -sx
                gwx = dx * wy * wz
                gwy = wx * dy * wz
                gwz = wx * wy * dz
                for c in range(nc):
                    grads[iz + kz, iy + ky, ix + kx, c] += (
                        up[c, 0] * gwx + up[c, 1] * gwy + up[c, 2] * gwz)


@njit(cache=True, parallel=True)
def grid_sample_many(vals, lo, sc, pts, out):
    for i in prange(pts.shape[0]):
        grid_sample(vals, lo, sc, pts[i, 0], pts[i, 1], pts[i, 2], out[i])


@njit(cache=True, parallel=True)
def grid_sample_grad_many(vals, lo, sc, pts, out, gout):
    for i in prange(pts.shape[0]):
        grid_sample_grad(vals, lo, sc, pts[i, 0], pts[i, 1], pts[i, 2], out[i], gout[i])


# --------------------------------------------------------------------- IoR

@njit(cache=True)
def ior_full(ior, x, y, z):
    """Returns (n, gx, gy, gz, hxx, hyy, hzz, hxy, hxz, hyz)."""
    kind, raw, lo, sc, prm = ior
    if kind == 0:
        r, rx, ry, rz, rxy, rxz, ryz = scalar_full(raw, lo, sc, x, y, z)
        sp, s = softplus_sigmoid(r)
        ds = s * (1.0 - s)
        n = 1.0 + sp
        return (n, s * rx, s * ry, s * rz,
                ds * rx * rx, ds * ry * ry, ds * rz * rz,
                ds * rx * ry + s * rxy, ds * rx * rz + s * rxz, ds * ry * rz + s * ryz)
    elif kind == 1:
        R = prm[3]
        qx = x - prm[0]
        qy = y - prm[1]
        qz = z - prm[2]
        r2 = qx * qx + qy * qy + qz * qz
        if r2 >= R * R:
            return (1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        n = math.sqrt(2.0 - r2 / (R * R))
        a = -1.0 / (R * R * n)
        b = -1.0 / (R * R * R * R * n * n * n)
        return (n, a * qx, a * qy, a * qz,
                a + b * qx * qx, a + b * qy * qy, a + b * qz * qz,
                b * qx * qy, b * qx * qz, b * qy * qz)
    else:
        amp = prm[3]
        rho = prm[4]
        qx = x - prm[0]
        qy = y - prm[1]
        qz = z - prm[2]
        r2 = qx * qx + qy * qy + qz * qz
        g = amp * math.exp(-r2 / (2.0 * rho * rho))
        i2 = 1.0 / (rho * rho)
        i4 = i2 * i2
        return (1.0 + g, -g * qx * i2, -g * qy * i2, -g * qz * i2,
                -g * i2 + g * qx * qx * i4, -g * i2 + g * qy * qy * i4,
                -g * i2 + g * qz * qz * i4,
                g * qx * qy * i4, g * qx * qz * i4, g * qy * qz * i4)


@njit(cache=True, parallel=True)
def ior_full_many(ior, pts, out):
    for i in prange(pts.shape[0]):
        h = ior_full(ior, pts[i, 0], pts[i, 1], pts[i, 2])
        for j in range(10):
            out[i, j] = h[j]


@njit(cache=True, inline='always')
def ior_n_grad(ior, x, y, z):
    kind, raw, lo, sc, prm = ior
    if kind == 0:
        r, rx, ry, rz, _, _, _ = scalar_full(raw, lo, sc, x, y, z)
        sp, s = softplus_sigmoid(r)
        return 1.0 + sp, s * rx, s * ry, s * rz
    h = ior_full(ior, x, y, z)
    return h[0], h[1], h[2], h[3]


@njit(cache=True)
def ior_scatter(ior, grads, x, y, z, a_n, agx, agy, agz):
    """Accumulate d(a_n * n + ag . grad n)/d raw into grads (grid kind only)."""
    kind, raw, lo, sc, prm = ior
    if kind != 0:
        return
    r, rx, ry, rz, _, _, _ = scalar_full(raw, lo, sc, x, y, z)
    s = sigmoid(r)
    ds = s * (1.0 - s)
    cval = a_n * s + ds * (agx * rx + agy * ry + agz * rz)
    scalar_scatter(grads, lo, sc, x, y, z, cval, s * agx, s * agy, s * agz)


# ------------------------------------------------------- analytic EA prims

@njit(cache=True)
def _hash01(i, j, seed):
    h = (i * 374761393 + j * 668265263 + seed * 2147483647) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF) / 16777216.0


@njit(cache=True)
def _texture(kind, u, v, scale, seed):
    if kind == TEX_CHECKER:
        a = int(math.floor(u / scale)) + int(math.floor(v / scale))
        return 0.0 if (a & 1) == 0 else 1.0
    elif kind == TEX_NOISE:
        uu = u / scale
        vv = v / scale
        i = int(math.floor(uu))
        j = int(math.floor(vv))
        fu = uu - i
        fv = vv - j
        su = fu * fu * (3.0 - 2.0 * fu)
        sv = fv * fv * (3.0 - 2.0 * fv)
        a = _hash01(i, j, seed)
        b = _hash01(i + 1, j, seed)
        c = _hash01(i, j + 1, seed)
        d = _hash01(i + 1, j + 1, seed)
        return (a * (1 - su) + b * su) * (1 - sv) + (c * (1 - su) + d * su) * sv
    return 0.0


@njit(cache=True)
def prims_eval(prims, x, y, z, out):
    """Adds analytic primitive (q, sigma) at p into out[0:4]."""
    for k in range(prims.shape[0]):
        row = prims[k]
        kind = int(row[0])
        if kind == PRIM_PLANE:
            qx = x - row[1]
            qy = y - row[2]
            qz = z - row[3]
            dist = qx * row[4] + qy * row[5] + qz * row[6]
            if abs(dist) <= 0.5 * row[13]:
                u = qx * row[7] + qy * row[8] + qz * row[9]
                v = qx * row[10] + qy * row[11] + qz * row[12]
                t = _texture(int(row[15]), u, v, row[16], int(row[23]))
                sig = row[14]
                out[0] += sig * (row[17] + t * (row[20] - row[17]))
                out[1] += sig * (row[18] + t * (row[21] - row[18]))
                out[2] += sig * (row[19] + t * (row[22] - row[19]))
                out[3] += sig
        elif kind == PRIM_CYLINDER:
            qx = x - row[1]
            qy = y - row[2]
            qz = z - row[3]
            t = qx * row[4] + qy * row[5] + qz * row[6]
            if abs(t) <= row[8]:
                rx = qx - t * row[4]
                ry = qy - t * row[5]
                rz = qz - t * row[6]
                if rx * rx + ry * ry + rz * rz <= row[7] * row[7]:
                    sig = row[9]
                    out[0] += sig * row[10]
                    out[1] += sig * row[11]
                    out[2] += sig * row[12]
                    out[3] += sig
        elif kind == PRIM_SPHERE:
            qx = x - row[1]
            qy = y - row[2]
            qz = z - row[3]
            if qx * qx + qy * qy + qz * qz <= row[4] * row[4]:
                sig = row[5]
                out[0] += sig * row[6]
                out[1] += sig * row[7]
                out[2] += sig * row[8]
                out[3] += sig


@njit(cache=True, inline='always')
def in_box(box, x, y, z):
    return (box[0, 0] <= x <= box[1, 0] and box[0, 1] <= y <= box[1, 1]
            and box[0, 2] <= z <= box[1, 2])


@njit(cache=True)
def ea_eval(ea, x, y, z, out):
    vals, lo, sc, has_grid, prims, masked, box = ea
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    out[3] = 0.0
    if masked and in_box(box, x, y, z):
        return
    if has_grid:
        grid_sample(vals, lo, sc, x, y, z, out)
    prims_eval(prims, x, y, z, out)


@njit(cache=True)
def ea_eval_grad(ea, x, y, z, out, gout):
    """Analytic primitives are piecewise constant and contribute no gradient."""
    vals, lo, sc, has_grid, prims, masked, box = ea
    for c in range(4):
        out[c] = 0.0
        gout[c, 0] = 0.0
        gout[c, 1] = 0.0
        gout[c, 2] = 0.0
    if masked and in_box(box, x, y, z):
        return
    if has_grid:
        grid_sample_grad(vals, lo, sc, x, y, z, out, gout)
    prims_eval(prims, x, y, z, out)


@njit(cache=True, parallel=True)
def ea_eval_many(ea, pts, out):
    for i in prange(pts.shape[0]):
        ea_eval(ea, pts[i, 0], pts[i, 1], pts[i, 2], out[i])


# ------------------------------------------------------------ ray geometry

@njit(cache=True)
def intersect_box(ox, oy, oz, dx, dy, dz, box):
    """Slab test; returns (hit, t_enter, t_exit) with t clipped to >= 0."""
    t0 = -np.inf
    t1 = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        lo = box[0, a]
        hi = box[1, a]
        if d[a] == 0.0:
            if o[a] < lo or o[a] > hi:
                return False, 0.0, 0.0
            continue
        inv = 1.0 / d[a]
        ta = (lo - o[a]) * inv
        tb = (hi - o[a]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t0 < 0.0:
        t0 = 0.0
    if t1 <= t0:
        return False, 0.0, 0.0
    return True, t0, t1


@njit(cache=True)
def _first_node(s_a, h):
    k = int(math.floor(s_a / h)) + 1
    while k * h <= s_a:
        k += 1
    return k


@njit(cache=True, inline='always')
def _alpha(sig, h):
    """(1 - exp(-sig h)) / sig and its derivative in sig."""
    x = sig * h
    if x < 1e-4:
        a = h * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0)
        da = h * h * (-0.5 + x / 3.0 - x * x / 8.0)
        return a, da
    e = math.exp(-x)
    a = (1.0 - e) / sig
    da = (h * e * sig - (1.0 - e)) / (sig * sig)
    return a, da


@njit(cache=True)
def ea_march(ea, px, py, pz, dx, dy, dz, s_a, s_b, h, L, T, t_min, buf,
             samp, nsamp, do_samp):
    """Straight emission-absorption march over [s_a, s_b] on the global grid
    of spacing h (sub-steps split at multiples of h). Updates L in place.

    Returns (T, executed_substeps, terminated, nsamp).
    """
    if s_b <= s_a:
        return T, 0, False, nsamp
    k = _first_node(s_a, h)
    s = s_a
    m = 0
    while True:
        nxt = k * h
        last = nxt >= s_b
        if last:
            nxt = s_b
        hh = nxt - s
        sm = 0.5 * (s + nxt) - s_a
        x = px + sm * dx
        y = py + sm * dy
        z = pz + sm * dz
        ea_eval(ea, x, y, z, buf)
        sig = buf[3]
        a, _ = _alpha(sig, hh)
        L[0] += T * a * buf[0]
        L[1] += T * a * buf[1]
        L[2] += T * a * buf[2]
        T = T * math.exp(-sig * hh)
        if do_samp and nsamp < samp.shape[0]:
            samp[nsamp, 0] = x
            samp[nsamp, 1] = y
            samp[nsamp, 2] = z
            samp[nsamp, 3] = hh
            samp[nsamp, 4] = 1.0
            samp[nsamp, 5] = 0.0
            nsamp += 1
        m += 1
        if T < t_min:
            return T, m, True, nsamp
        if last:
            break
        s = nxt
        k += 1
    return T, m, False, nsamp


@njit(cache=True, inline='always')
def eik_rhs(ior, z, k):
    n, gx, gy, gz = ior_n_grad(ior, z[0], z[1], z[2])
    k[0] = z[3] / n
    k[1] = z[4] / n
    k[2] = z[5] / n
    k[3] = gx
    k[4] = gy
    k[5] = gz


@njit(cache=True)
def rk4_step(ior, z, h, out, k1, k2, k3, k4, tmp):
    eik_rhs(ior, z, k1)
    for i in range(6):
        tmp[i] = z[i] + 0.5 * h * k1[i]
    eik_rhs(ior, tmp, k2)
    for i in range(6):
        tmp[i] = z[i] + 0.5 * h * k2[i]
    eik_rhs(ior, tmp, k3)
    for i in range(6):
        tmp[i] = z[i] + h * k3[i]
    eik_rhs(ior, tmp, k4)
    for i in range(6):
        out[i] = z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def eik_vjp(ior, z, a, out, grads, do_params):
    """out = J(z)^T a for the eikonal RHS; optionally scatters the parameter VJP."""
    kind, raw, lo, sc, prm = ior
    vx, vy, vz = z[3], z[4], z[5]
    apx, apy, apz = a[0], a[1], a[2]
    avx, avy, avz = a[3], a[4], a[5]
    if kind == 0:
        # grid: one trilinear evaluation serves the state VJP and the scatter
        r, rx, ry, rz, rxy, rxz, ryz = scalar_full(raw, lo, sc, z[0], z[1], z[2])
        sp, s = softplus_sigmoid(r)
        ds = s * (1.0 - s)
        n = 1.0 + sp
        gx, gy, gz = s * rx, s * ry, s * rz
        hxx, hyy, hzz = ds * rx * rx, ds * ry * ry, ds * rz * rz
        hxy = ds * rx * ry + s * rxy
        hxz = ds * rx * rz + s * rxz
        hyz = ds * ry * rz + s * ryz
    else:
        n, gx, gy, gz, hxx, hyy, hzz, hxy, hxz, hyz = ior_full(ior, z[0], z[1], z[2])
    c = -(apx * vx + apy * vy + apz * vz) / (n * n)
    out[0] = c * gx + hxx * avx + hxy * avy + hxz * avz
    out[1] = c * gy + hxy * avx + hyy * avy + hyz * avz
    out[2] = c * gz + hxz * avx + hyz * avy + hzz * avz
    out[3] = apx / n
    out[4] = apy / n
    out[5] = apz / n
    if do_params and kind == 0:
        cval = c * s + ds * (avx * rx + avy * ry + avz * rz)
        scalar_scatter(grads, lo, sc, z[0], z[1], z[2], cval, s * avx, s * avy, s * avz)


@njit(cache=True)
def rk4_vjp(ior, z, h, abar, az, grads, do_params, ws):
    """Reverse-mode through one RK4 step starting at z. ws: (12, 6) workspace."""
    k1 = ws[0]
    k2 = ws[1]
    k3 = ws[2]
    k4 = ws[3]
    z1 = ws[4]
    z2 = ws[5]
    z3 = ws[6]
    kb1 = ws[7]
    kb2 = ws[8]
    kb3 = ws[9]
    kb4 = ws[10]
    t = ws[11]
    eik_rhs(ior, z, k1)
    for i in range(6):
        z1[i] = z[i] + 0.5 * h * k1[i]
    eik_rhs(ior, z1, k2)
    for i in range(6):
        z2[i] = z[i] + 0.5 * h * k2[i]
    eik_rhs(ior, z2, k3)
    for i in range(6):
        z3[i] = z[i] + h * k3[i]
    for i in range(6):
        az[i] = abar[i]
        kb4[i] = h / 6.0 * abar[i]
        kb3[i] = h / 3.0 * abar[i]
        kb2[i] = h / 3.0 * abar[i]
        kb1[i] = h / 6.0 * abar[i]
    eik_vjp(ior, z3, kb4, t, grads, do_params)
    for i in range(6):
        az[i] += t[i]
        kb3[i] += h * t[i]
    eik_vjp(ior, z2, kb3, t, grads, do_params)
    for i in range(6):
        az[i] += t[i]
        kb2[i] += 0.5 * h * t[i]
    eik_vjp(ior, z1, kb2, t, grads, do_params)
    for i in range(6):
        az[i] += t[i]
        kb1[i] += 0.5 * h * t[i]
    eik_vjp(ior, z, kb1, t, grads, do_params)
    for i in range(6):
        az[i] += t[i]


@njit(cache=True)
def rk4_invert(ior, znext, h, zout, iters, ws):
    """Solve rk4_step(z) = znext for z: backward RK4 guess + fixed-point refinement.

    Runs at most ``iters`` corrections and stops once the residual stops shrinking;
    iters = 0 returns the plain backward step.
    """
    k1 = ws[0]
    k2 = ws[1]
    k3 = ws[2]
    k4 = ws[3]
    tmp = ws[4]
    fz = ws[5]
    best = ws[6]
    rk4_step(ior, znext, -h, zout, k1, k2, k3, k4, tmp)
    if iters == 0:
        return
    best_res = np.inf
    for _ in range(iters + 1):
        rk4_step(ior, zout, h, fz, k1, k2, k3, k4, tmp)
        res = 0.0
        for i in range(6):
            res = max(res, abs(znext[i] - fz[i]))
        if res >= best_res:
            # the step map is only piecewise smooth across cell faces; keep the best iterate
            for i in range(6):
                zout[i] = best[i]
            return
        best_res = res
        for i in range(6):
            best[i] = zout[i]
        if res == 0.0:
            return
        for i in range(6):
            zout[i] += znext[i] - fz[i]


# ------------------------------------------------------------- mixed trace

@njit(cache=True)
def trace(o, d, s0, L0, T0, ext, inter, use_inter, ior, use_box, box,
          h_in, h_out, far, budget, max_re, t_min,
          rec, do_rec, samp, do_samp, out):
    """Loop-split mixed trace from state (o, d, L0, T0) at arc length s0.

    out: [L0, L1, L2, T, trapped, nseg, nsamp, dx, dy, dz, s_end, entries,
          overflow, px, py, pz]
    """
    px, py, pz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    L = np.empty(3)
    L[0] = L0[0]
    L[1] = L0[1]
    L[2] = L0[2]
    T = T0
    s = s0
    nseg = 0
    nsamp = 0
    trapped = 0
    entries = 0
    buf = np.empty(4)
    z = np.empty(6)
    zn = np.empty(6)
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)
    max_rec = rec.shape[0]
    while True:
        hit = False
        t0 = 0.0
        if use_box and entries <= max_re and s < far:
            hit, t0, t1 = intersect_box(px, py, pz, dx, dy, dz, box)
            if hit and s + t0 >= far:
                hit = False
        s_b = s + t0 if hit else far
        if do_rec and nseg < max_rec:
            rec[nseg, 0] = SEG_EA
            rec[nseg, 1] = s
            rec[nseg, 2] = s_b
            rec[nseg, 5] = px
            rec[nseg, 6] = py
            rec[nseg, 7] = pz
            rec[nseg, 8] = dx
            rec[nseg, 9] = dy
            rec[nseg, 10] = dz
            rec[nseg, 11] = L[0]
            rec[nseg, 12] = L[1]
            rec[nseg, 13] = L[2]
            rec[nseg, 14] = T
        T, m, term, nsamp = ea_march(ext, px, py, pz, dx, dy, dz, s, s_b, h_out, L, T,
                                     t_min, buf, samp, nsamp, do_samp)
        if s_b > s:
            ds = s_b - s
            px = px + ds * dx
            py = py + ds * dy
            pz = pz + ds * dz
            s = s_b
        if do_rec and nseg < max_rec:
            rec[nseg, 3] = m
            rec[nseg, 4] = 1.0 if term else 0.0
            rec[nseg, 15] = px
            rec[nseg, 16] = py
            rec[nseg, 17] = pz
            rec[nseg, 18] = dx
            rec[nseg, 19] = dy
            rec[nseg, 20] = dz
            rec[nseg, 21] = L[0]
            rec[nseg, 22] = L[1]
            rec[nseg, 23] = L[2]
            rec[nseg, 24] = T
        nseg += 1
        if term or not hit:
            break
        # box entry: v <- n(p) d, with p pulled onto the closed box so that
        # round-off never places the first RK4 stage in the clamped exterior
        entries += 1
        px = min(max(px, box[0, 0]), box[1, 0])
        py = min(max(py, box[0, 1]), box[1, 1])
        pz = min(max(pz, box[0, 2]), box[1, 2])
        n, _, _, _ = ior_n_grad(ior, px, py, pz)
        z[0] = px
        z[1] = py
        z[2] = pz
        z[3] = n * dx
        z[4] = n * dy
        z[5] = n * dz
        if do_rec and nseg < max_rec:
            rec[nseg, 0] = SEG_EIK
            rec[nseg, 1] = s
            for i in range(6):
                rec[nseg, 5 + i] = z[i]
            rec[nseg, 11] = L[0]
            rec[nseg, 12] = L[1]
            rec[nseg, 13] = L[2]
            rec[nseg, 14] = T
        K = 0
        while True:
            rk4_step(ior, z, h_in, zn, k1, k2, k3, k4, tmp)
            if use_inter:
                mx = 0.5 * (z[0] + zn[0])
                my = 0.5 * (z[1] + zn[1])
                mz = 0.5 * (z[2] + zn[2])
                ea_eval(inter, mx, my, mz, buf)
                nm, _, _, _ = ior_n_grad(ior, mx, my, mz)
                w = 1.0 / (nm * nm)
                sig = buf[3]
                a, _ = _alpha(sig, h_in)
                L[0] += T * a * buf[0] * w
                L[1] += T * a * buf[1] * w
                L[2] += T * a * buf[2] * w
                T = T * math.exp(-sig * h_in)
                if do_samp and nsamp < samp.shape[0]:
                    samp[nsamp, 0] = mx
                    samp[nsamp, 1] = my
                    samp[nsamp, 2] = mz
                    samp[nsamp, 3] = h_in
                    samp[nsamp, 4] = w
                    samp[nsamp, 5] = 1.0
                    nsamp += 1
            for i in range(6):
                z[i] = zn[i]
            K += 1
            if not in_box(box, z[0], z[1], z[2]):
                break
            if K * h_in > budget:
                trapped = 1
                break
        s = s + K * h_in
        if do_rec and nseg < max_rec:
            rec[nseg, 2] = s
            rec[nseg, 3] = K
            rec[nseg, 4] = trapped
            for i in range(6):
                rec[nseg, 15 + i] = z[i]
            rec[nseg, 21] = L[0]
            rec[nseg, 22] = L[1]
            rec[nseg, 23] = L[2]
            rec[nseg, 24] = T
        nseg += 1
        px, py, pz = z[0], z[1], z[2]
        vn = math.sqrt(z[3] * z[3] + z[4] * z[4] + z[5] * z[5])
        dx, dy, dz = z[3] / vn, z[4] / vn, z[5] / vn
        if trapped:
            break
    out[0] = L[0]
    out[1] = L[1]
    out[2] = L[2]
    out[3] = T
    out[4] = trapped
    out[5] = nseg
    out[6] = nsamp
    out[7] = dx
    out[8] = dy
    out[9] = dz
    out[10] = s
    out[11] = entries
    out[12] = 1.0 if (do_rec and nseg > max_rec) or (do_samp and nsamp >= samp.shape[0]) else 0.0
    out[13] = px
    out[14] = py
    out[15] = pz


@njit(cache=True, parallel=True)
def trace_many(origins, dirs, ext, inter, use_inter, ior, use_box, box,
               h_in, h_out, far, budget, max_re, t_min, outs):
    L0 = np.zeros(3)
    for i in prange(origins.shape[0]):
        rec = np.empty((1, REC_WIDTH))
        samp = np.empty((1, SAMPLE_WIDTH))
        trace(origins[i], dirs[i], 0.0, L0, 1.0, ext, inter, use_inter, ior, use_box, box,
              h_in, h_out, far, budget, max_re, t_min, rec, False, samp, False, outs[i])


@njit(cache=True)
def march_to_entry(origins, dirs, ext, box, h_out, far, t_min, out):
    """Straight EA march from each origin to its box entry.

    out rows: [hit, s_entry, px, py, pz, L0, L1, L2, T]
    """
    buf = np.empty(4)
    samp = np.empty((1, SAMPLE_WIDTH))
    for i in range(origins.shape[0]):
        o = origins[i]
        d = dirs[i]
        hit, t0, t1 = intersect_box(o[0], o[1], o[2], d[0], d[1], d[2], box)
        out[i, 0] = 0.0
        if not hit or t0 >= far:
            continue
        L = np.zeros(3)
        T, m, term, _ = ea_march(ext, o[0], o[1], o[2], d[0], d[1], d[2], 0.0, t0, h_out,
                                 L, 1.0, t_min, buf, samp, 0, False)
        if term:
            continue
        out[i, 0] = 1.0
        out[i, 1] = t0
        out[i, 2] = o[0] + t0 * d[0]
        out[i, 3] = o[1] + t0 * d[1]
        out[i, 4] = o[2] + t0 * d[2]
        out[i, 5] = L[0]
        out[i, 6] = L[1]
        out[i, 7] = L[2]
        out[i, 8] = T


# ------------------------------------------------------------ backward pass

@njit(cache=True)
def ea_segment_vjp(ea, row, h, a, buf, gbuf):
    """Exact reverse-mode through one recorded EA segment, in place on a (10,).

    The step grid and executed sub-step count come from the record; positions
    are affine in (p_a, d) so no state needs to be replayed.
    """
    s_a = row[1]
    s_b = row[2]
    m_exec = int(row[3])
    if m_exec == 0:
        return
    px, py, pz = row[5], row[6], row[7]
    dx, dy, dz = row[8], row[9], row[10]
    T_a = row[14]
    T_b = row[24]
    aL0, aL1, aL2, aT = a[6], a[7], a[8], a[9]
    # pass 1: relative transmittance and total relative radiance
    k0 = _first_node(s_a, h)
    R0 = 0.0
    R1 = 0.0
    R2 = 0.0
    tau = 1.0
    s = s_a
    k = k0
    for i in range(m_exec):
        nxt = k * h
        if nxt >= s_b:
            nxt = s_b
        hh = nxt - s
        sm = 0.5 * (s + nxt) - s_a
        ea_eval(ea, px + sm * dx, py + sm * dy, pz + sm * dz, buf)
        al, _ = _alpha(buf[3], hh)
        R0 += tau * al * buf[0]
        R1 += tau * al * buf[1]
        R2 += tau * al * buf[2]
        tau *= math.exp(-buf[3] * hh)
        s = nxt
        k += 1
    tau_end = tau
    # pass 2: gradients wrt sample positions
    C0 = 0.0
    C1 = 0.0
    C2 = 0.0
    tau = 1.0
    s = s_a
    k = k0
    apx = 0.0
    apy = 0.0
    apz = 0.0
    adx = 0.0
    ady = 0.0
    adz = 0.0
    for i in range(m_exec):
        nxt = k * h
        if nxt >= s_b:
            nxt = s_b
        hh = nxt - s
        sm = 0.5 * (s + nxt) - s_a
        ea_eval_grad(ea, px + sm * dx, py + sm * dy, pz + sm * dz, buf, gbuf)
        sig = buf[3]
        al, dal = _alpha(sig, hh)
        c0 = tau * al * buf[0]
        c1 = tau * al * buf[1]
        c2 = tau * al * buf[2]
        C0 += c0
        C1 += c1
        C2 += c2
        S = aL0 * (R0 - C0) + aL1 * (R1 - C1) + aL2 * (R2 - C2)
        qa = aL0 * buf[0] + aL1 * buf[1] + aL2 * buf[2]
        g_sig = T_a * (tau * qa * dal - hh * S) - aT * hh * T_b
        gq = T_a * tau * al
        for j in range(3):
            am = g_sig * gbuf[3, j] + gq * (aL0 * gbuf[0, j] + aL1 * gbuf[1, j] + aL2 * gbuf[2, j])
            if j == 0:
                apx += am
                adx += sm * am
            elif j == 1:
                apy += am
                ady += sm * am
            else:
                apz += am
                adz += sm * am
        tau *= math.exp(-sig * hh)
        s = nxt
        k += 1
    # p_b = p_a + (s_b - s_a) d carries the incoming position co-state to d
    span = s_b - s_a
    a[3] += adx + span * a[0]
    a[4] += ady + span * a[1]
    a[5] += adz + span * a[2]
    a[0] += apx
    a[1] += apy
    a[2] += apz
    a[9] = aL0 * R0 + aL1 * R1 + aL2 * R2 + aT * tau_end


@njit(cache=True)
def trace_backward(rec, nseg, seed, ext, ior, h_in, h_out, grads, inv_iters, a_out):
    """Constant-memory reverse pass over recorded segments of one ray.

    The state inside eikonal segments is replayed backwards by inverting each
    RK4 step; only segment end points come from the record (the start point
    also seeds the first step). Accumulates
    parameter gradients into grads and writes the co-state at the trace start
    into a_out.
    """
    a = np.zeros(10)
    a[6] = seed[0]
    a[7] = seed[1]
    a[8] = seed[2]
    buf = np.empty(4)
    gbuf = np.empty((4, 3))
    ws = np.empty((12, 6))
    zc = np.empty(6)
    zp = np.empty(6)
    ab = np.empty(6)
    az = np.empty(6)
    for seg in range(nseg - 1, -1, -1):
        row = rec[seg]
        if row[0] == SEG_EA:
            ea_segment_vjp(ext, row, h_out, a, buf, gbuf)
            continue
        # exit junction (d = v / |v|) if a segment follows
        if seg + 1 < nseg:
            vx, vy, vz = row[18], row[19], row[20]
            vn = math.sqrt(vx * vx + vy * vy + vz * vz)
            ux, uy, uz = vx / vn, vy / vn, vz / vn
            dot = a[3] * ux + a[4] * uy + a[5] * uz
            a[3] = (a[3] - dot * ux) / vn
            a[4] = (a[4] - dot * uy) / vn
            a[5] = (a[5] - dot * uz) / vn
        K = int(row[3])
        for i in range(6):
            zc[i] = row[15 + i]
            ab[i] = a[i]
        for j in range(K - 1, -1, -1):
            if j == 0:
                # the first step starts on the box face where the step map has a kink;
                # its start state is in the record, so no inversion is needed
                for i in range(6):
                    zp[i] = row[5 + i]
            else:
                rk4_invert(ior, zc, h_in, zp, inv_iters, ws)
            rk4_vjp(ior, zp, h_in, ab, az, grads, True, ws)
            for i in range(6):
                zc[i] = zp[i]
                ab[i] = az[i]
        # entry junction: v = n(p) d, using the recorded entry point
        ex, ey, ez = row[5], row[6], row[7]
        n, gx, gy, gz = ior_n_grad(ior, ex, ey, ez)
        dx, dy, dz = row[8] / n, row[9] / n, row[10] / n
        a_n = ab[3] * dx + ab[4] * dy + ab[5] * dz
        ior_scatter(ior, grads, ex, ey, ez, a_n, 0.0, 0.0, 0.0)
        a[0] = ab[0] + a_n * gx
        a[1] = ab[1] + a_n * gy
        a[2] = ab[2] + a_n * gz
        a[3] = n * ab[3]
        a[4] = n * ab[4]
        a[5] = n * ab[5]
    for i in range(10):
        a_out[i] = a[i]


@njit(cache=True)
def ior_batch_grad(z0s, s0s, dirs, targets, active, ext, ior, box, h_in, h_out, far,
                   budget, max_re, t_min, inv_iters, grads, renders, flags):
    """Forward + adjoint for a batch of rays starting at their box entries.

    Loss is the mean absolute error over rays and channels. Returns the loss
    sum (not yet divided); renders receives the per-ray radiance and flags the
    trapped indicator.
    """
    nb = z0s.shape[0]
    nrec = 2 * (max_re + 1) + 2
    rec = np.empty((nrec, REC_WIDTH))
    samp = np.empty((1, SAMPLE_WIDTH))
    out = np.empty(16)
    seed = np.empty(3)
    a_out = np.empty(10)
    L0 = np.empty(3)
    norm = 1.0 / (3.0 * max(1, active.sum()))
    total = 0.0
    for r in range(nb):
        if not active[r]:
            continue
        L0[0] = z0s[r, 3]
        L0[1] = z0s[r, 4]
        L0[2] = z0s[r, 5]
        trace(z0s[r, 0:3], dirs[r], s0s[r], L0, z0s[r, 6], ext, ext, False, ior, True, box,
              h_in, h_out, far, budget, max_re, t_min, rec, True, samp, False, out)
        renders[r, 0] = out[0]
        renders[r, 1] = out[1]
        renders[r, 2] = out[2]
        flags[r] = out[4]
        for c in range(3):
            diff = out[c] - targets[r, c]
            total += abs(diff)
            if diff > 0.0:
                seed[c] = norm
            elif diff < 0.0:
                seed[c] = -norm
            else:
                seed[c] = 0.0
        if out[4] > 0.0 or out[12] > 0.0:
            continue
        trace_backward(rec, int(out[5]), seed, ext, ior, h_in, h_out, grads, inv_iters, a_out)
    return total


# ------------------------------------------------- sample-list compositing

@njit(cache=True)
def composite_grad(samp, nsamp, ext, inter, target, seed, grads, out):
    """Volume-render a recorded sample list and backprop into one grid.

    target 0 scatters into the exterior grid, 1 into the interior grid; grads has
    shape (nz, ny, nx, 4) matching that grid. Returns nothing; out[0:4] = (L, T).
    """
    buf = np.empty(4)
    R0 = 0.0
    R1 = 0.0
    R2 = 0.0
    T = 1.0
    for i in range(nsamp):
        f = ext if samp[i, 5] == 0.0 else inter
        ea_eval(f, samp[i, 0], samp[i, 1], samp[i, 2], buf)
        h = samp[i, 3]
        w = samp[i, 4]
        a, _ = _alpha(buf[3], h)
        R0 += T * a * buf[0] * w
        R1 += T * a * buf[1] * w
        R2 += T * a * buf[2] * w
        T *= math.exp(-buf[3] * h)
    out[0] = R0
    out[1] = R1
    out[2] = R2
    out[3] = T
    if seed[0] == 0.0 and seed[1] == 0.0 and seed[2] == 0.0:
        return
    tf = ext if target == 0 else inter
    vals, lo, sc, has_grid, prims, masked, box = tf
    up = np.empty(4)
    C0 = 0.0
    C1 = 0.0
    C2 = 0.0
    T = 1.0
    for i in range(nsamp):
        is_t = (samp[i, 5] == 0.0) == (target == 0)
        f = ext if samp[i, 5] == 0.0 else inter
        x, y, z = samp[i, 0], samp[i, 1], samp[i, 2]
        ea_eval(f, x, y, z, buf)
        h = samp[i, 3]
        w = samp[i, 4]
        a, da = _alpha(buf[3], h)
        C0 += T * a * buf[0] * w
        C1 += T * a * buf[1] * w
        C2 += T * a * buf[2] * w
        if is_t and not (masked and in_box(box, x, y, z)):
            S = seed[0] * (R0 - C0) + seed[1] * (R1 - C1) + seed[2] * (R2 - C2)
            qa = seed[0] * buf[0] + seed[1] * buf[1] + seed[2] * buf[2]
            up[0] = T * a * w * seed[0]
            up[1] = T * a * w * seed[1]
            up[2] = T * a * w * seed[2]
            up[3] = T * qa * w * da - h * S
            grid_scatter(grads, lo, sc, x, y, z, up)
        T *= math.exp(-buf[3] * h)


@njit(cache=True)
def sample_batch_grad(origins, dirs, targets, ext, inter, use_inter, ior, use_box, box,
                      h_in, h_out, far, budget, max_re, t_min, target, max_samp,
                      grads, renders):
    """L1 forward + backward for EA grid parameters along fixed ray paths.

    Paths depend only on the IoR, so each ray is traced once with its sample
    list recorded and the list is then composited with gradients into the
    exterior (target 0) or interior (target 1) grid. Returns the loss sum.
    """
    nb = origins.shape[0]
    rec = np.empty((1, REC_WIDTH))
    samp = np.empty((max_samp, SAMPLE_WIDTH))
    out = np.empty(16)
    cout = np.empty(4)
    seed = np.empty(3)
    L0 = np.zeros(3)
    norm = 1.0 / (3.0 * max(1, nb))
    total = 0.0
    for r in range(nb):
        trace(origins[r], dirs[r], 0.0, L0, 1.0, ext, inter, use_inter, ior, use_box, box,
              h_in, h_out, far, budget, max_re, t_min, rec, False, samp, True, out)
        for c in range(3):
            renders[r, c] = out[c]
            diff = out[c] - targets[r, c]
            total += abs(diff)
            if diff > 0.0:
                seed[c] = norm
            elif diff < 0.0:
                seed[c] = -norm
            else:
                seed[c] = 0.0
        composite_grad(samp, int(out[6]), ext, inter, target, seed, grads, cout)
    return total
