"""Volumetric fields: trilinear grids, IoR fields, emission/absorption backends.

Grids store node values ``values[iz, iy, ix, c]`` (x fastest in memory,
channel-interleaved). Node ``i`` along an axis sits at
``origin + i * extent / (n - 1)``, so the nodes double as voxel centers when
baking.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels as K

# ---------------------------------------------------------------- GridField


@dataclass
class GridField:
    origin: np.ndarray
    extent: np.ndarray
    values: np.ndarray  # (nz, ny, nx, C)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(3)
        v = np.asarray(self.values)
        if v.ndim == 3:
            v = v[..., None]
        if v.ndim != 4 or v.shape[3] not in (1, 3, 4):
            raise ValueError(f"grid values must be (nz, ny, nx, C), got {v.shape}")
        if min(v.shape[:3]) < 2:
            raise ValueError(f"grid dims must be >= 2 on every axis, got {v.shape[:3]}")
        if not np.all(self.extent > 0):
            raise ValueError(f"grid extent must be positive, got {self.extent}")
        self.values = v

    @classmethod
    def zeros(cls, origin, extent, dims, channels=1, dtype=np.float32):
        nx, ny, nz = dims
        return cls(origin, extent, np.zeros((nz, ny, nx, channels), dtype=dtype))

    @classmethod
    def from_function(cls, fn, origin, extent, dims, dtype=np.float32):
        """Sample fn(points[..., 3]) -> (..., C) or (...,) at the grid nodes."""
        g = cls.zeros(origin, extent, dims, 1)
        vals = np.asarray(fn(g.node_positions()), dtype=np.float64)
        return cls(origin, extent, vals.astype(dtype))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx, _ = self.values.shape
        return nx, ny, nz

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def scale(self) -> np.ndarray:
        return (np.array(self.dims, dtype=np.float64) - 1.0) / self.extent

    @property
    def cell(self) -> np.ndarray:
        return 1.0 / self.scale

    def node_positions(self) -> np.ndarray:
        nx, ny, nz = self.dims
        xs = self.origin[0] + np.arange(nx) * self.cell[0]
        ys = self.origin[1] + np.arange(ny) * self.cell[1]
        zs = self.origin[2] + np.arange(nz) * self.cell[2]
        Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def kernel_values(self) -> np.ndarray:
        return np.ascontiguousarray(self.values, dtype=np.float64)

    def with_values(self, values) -> "GridField":
        return GridField(self.origin.copy(), self.extent.copy(), values)

    def copy(self) -> "GridField":
        return self.with_values(self.values.copy())

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.origin) & (p <= self.origin + self.extent), axis=-1)


def _points(p):
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("sample points must be finite")
    return p.reshape(-1, 3), p.shape[:-1]


def sample_trilinear(field: GridField, p) -> np.ndarray:
    """Trilinear value(s) at p with clamp-to-edge; returns (..., C)."""
    pts, shape = _points(p)
    out = np.empty((len(pts), field.channels))
    K.grid_sample_many(field.kernel_values(), field.origin, field.scale, pts, out)
    return out.reshape(shape + (field.channels,))


def sample_gradient(field: GridField, p) -> np.ndarray:
    """Spatial gradient of the trilinear interpolant; returns (..., C, 3)."""
    pts, shape = _points(p)
    out = np.empty((len(pts), field.channels))
    gout = np.empty((len(pts), field.channels, 3))
    K.grid_sample_grad_many(field.kernel_values(), field.origin, field.scale, pts, out, gout)
    return gout.reshape(shape + (field.channels, 3))


def vjp_sample(field: GridField, p, upstream) -> np.ndarray:
    """Gradient of upstream . sample_trilinear(field, p) w.r.t. the node values."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    up = np.asarray(upstream, dtype=np.float64).reshape(field.channels)
    g = np.zeros(field.values.shape)
    K.grid_scatter(g, field.origin, field.scale, p[0], p[1], p[2], up)
    return g


def vjp_gradient(field: GridField, p, upstream) -> np.ndarray:
    """Gradient of sum(upstream * sample_gradient(field, p)) w.r.t. node values.

    upstream has shape (C, 3) (or (3,) for single-channel grids).
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    up = np.asarray(upstream, dtype=np.float64).reshape(field.channels, 3)
    g = np.zeros(field.values.shape)
    K.grid_scatter_grad(g, field.origin, field.scale, p[0], p[1], p[2], up)
    return g


# ------------------------------------------------------------ EIKGRID1 format

GRID_MAGIC = b"EIKGRID1"
_HEADER = struct.Struct("<8sIIII3d3d")


def encode_grid(field: GridField) -> bytes:
    nx, ny, nz = field.dims
    head = _HEADER.pack(GRID_MAGIC, field.channels, nx, ny, nz, *field.origin, *field.extent)
    return head + np.ascontiguousarray(field.values, dtype="<f4").tobytes()


def decode_grid(buf: bytes, source: str = "<bytes>") -> GridField:
    if len(buf) < _HEADER.size or buf[:8] != GRID_MAGIC:
        raise ValueError(f"{source}: not an EIKGRID1 file")
    magic, c, nx, ny, nz, *geo = _HEADER.unpack_from(buf, 0)
    need = nx * ny * nz * c * 4
    payload = buf[_HEADER.size:]
    if len(payload) != need:
        raise ValueError(f"{source}: payload has {len(payload)} bytes, expected {need}")
    vals = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx, c).astype(np.float32)
    return GridField(np.array(geo[:3]), np.array(geo[3:]), vals)


def write_grid(path, field: GridField) -> None:
    Path(path).write_bytes(encode_grid(field))


def read_grid(path) -> GridField:
    path = Path(path)
    return decode_grid(path.read_bytes(), str(path))


# ---------------------------------------------------------------- IoR fields

RAW_INIT = -10.0
_DUMMY3 = np.zeros((2, 2, 2))
_ZERO3 = np.zeros(3)
_ONE3 = np.ones(3)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class IorBase:
    """n(p) with value, gradient and Hessian evaluation at points (..., 3)."""

    def kernel_tuple(self):
        raise NotImplementedError

    def _full(self, p):
        pts, shape = _points(p)
        out = np.empty((len(pts), 10))
        K.ior_full_many(self.kernel_tuple(), pts, out)
        return out.reshape(shape + (10,))

    def eval(self, p) -> np.ndarray:
        return self._full(p)[..., 0]

    def grad(self, p) -> np.ndarray:
        return self._full(p)[..., 1:4]

    def hess(self, p) -> np.ndarray:
        f = self._full(p)
        xx, yy, zz, xy, xz, yz = (f[..., i] for i in range(4, 10))
        return np.stack([np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1),
                         np.stack([xz, yz, zz], -1)], -2)

    @property
    def has_params(self) -> bool:
        return False


@dataclass
class IorField(IorBase):
    """n(p) = 1 + softplus(interp(raw, p)) on a grid that tiles the box."""

    raw: GridField

    @classmethod
    def constant(cls, box, dims, raw_value=RAW_INIT, dtype=np.float64):
        nx, ny, nz = dims
        vals = np.full((nz, ny, nx, 1), raw_value, dtype=dtype)
        return cls(GridField(box.lo, box.hi - box.lo, vals))

    @property
    def has_params(self) -> bool:
        return True

    def kernel_tuple(self):
        return (0, np.ascontiguousarray(self.raw.values[..., 0], dtype=np.float64),
                self.raw.origin, self.raw.scale, np.zeros(8))

    def vjp_params(self, p, a_n=0.0, a_grad=(0.0, 0.0, 0.0)) -> np.ndarray:
        """d(a_n * n(p) + a_grad . grad n(p)) / d raw, dense over the raw grid."""
        p = np.asarray(p, dtype=np.float64).reshape(3)
        g = np.zeros(self.raw.values.shape[:3])
        ag = np.asarray(a_grad, dtype=np.float64)
        K.ior_scatter(self.kernel_tuple(), g, p[0], p[1], p[2], float(a_n), ag[0], ag[1], ag[2])
        return g[..., None]


def ior_eval(ior: IorBase, p):
    return ior.eval(p)


def ior_grad(ior: IorBase, p):
    return ior.grad(p)


@dataclass
class Luneburg(IorBase):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("Luneburg radius must be positive")

    def kernel_tuple(self):
        prm = np.zeros(8)
        prm[:3] = self.center
        prm[3] = self.radius
        return (1, _DUMMY3, _ZERO3, _ONE3, prm)


@dataclass
class GaussianBlob(IorBase):
    center: np.ndarray
    amplitude: float
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0 or self.amplitude < 0:
            raise ValueError("blob needs radius > 0 and amplitude >= 0")

    def kernel_tuple(self):
        prm = np.zeros(8)
        prm[:3] = self.center
        prm[3] = self.amplitude
        prm[4] = self.radius
        return (2, _DUMMY3, _ZERO3, _ONE3, prm)


def analytic_luneburg(center, R) -> Luneburg:
    return Luneburg(center, R)


def analytic_gaussian_blob(center, amplitude, radius) -> GaussianBlob:
    return GaussianBlob(center, amplitude, radius)


# ------------------------------------------------------------------ MLP IoR


@dataclass
class MlpParams:
    weights: list
    biases: list
    n_freqs: int = 5
    beta: float = 5.0
    skip_after: int = 2  # encoded input is concatenated after this layer's activation

    @classmethod
    def init(cls, seed=0, hidden=64, layers=6, n_freqs=5, skip_after=2):
        rng = np.random.default_rng(seed)
        d_in = 3 + 6 * n_freqs
        ws, bs = [], []
        width = d_in
        for i in range(layers):
            out = 1 if i == layers - 1 else hidden
            fan_in = width
            bound = math.sqrt(6.0 / (fan_in + out))
            ws.append(rng.uniform(-bound, bound, size=(fan_in, out)))
            bs.append(np.zeros(out))
            width = out + d_in if i == skip_after else out
        return cls(ws, bs, n_freqs, 5.0, skip_after)

    def zeroed(self) -> "MlpParams":
        return replace(self, weights=[np.zeros_like(w) for w in self.weights],
                       biases=[np.zeros_like(b) for b in self.biases])


def positional_encoding(p, n_freqs=5):
    p = np.asarray(p, dtype=np.float64)
    feats = [p]
    for k in range(n_freqs):
        w = (2.0 ** k) * math.pi
        feats.append(np.sin(w * p))
        feats.append(np.cos(w * p))
    return np.concatenate(feats, axis=-1)


def _softplus_beta(x, beta):
    return softplus(beta * x) / beta


def mlp_field_eval(params: MlpParams, p) -> np.ndarray:
    """Raw scalar output of the IoR MLP at p (..., 3)."""
    enc = positional_encoding(p, params.n_freqs)
    h = enc
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = _softplus_beta(h, params.beta)
            if i == params.skip_after:
                h = np.concatenate([h, enc], axis=-1)
    return h[..., 0]


@dataclass
class MlpIorField(IorBase):
    """Forward-only MLP IoR, n = 1 + softplus(mlp(p)), gradient by central differences."""

    params: MlpParams
    fd_step: float = 1e-4

    def eval(self, p):
        return 1.0 + softplus(mlp_field_eval(self.params, p))

    def grad(self, p):
        p = np.asarray(p, dtype=np.float64)
        g = np.empty(p.shape)
        for a in range(3):
            e = np.zeros(3)
            e[a] = self.fd_step
            g[..., a] = (self.eval(p + e) - self.eval(p - e)) / (2 * self.fd_step)
        return g

    def hess(self, p):
        raise NotImplementedError("MLP IoR is forward-only")

    def kernel_tuple(self):
        raise NotImplementedError("MLP IoR has no compiled backend")


# ------------------------------------------------------- emission/absorption


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.lo < self.hi):
            raise ValueError(f"box needs min < max componentwise, got {self.lo}, {self.hi}")

    @property
    def diag(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def as_array(self) -> np.ndarray:
        return np.stack([self.lo, self.hi])

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def to_json(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_json(cls, d) -> "Box":
        return cls(d["min"], d["max"])


# placeholder geometry used when a box-dependent feature is switched off
_FAR_BOX = np.array([[1e30, 1e30, 1e30], [2e30, 2e30, 2e30]])


def plane_row(point, normal, *, thickness, sigma=1e3, texture="checker", scale=0.25,
              color0=(0.1, 0.1, 0.1), color1=(0.9, 0.9, 0.9), seed=0) -> np.ndarray:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    tex = {"checker": K.TEX_CHECKER, "noise": K.TEX_NOISE, "solid": K.TEX_SOLID}[texture]
    row = np.zeros(K.PRIM_WIDTH)
    row[0] = K.PRIM_PLANE
    row[1:4] = point
    row[4:7] = n
    row[7:10] = u
    row[10:13] = v
    row[13] = thickness
    row[14] = sigma
    row[15] = tex
    row[16] = scale
    row[17:20] = color0
    row[20:23] = color1
    row[23] = seed
    return row


def cylinder_row(center, axis, radius, half_length, sigma, color) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    row = np.zeros(K.PRIM_WIDTH)
    row[0] = K.PRIM_CYLINDER
    row[1:4] = center
    row[4:7] = a
    row[7] = radius
    row[8] = half_length
    row[9] = sigma
    row[10:13] = color
    return row


def sphere_row(center, radius, sigma, color) -> np.ndarray:
    row = np.zeros(K.PRIM_WIDTH)
    row[0] = K.PRIM_SPHERE
    row[1:4] = center
    row[4] = radius
    row[5] = sigma
    row[6:9] = color
    return row


@dataclass
class EAField:
    """Emission q (RGB) and absorption sigma from a grid, analytic primitives, or both.

    With ``mask`` set, both quantities are exactly zero for points inside the box.
    """

    emission: GridField | None = None
    absorption: GridField | None = None
    prims: np.ndarray = field(default_factory=lambda: np.zeros((0, K.PRIM_WIDTH)))
    mask: Box | None = None

    def __post_init__(self):
        if (self.emission is None) != (self.absorption is None):
            raise ValueError("emission and absorption grids must be given together")
        if self.emission is not None:
            if self.emission.channels != 3 or self.absorption.channels != 1:
                raise ValueError("emission grid must be RGB and absorption scalar")
            if (self.emission.dims != self.absorption.dims
                    or not np.allclose(self.emission.origin, self.absorption.origin)
                    or not np.allclose(self.emission.extent, self.absorption.extent)):
                raise ValueError("emission and absorption grids must share geometry")
        self.prims = np.asarray(self.prims, dtype=np.float64).reshape(-1, K.PRIM_WIDTH)
        self._kt = None

    @classmethod
    def constant(cls, q=(0.0, 0.0, 0.0), sigma=0.0):
        vals_q = np.broadcast_to(np.asarray(q, dtype=np.float32), (2, 2, 2, 3)).copy()
        vals_s = np.full((2, 2, 2, 1), sigma, dtype=np.float32)
        return cls(GridField(-_ONE3, 2 * _ONE3, vals_q), GridField(-_ONE3, 2 * _ONE3, vals_s))

    @classmethod
    def empty(cls):
        return cls()

    @property
    def has_grid(self) -> bool:
        return self.emission is not None

    def masked(self, box: Box) -> "EAField":
        return EAField(self.emission, self.absorption, self.prims, box)

    def kernel_tuple(self):
        if self._kt is None:
            if self.has_grid:
                vals = np.concatenate([self.emission.kernel_values(),
                                       self.absorption.kernel_values()], axis=3)
                lo, sc = self.emission.origin, self.emission.scale
            else:
                vals, lo, sc = np.zeros((2, 2, 2, 4)), _ZERO3, _ONE3
            box = self.mask.as_array() if self.mask is not None else _FAR_BOX
            self._kt = (np.ascontiguousarray(vals), lo, sc, self.has_grid,
                        np.ascontiguousarray(self.prims), self.mask is not None, box)
        return self._kt

    def eval(self, p):
        """Returns (q (..., 3), sigma (...))."""
        pts, shape = _points(p)
        out = np.empty((len(pts), 4))
        K.ea_eval_many(self.kernel_tuple(), pts, out)
        out = out.reshape(shape + (4,))
        return out[..., :3], out[..., 3]


# ---------------------------------------------------------------- smoothing


@dataclass(frozen=True)
class SmoothingKernel:
    """Gaussian low-pass given as a normalized frequency bandwidth (cycles/sample)."""

    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def sigma_samples(self) -> float:
        return math.sqrt(2.0 * math.log(2.0)) / (2.0 * math.pi * self.bandwidth)

    def taps(self) -> np.ndarray:
        s = self.sigma_samples
        r = int(math.ceil(4.0 * s))
        if r == 0:
            return np.ones(1)
        x = np.arange(-r, r + 1, dtype=np.float64)
        w = np.exp(-0.5 * (x / s) ** 2)
        return w / w.sum()


IDENTITY_KERNEL = SmoothingKernel(1e9)


def gaussian_smooth(field: GridField, kernel: SmoothingKernel) -> GridField:
    """Separable clamp-to-edge Gaussian blur in index space."""
    w = kernel.taps()
    v = field.values.astype(np.float64)
    if len(w) > 1:
        for axis in range(3):
            v = ndimage.correlate1d(v, w, axis=axis, mode="nearest")
    return field.with_values(v.astype(field.values.dtype))


def bandwidth_schedule(bandwidth0=0.08, levels=5):
    return [SmoothingKernel(bandwidth0 * 2 ** i) for i in range(levels)]


def bake_masked_grid(ea: EAField, box: Box, origin, extent, dims=(128, 128, 128),
                     kernel_levels=(IDENTITY_KERNEL,), dtype=np.float64):
    """Sample the masked field at the nodes and blur once per kernel level.

    Returns a list of (Q_i, P_i) grid pairs. Nodes inside the box are zero
    before smoothing.
    """
    origin = np.asarray(origin, dtype=np.float64)
    extent = np.asarray(extent, dtype=np.float64)
    hi = origin + extent
    if np.any(box.hi < origin) or np.any(box.lo > hi):
        raise ValueError("refractive box does not intersect the grid domain")
    base = GridField.zeros(origin, extent, dims, 1)
    pts = base.node_positions()
    q, s = ea.eval(pts.reshape(-1, 3))
    inside = box.contains(pts.reshape(-1, 3))
    q[inside] = 0.0
    s[inside] = 0.0
    nx, ny, nz = dims
    Q = GridField(origin, extent, q.reshape(nz, ny, nx, 3).astype(dtype))
    P = GridField(origin, extent, s.reshape(nz, ny, nx, 1).astype(dtype))
    return [(gaussian_smooth(Q, k), gaussian_smooth(P, k)) for k in kernel_levels]


def pyramid_field(level, box: Box) -> EAField:
    Q, P = level
    return EAField(Q, P, mask=box)
