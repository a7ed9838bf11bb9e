"""Light-transport right-hand sides, box intersection and the mixed tracer.

State layout ``z = (p[0:3], v[3:6], L[6:9], T[9])``. Outside the refractive box
rays are straight and |v| = 1; inside, (p, v) follow dp/ds = v/n, dv/ds = grad n
and radiance is frozen.

Two implementations of the mixed trace exist: the compiled one in
``_kernels.trace`` (used for rendering and the constant-memory adjoint) and
``reference_trace`` below, which records every step map into a
``Trajectory`` so that ``odesolve.backprop_recorded`` can differentiate it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .fields import (Box, EAField, IorBase, IorField, _FAR_BOX, sigmoid,
                     vjp_gradient, vjp_sample)
from .odesolve import RK4Stepper, SolverError, Trajectory

_NULL_PRM = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
# Gaussian blob of zero amplitude: n == 1 everywhere
NULL_IOR = (2, np.zeros((2, 2, 2)), np.zeros(3), np.ones(3), _NULL_PRM)
_EMPTY_EA = EAField.empty()


def state(p, d, L=(0.0, 0.0, 0.0), T=1.0) -> np.ndarray:
    z = np.empty(10)
    z[0:3] = p
    z[3:6] = d
    z[6:9] = L
    z[9] = T
    return z


@dataclass
class TraceConfig:
    steps_inside: int = 128
    steps_outside: int = 128
    max_reentries: int = 4
    arc_budget_factor: float = 4.0
    far_bound: float = 12.0
    t_min: float = 1e-6

    def __post_init__(self):
        if self.steps_inside < 1 or self.steps_outside < 1 or self.max_reentries < 0:
            raise ValueError("step counts must be positive")
        if not (self.arc_budget_factor > 0 and self.far_bound > 0):
            raise ValueError("arc budget factor and far bound must be positive")

    def h_inside(self, box: Box | None) -> float:
        return box.diag / self.steps_inside if box is not None else 1.0

    @property
    def h_outside(self) -> float:
        return self.far_bound / self.steps_outside

    def budget(self, box: Box | None) -> float:
        return self.arc_budget_factor * box.diag if box is not None else 0.0


@dataclass
class Model:
    """Everything a render needs: exterior EA (masked to the box), IoR, box, interior EA."""

    exterior: EAField
    ior: IorBase | None = None
    box: Box | None = None
    interior: EAField | None = None

    def kernel_args(self):
        ior = self.ior.kernel_tuple() if self.ior is not None else NULL_IOR
        use_box = self.box is not None
        box = self.box.as_array() if use_box else _FAR_BOX
        use_inter = self.interior is not None
        inter = (self.interior if use_inter else _EMPTY_EA).kernel_tuple()
        return self.exterior.kernel_tuple(), inter, use_inter, ior, use_box, box

    def straight(self) -> "Model":
        return Model(self.exterior)


# ------------------------------------------------------------- RHS functions

def _ea_at(ea: EAField, p):
    out = np.empty(4)
    K.ea_eval(ea.kernel_tuple(), p[0], p[1], p[2], out)
    return out[:3], out[3]


def _ea_grad_at(ea: EAField, p):
    out = np.empty(4)
    g = np.empty((4, 3))
    K.ea_eval_grad(ea.kernel_tuple(), p[0], p[1], p[2], out, g)
    return out[:3], out[3], g[:3], g[3]


def _ior_at(ior, p):
    h = K.ior_full(ior.kernel_tuple(), p[0], p[1], p[2])
    n = h[0]
    g = np.array(h[1:4])
    H = np.array([[h[4], h[7], h[8]], [h[7], h[5], h[9]], [h[8], h[9], h[6]]])
    return n, g, H


def ior_param_vjp(ior, p, a_n, a_grad):
    """d(a_n n(p) + a_grad . grad n(p)) / d raw for grid IoR, else None.

    Uses the generic trilinear VJPs rather than the fused compiled scatter.
    """
    if not isinstance(ior, IorField):
        return None
    raw = ior.raw
    r, gr = _raw_probe(raw, p)
    s = float(sigmoid(r))
    ds = s * (1.0 - s)
    a_grad = np.asarray(a_grad, dtype=np.float64)
    cval = a_n * s + ds * float(a_grad @ gr)
    g = vjp_sample(raw, p, [cval]) + vjp_gradient(raw, p, (s * a_grad)[None, :])
    return g[..., 0]


def _raw_probe(raw, p):
    out = np.empty(1)
    g = np.empty((1, 3))
    K.grid_sample_grad(raw.kernel_values(), raw.origin, raw.scale, p[0], p[1], p[2], out, g)
    return float(out[0]), g[0]


def rhs_ea(z, ea: EAField):
    q, sig = _ea_at(ea, z[0:3])
    dz = np.zeros(10)
    dz[0:3] = z[3:6]
    dz[6:9] = z[9] * q
    dz[9] = -sig * z[9]
    return dz


def rhs_eikonal(z, ior):
    n, g, _ = _ior_at(ior, z[0:3])
    dz = np.zeros(10)
    dz[0:3] = z[3:6] / n
    dz[3:6] = g
    return dz


def rhs_hamilton(z, ior):
    """Same rays in the optical-path parameter (ds = n dt): dp/dt = v, dv/dt = n grad n."""
    n, g, _ = _ior_at(ior, z[0:3])
    dz = np.zeros(10)
    dz[0:3] = z[3:6]
    dz[3:6] = n * g
    return dz


def rhs_complete(z, ior, ea: EAField):
    """Eikonal (p, v) with radiance carried as basic radiance L / n^2."""
    n, g, _ = _ior_at(ior, z[0:3])
    q, sig = _ea_at(ea, z[0:3])
    dz = np.zeros(10)
    dz[0:3] = z[3:6] / n
    dz[3:6] = g
    dz[6:9] = z[9] * q / (n * n)
    dz[9] = -sig * z[9]
    return dz


def hamiltonian(z, ior) -> float:
    return float(z[3:6] @ z[3:6] - ior.eval(z[0:3]) ** 2)


class EARhs:
    def __init__(self, ea: EAField):
        self.ea = ea

    def f(self, z, s):
        return rhs_ea(z, self.ea)

    def vjp(self, z, s, a):
        q, sig, gq, gs = _ea_grad_at(self.ea, z[0:3])
        T = z[9]
        out = np.zeros(10)
        out[0:3] = T * (a[6:9] @ gq) - a[9] * T * gs
        out[3:6] = a[0:3]
        out[9] = a[6:9] @ q - a[9] * sig
        return out, None


class EikonalRhs:
    def __init__(self, ior):
        self.ior = ior

    def f(self, z, s):
        return rhs_eikonal(z, self.ior)

    def vjp(self, z, s, a):
        n, g, H = _ior_at(self.ior, z[0:3])
        v = z[3:6]
        c = -(a[0:3] @ v) / (n * n)
        out = np.zeros(10)
        out[0:3] = c * g + H @ a[3:6]
        out[3:6] = a[0:3] / n
        out[6:10] = 0.0
        return out, ior_param_vjp(self.ior, z[0:3], c, a[3:6])


class HamiltonRhs:
    def __init__(self, ior):
        self.ior = ior

    def f(self, z, s):
        return rhs_hamilton(z, self.ior)


class CompleteRhs:
    def __init__(self, ior, ea: EAField):
        self.ior = ior
        self.ea = ea

    def f(self, z, s):
        return rhs_complete(z, self.ior, self.ea)


# ------------------------------------------------------------ box geometry

def intersect_box(origin, direction, box: Box):
    """(t_enter, t_exit) clipped to t >= 0, or None if the ray misses."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    hit, t0, t1 = K.intersect_box(o[0], o[1], o[2], d[0], d[1], d[2], box.as_array())
    return (t0, t1) if hit else None


# ----------------------------------------------------- compiled mixed trace

@dataclass
class TraceResult:
    L: np.ndarray
    T: float
    trapped: bool
    direction: np.ndarray
    position: np.ndarray
    s_end: float
    entries: int
    segments: int


def _unpack(out) -> TraceResult:
    return TraceResult(out[0:3].copy(), float(out[3]), bool(out[4]), out[7:10].copy(),
                       out[13:16].copy(), float(out[10]), int(out[11]), int(out[5]))


def trace_mixed(origin, direction, model: Model, config: TraceConfig = TraceConfig(),
                record=False):
    """Single-ray mixed trace. With record=True also returns the segment records."""
    ext, inter, use_inter, ior, use_box, box = model.kernel_args()
    nrec = 2 * (config.max_reentries + 1) + 2
    rec = np.zeros((nrec, K.REC_WIDTH))
    samp = np.empty((1, K.SAMPLE_WIDTH))
    out = np.empty(16)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    K.trace(o, d, 0.0, np.zeros(3), 1.0, ext, inter, use_inter, ior, use_box, box,
            config.h_inside(model.box), config.h_outside, config.far_bound,
            config.budget(model.box), config.max_reentries, config.t_min,
            rec, record, samp, False, out)
    res = _unpack(out)
    if record:
        return res, rec[:res.segments]
    return res


def render_rays(origins, dirs, model: Model, config: TraceConfig = TraceConfig()):
    """Trace a batch of rays; returns the raw (N, 16) kernel output rows."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    ext, inter, use_inter, ior, use_box, box = model.kernel_args()
    outs = np.empty((len(origins), 16))
    K.trace_many(origins, dirs, ext, inter, use_inter, ior, use_box, box,
                 config.h_inside(model.box), config.h_outside, config.far_bound,
                 config.budget(model.box), config.max_reentries, config.t_min, outs)
    return outs


def trace_adjoint(origin, direction, model: Model, config: TraceConfig = TraceConfig(),
                  seed=(1.0, 1.0, 1.0), inv_iters=8):
    """Constant-memory gradient of seed . L_out w.r.t. the raw IoR grid.

    Only segment end points are kept from the forward pass; states inside
    the box are regenerated backwards by inverting the RK4 steps. Returns
    (result, raw_grads (nz, ny, nx), co-state at the ray origin (10,)).
    """
    if not isinstance(model.ior, IorField):
        raise TypeError("trace_adjoint needs a grid IoR field")
    res, rec = trace_mixed(origin, direction, model, config, record=True)
    raw = model.ior.raw.values
    grads = np.zeros(raw.shape[:3])
    a0 = np.zeros(10)
    ext, _, _, ior, _, _ = model.kernel_args()
    K.trace_backward(rec, res.segments, np.asarray(seed, dtype=np.float64), ext, ior,
                     config.h_inside(model.box), config.h_outside, grads, inv_iters, a0)
    return res, grads, a0


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3) float32
    transmittance: np.ndarray  # (H, W)
    trapped: np.ndarray  # (H, W) bool


def render_image(camera, model: Model, config: TraceConfig = TraceConfig()) -> RenderOutput:
    from .scene import generate_rays

    o, d = generate_rays(camera)
    h, w = o.shape[:2]
    outs = render_rays(o, d, model, config)
    img = outs[:, 0:3].reshape(h, w, 3).astype(np.float32)
    return RenderOutput(img, outs[:, 3].reshape(h, w), outs[:, 4].reshape(h, w) > 0)


# ------------------------------------------------- recorded reference trace

class ExpEAStep:
    """Straight EA step with piecewise-constant (midpoint) exact exponential quadrature."""

    def __init__(self, ea: EAField):
        self.ea = ea

    @staticmethod
    def _alpha(sig, h):
        x = sig * h
        if x < 1e-4:
            return (h * (1 - x / 2 + x * x / 6 - x ** 3 / 24),
                    h * h * (-0.5 + x / 3 - x * x / 8))
        e = math.exp(-x)
        return (1 - e) / sig, (h * e * sig - (1 - e)) / (sig * sig)

    def step(self, z, s, h):
        p, d = z[0:3], z[3:6]
        q, sig = _ea_at(self.ea, p + 0.5 * h * d)
        al, _ = self._alpha(sig, h)
        out = z.copy()
        out[0:3] = p + h * d
        out[6:9] = z[6:9] + z[9] * al * q
        out[9] = z[9] * math.exp(-sig * h)
        return out

    def vjp(self, z, s, h, a):
        p, d, T = z[0:3], z[3:6], z[9]
        q, sig, gq, gs = _ea_grad_at(self.ea, p + 0.5 * h * d)
        al, dal = self._alpha(sig, h)
        e = math.exp(-sig * h)
        aL, aT = a[6:9], a[9]
        a_sig = T * dal * (aL @ q) - aT * h * T * e
        a_m = T * al * (aL @ gq) + a_sig * gs
        out = np.zeros(10)
        out[0:3] = a[0:3] + a_m
        out[3:6] = a[3:6] + h * a[0:3] + 0.5 * h * a_m
        out[6:9] = aL
        out[9] = al * (aL @ q) + aT * e
        return out, None


class EntryJunction:
    """v <- n(p) d at the box entry point."""

    def __init__(self, ior):
        self.ior = ior

    def step(self, z, s, h):
        n, _, _ = _ior_at(self.ior, z[0:3])
        out = z.copy()
        out[3:6] = n * z[3:6]
        return out

    def vjp(self, z, s, h, a):
        n, g, _ = _ior_at(self.ior, z[0:3])
        d = z[3:6]
        a_n = a[3:6] @ d
        out = a.copy()
        out[0:3] = a[0:3] + a_n * g
        out[3:6] = n * a[3:6]
        return out, ior_param_vjp(self.ior, z[0:3], a_n, np.zeros(3))


class ExitJunction:
    """d <- v / |v| at the box exit point."""

    def step(self, z, s, h):
        out = z.copy()
        out[3:6] = z[3:6] / np.linalg.norm(z[3:6])
        return out

    def vjp(self, z, s, h, a):
        v = z[3:6]
        vn = np.linalg.norm(v)
        u = v / vn
        out = a.copy()
        out[3:6] = (a[3:6] - (a[3:6] @ u) * u) / vn
        return out, None


def _first_node(s_a, h):
    k = int(math.floor(s_a / h)) + 1
    while k * h <= s_a:
        k += 1
    return k


def reference_trace(origin, direction, model: Model, config: TraceConfig = TraceConfig(),
                    s0=0.0, L0=(0.0, 0.0, 0.0), T0=1.0):
    """Pure-Python mixed trace recording every step map.

    Mirrors the compiled tracer's discretization (global EA step grid, RK4 box
    traversal, junction maps) without interior emission. Returns
    (TraceResult, Trajectory).
    """
    if model.interior is not None:
        raise ValueError("reference_trace does not support interior fields")
    box = model.box
    ior = model.ior
    ea_step = ExpEAStep(model.exterior)
    eik = RK4Stepper(EikonalRhs(ior)) if ior is not None else None
    entry = EntryJunction(ior) if ior is not None else None
    leave = ExitJunction()
    h_out = config.h_outside
    h_in = config.h_inside(box)
    far = config.far_bound
    budget = config.budget(box)
    traj = Trajectory()
    z = state(origin, direction, L0, T0)
    s = s0
    entries = 0
    trapped = False
    nseg = 0
    while True:
        t0 = None
        if box is not None and entries <= config.max_reentries and s < far:
            hit = intersect_box(z[0:3], z[3:6], box)
            if hit is not None and s + hit[0] < far:
                t0 = hit[0]
        s_b = s + t0 if t0 is not None else far
        terminated = False
        if s_b > s:
            k = _first_node(s, h_out)
            cur = s
            while True:
                nxt = k * h_out
                last = nxt >= s_b
                if last:
                    nxt = s_b
                traj.append(ea_step, cur, nxt - cur, z)
                z = ea_step.step(z, cur, nxt - cur)
                if z[9] < config.t_min:
                    terminated = True
                    break
                if last:
                    break
                cur = nxt
                k += 1
            # positions are advanced step by step; snap to the segment end like the kernel
            s = s_b
        nseg += 1
        if terminated or t0 is None:
            break
        entries += 1
        z[0:3] = np.clip(z[0:3], box.lo, box.hi)
        traj.append(entry, s, 0.0, z)
        z = entry.step(z, s, 0.0)
        K_steps = 0
        while True:
            traj.append(eik, s + K_steps * h_in, h_in, z)
            z = eik.step(z, s + K_steps * h_in, h_in)
            K_steps += 1
            if not box.contains(z[0:3]):
                break
            if K_steps * h_in > budget:
                trapped = True
                break
        s += K_steps * h_in
        nseg += 1
        traj.append(leave, s, 0.0, z)
        z = leave.step(z, s, 0.0)
        if trapped:
            break
    if not np.all(np.isfinite(z)):
        raise SolverError("non-finite state in reference trace")
    traj.final = z.copy()
    res = TraceResult(z[6:9].copy(), float(z[9]), trapped, z[3:6].copy(), z[0:3].copy(),
                      s, entries, nseg)
    return res, traj
