"""Numerical validation suites shared by the command line and the test-suite.

Each function returns a plain dict of measured quantities plus a ``passed`` flag
computed against the stated tolerance.
"""
from __future__ import annotations

import math
import time

import numpy as np

from .fields import (Box, EAField, GaussianBlob, GridField, IorField, Luneburg, softplus,
                     softplus_inv)
from .odesolve import RK4Stepper, backprop_recorded, finite_diff_grad
from .transport import (EikonalRhs, Model, TraceConfig, hamiltonian, reference_trace,
                        render_rays, state, trace_adjoint, trace_mixed)

UNIT_BOX = Box([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])


def _rel(a, b):
    nb = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / nb if nb > 0 else float(np.linalg.norm(a))


def random_instance(seed, size=8):
    """Random raw IoR grid on the unit box, smooth random exterior grid, one ray."""
    rng = np.random.default_rng(seed)
    box = UNIT_BOX
    raw = rng.uniform(-3.0, -0.5, (size, size, size, 1))
    ior = IorField(GridField(box.lo, box.size, raw))
    q = GridField([-3.0] * 3, [6.0] * 3, rng.uniform(0.0, 1.0, (6, 6, 6, 3)))
    s = GridField([-3.0] * 3, [6.0] * 3, rng.uniform(0.0, 0.3, (6, 6, 6, 1)))
    ext = EAField(q, s).masked(box)
    origin = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 3.0])
    aim = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 0.0])
    d = aim - origin
    d /= np.linalg.norm(d)
    cfg = TraceConfig(far_bound=8.0, steps_outside=64)
    return Model(ext, ior, box), origin, d, cfg


def gradcheck(seed=0, size=8, eps=1e-4, inv_iters=8):
    """Constant-memory adjoint vs recorded backprop vs central differences,
    L1 loss on the radiance of one mixed-trace ray."""
    t0 = time.time()
    model, o, d, cfg = random_instance(seed, size)
    res = trace_mixed(o, d, model, cfg)
    target = res.L + np.array([0.1, -0.1, 0.05])
    seed_l = np.sign(res.L - target) / 3.0
    _, g_adj, _ = trace_adjoint(o, d, model, cfg, seed_l, inv_iters)
    _, traj = reference_trace(o, d, model, cfg)
    a1 = np.zeros(10)
    a1[6:9] = seed_l
    _, g_rec = backprop_recorded(traj, a1)
    box = model.box
    ext = model.exterior

    def loss(raw):
        m = Model(ext, IorField(GridField(box.lo, box.size, raw[..., None])), box)
        return float(np.abs(trace_mixed(o, d, m, cfg).L - target).sum() / 3.0)

    g_fd = finite_diff_grad(loss, model.ior.raw.values[..., 0], eps)
    out = {"seed": seed, "adjoint_vs_recorded": _rel(g_adj, g_rec),
           "adjoint_vs_fd": _rel(g_adj, g_fd), "recorded_vs_fd": _rel(g_rec, g_fd),
           "grad_norm": float(np.linalg.norm(g_fd)), "seconds": time.time() - t0}
    out["passed"] = out["adjoint_vs_recorded"] <= 1e-5 and out["adjoint_vs_fd"] <= 1e-3
    return out


def luneburg_focus(n_rays=64, steps=512, R=1.0, max_impact=0.9):
    """Parallel rays along +z through a Luneburg sphere; miss distance of each exit
    point from the opposite rim point, relative to R."""
    lens = Luneburg(np.zeros(3), R)
    stepper = RK4Stepper(EikonalRhs(lens))
    h = 2.0 * R / steps
    # impact points on a sunflower spiral inside the disk of radius max_impact
    k = np.arange(n_rays) + 0.5
    rad = max_impact * R * np.sqrt(k / n_rays)
    ang = k * math.pi * (3.0 - math.sqrt(5.0))
    misses = []
    focus = np.array([0.0, 0.0, R])
    for x, y in zip(rad * np.cos(ang), rad * np.sin(ang)):
        z0 = -math.sqrt(max(R * R - x * x - y * y, 0.0))
        z = state([x, y, z0], [0.0, 0.0, 1.0])
        prev = z
        for i in range(8 * steps):
            prev, z = z, stepper.step(z, i * h, h)
            if np.linalg.norm(z[0:3]) >= R and i > 0:
                break
        r0 = np.linalg.norm(prev[0:3])
        r1 = np.linalg.norm(z[0:3])
        w = (R - r0) / (r1 - r0) if r1 != r0 else 1.0
        p = prev[0:3] + w * (z[0:3] - prev[0:3])
        misses.append(np.linalg.norm(p - focus) / R)
    worst = float(max(misses))
    return {"max_miss_over_R": worst, "mean_miss_over_R": float(np.mean(misses)),
            "passed": worst < 0.01}


def snell_field(n2=1.5, dims=17, cells=4, box=UNIT_BOX):
    """Raw grid on the box: n = 1 above z = 0, n2 below, smoothstep in n over `cells`.

    The profile is shaped in n and mapped node-wise through softplus_inv; a ramp
    that is linear in raw would pack nearly the whole jump into one cell.
    """
    g = GridField.zeros(box.lo, box.size, (dims, dims, dims), dtype=np.float64)
    zc = g.node_positions()[..., 2]
    width = cells * g.cell[2]
    t = np.clip((0.5 * width - zc) / width, 0.0, 1.0)
    step = t * t * (3.0 - 2.0 * t)
    excess = np.maximum((n2 - 1.0) * step, float(softplus(-10.0)))
    return IorField(g.with_values(softplus_inv(excess)[..., None]))


def snell_check(angles=(15.0, 30.0, 45.0), n2=1.5, tol_deg=0.5):
    ior = snell_field(n2)
    model = Model(EAField.empty().masked(UNIT_BOX), ior, UNIT_BOX)
    cfg = TraceConfig(far_bound=6.0)
    rows = []
    for a in angles:
        th = math.radians(a)
        d = np.array([math.sin(th), 0.0, -math.cos(th)])
        entry = np.array([-0.4, 0.0, 0.5])
        res = trace_mixed(entry - 1.0 * d, d, model, cfg)
        out = res.direction
        th2 = math.degrees(math.atan2(abs(out[0]), abs(out[2])))
        expect = math.degrees(math.asin(math.sin(th) / n2))
        rows.append({"incidence_deg": a, "exit_deg": th2, "snell_deg": expect,
                     "error_deg": abs(th2 - expect)})
    return {"rows": rows, "max_error_deg": max(r["error_deg"] for r in rows),
            "passed": all(r["error_deg"] < tol_deg for r in rows)}


def blob_field(box=UNIT_BOX, amplitude=0.3, radius_frac=0.15):
    return GaussianBlob(box.center, amplitude, radius_frac * box.diag)


def hamiltonian_drift(steps=128, box=UNIT_BOX, ior=None, origin=None, direction=None):
    """Max |v|^2 - n^2 over one box traversal with fixed RK4 step diag/steps."""
    ior = ior if ior is not None else blob_field(box)
    d = np.asarray(direction if direction is not None else [0.2, 0.1, -1.0], dtype=float)
    d /= np.linalg.norm(d)
    p = np.asarray(origin if origin is not None else [0.05, -0.08, 0.5], dtype=float)
    z = state(p, ior.eval(p) * d)
    stepper = RK4Stepper(EikonalRhs(ior))
    h = box.diag / steps
    worst = abs(hamiltonian(z, ior))
    for i in range(4 * steps):
        z = stepper.step(z, i * h, h)
        worst = max(worst, abs(hamiltonian(z, ior)))
        if not box.contains(z[0:3]):
            break
    return worst


def conservation_check(steps=128):
    d1 = hamiltonian_drift(steps)
    d2 = hamiltonian_drift(2 * steps)
    ratio = d1 / d2 if d2 > 0 else math.inf
    return {"drift": d1, "drift_half_step": d2, "ratio": ratio,
            "passed": d1 < 1e-6 and ratio >= 8.0}


def degeneracy_check(scene=None, camera_index=0, tol=1e-5):
    """Mixed trace with raw = -10 everywhere vs the straight EA render of one frame."""
    from .scene import build_scene, default_spec, generate_rays

    sc = scene or build_scene(default_spec())
    cam = sc.cameras[camera_index]
    o, d = generate_rays(cam)
    cfg = sc.trace_config()
    ior = IorField.constant(sc.box, (64, 64, 64))
    mixed = render_rays(o, d, Model(sc.exterior, ior, sc.box), cfg)
    straight = render_rays(o, d, Model(sc.exterior), cfg)
    diff = float(np.max(np.abs(mixed[:, 0:3] - straight[:, 0:3])))
    return {"max_abs_diff": diff, "pixels": int(len(o.reshape(-1, 3))), "passed": diff < tol}


def run_all():
    return {"luneburg": luneburg_focus(), "snell": snell_check(),
            "conservation": conservation_check(), "degeneracy": degeneracy_check()}
