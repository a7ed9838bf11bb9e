"""Staged reconstruction: background EA grids, progressive IoR fit, interior radiance.

Also the constant-IoR ("trivial") baseline, evaluation and checkpoints.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.ndimage import gaussian_filter
from scipy.sparse.linalg import lsqr

from . import _kernels as K
from . import imageio
from .fields import (RAW_INIT, Box, EAField, GridField, IorField, bake_masked_grid,
                     bandwidth_schedule, pyramid_field, read_grid, sigmoid, softplus,
                     softplus_inv, write_grid)
from .scene import Dataset, generate_rays
from .transport import Model, TraceConfig, render_rays

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


# ----------------------------------------------------------------- loss/adam

def loss_l1(rendered, target):
    """Mean absolute error and its (sub)gradient w.r.t. rendered."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    diff = r - t
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 5e-4
    level: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, lr=5e-4):
        return cls(np.zeros_like(params, dtype=np.float64),
                   np.zeros_like(params, dtype=np.float64), 0, lr)


def adam_step(params, grads, state: OptimState, lr=None):
    """In-place Adam update; returns False (and leaves everything untouched)
    when the gradient has non-finite entries."""
    if not np.all(np.isfinite(grads)):
        log.warning("non-finite gradient at step %d: batch dropped", state.t)
        return False
    lr = state.lr if lr is None else lr
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return True


# -------------------------------------------------------------------- config

@dataclass
class FitConfig:
    batch_rays: int = 1024
    iters_ior: int = 5000
    iters_interior: int = 10000
    iters_background: int = 2000
    bandwidth0: float = 0.08
    doubling_every: int = 1000
    levels: int = 5
    lr: float = 5e-4
    lr_ior: float = 5e-4
    lr_background: float = 0.05
    lr_interior: float = 0.05
    seed: int = 0
    ior_dims: int = 64
    background_dims: int = 64
    interior_dims: int = 32
    bake_dims: int = 128
    steps_inside: int = 128
    steps_outside: int = 128
    interior_steps_outside: int = 512
    far_bound: float = 10.0
    inv_iters: int = 0
    grad_blur: float = 0.0  # std (voxels) of an optional Gaussian on IoR gradients
    lr_level_decay: float = 1.0  # lr_ior multiplier per bandwidth level
    max_trapped_fraction: float = 0.5
    progression: str = "fixed"  # or "error"
    error_window: int = 100
    error_threshold: float = 1e-3

    def __post_init__(self):
        for k in ("batch_rays", "iters_ior", "iters_interior", "iters_background",
                  "doubling_every", "levels", "ior_dims", "background_dims",
                  "interior_dims", "bake_dims", "steps_inside", "steps_outside"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        for k in ("bandwidth0", "lr", "lr_ior", "lr_background", "lr_interior", "far_bound"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.grad_blur < 0 or not 0 < self.lr_level_decay <= 1:
            raise ValueError("grad_blur must be >= 0 and lr_level_decay in (0, 1]")
        if self.progression not in ("fixed", "error"):
            raise ValueError("progression must be 'fixed' or 'error'")

    def trace_config(self, interior=False) -> TraceConfig:
        return TraceConfig(steps_inside=self.steps_inside,
                           steps_outside=self.interior_steps_outside if interior
                           else self.steps_outside,
                           far_bound=self.far_bound)

    def to_json(self):
        return asdict(self)


@dataclass
class FitLog:
    rows: list = field(default_factory=list)  # (iteration, loss, level)
    seconds: float = 0.0
    skipped: int = 0

    def write_csv(self, path):
        lines = ["iteration,loss,level"]
        lines += [f"{i},{loss:.9g},{lvl}" for i, loss, lvl in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")


def dataset_rays(views):
    """Concatenated origins, directions and target radiance of all pixels."""
    os_, ds_, ts_ = [], [], []
    for v in views:
        o, d = generate_rays(v.camera)
        os_.append(o.reshape(-1, 3))
        ds_.append(d.reshape(-1, 3))
        ts_.append(np.asarray(v.image, dtype=np.float64).reshape(-1, 3))
    return np.concatenate(os_), np.concatenate(ds_), np.concatenate(ts_)


# ------------------------------------------------------------- EA grid fits

class _EAParams:
    """Reparameterized EA grid: sigma = softplus(rs), q = sigma * sigmoid(rc).

    Nodes inside ``box`` are forced to exactly zero in the realized field.
    """

    def __init__(self, origin, extent, dims, box: Box | None, mask_inside: bool,
                 sigma0=0.01):
        nx, ny, nz = dims
        self.origin = np.asarray(origin, dtype=np.float64)
        self.extent = np.asarray(extent, dtype=np.float64)
        self.rs = np.full((nz, ny, nx, 1), float(softplus_inv(sigma0)))
        self.rc = np.zeros((nz, ny, nx, 3))
        self.box = box
        pts = GridField.zeros(origin, extent, dims).node_positions()
        self.inside = (box.contains(pts) if (box is not None and mask_inside)
                       else np.zeros(pts.shape[:3], dtype=bool))

    def fields(self):
        sig = softplus(self.rs)
        q = sig * sigmoid(self.rc)
        sig[self.inside] = 0.0
        q[self.inside] = 0.0
        return GridField(self.origin, self.extent, q), GridField(self.origin, self.extent, sig)

    def chain(self, g4):
        """Grid-value gradients (..., 4) -> (grad rs, grad rc)."""
        gq = g4[..., 0:3]
        gs = g4[..., 3:4]
        sig = softplus(self.rs)
        c = sigmoid(self.rc)
        g_rc = gq * sig * c * (1 - c)
        g_rs = (gs + np.sum(gq * c, axis=-1, keepdims=True)) * sigmoid(self.rs)
        g_rc[self.inside] = 0.0
        g_rs[self.inside] = 0.0
        return g_rs, g_rc


def _fit_ea(params: _EAParams, rays, make_model, target, iters, batch, lr, tcfg, seed,
            ior_model: Model | None = None, max_samp=None):
    o, d, t = rays
    rng = np.random.default_rng(seed)
    st_s = OptimState.like(params.rs, lr)
    st_c = OptimState.like(params.rc, lr)
    flog = FitLog()
    t0 = time.time()
    if max_samp is None:
        max_samp = tcfg.steps_outside + 4 * (tcfg.max_reentries + 1) + \
            (tcfg.max_reentries + 1) * (tcfg.steps_inside * int(math.ceil(
                tcfg.arc_budget_factor)) + 2) + 8
    for it in range(iters):
        idx = np.sort(rng.choice(len(o), size=min(batch, len(o)), replace=False))
        model = make_model(params)
        ext, inter, use_inter, ior, use_box, box = model.kernel_args()
        grid = params.fields()[0]
        grads = np.zeros(grid.values.shape[:3] + (4,))
        renders = np.empty((len(idx), 3))
        total = K.sample_batch_grad(o[idx], d[idx], t[idx], ext, inter, use_inter, ior,
                                    use_box, box, tcfg.h_inside(model.box), tcfg.h_outside,
                                    tcfg.far_bound, tcfg.budget(model.box),
                                    tcfg.max_reentries, tcfg.t_min, target, max_samp,
                                    grads, renders)
        loss = total / (3 * len(idx))
        if not math.isfinite(loss):
            raise FitError(f"loss diverged at iteration {it}")
        g_rs, g_rc = params.chain(grads)
        ok = adam_step(params.rs, g_rs, st_s) and adam_step(params.rc, g_rc, st_c)
        if not ok:
            flog.skipped += 1
        flog.rows.append((it, loss, 0))
    flog.seconds = time.time() - t0
    return flog


def fit_background(dataset: Dataset, box: Box | None, bounds: Box, dims=(64, 64, 64),
                   config: FitConfig = FitConfig()):
    """Straight-ray EA grid fit over ``bounds``; nodes inside the box stay zero.

    Returns (emission GridField, absorption GridField, FitLog).
    """
    params = _EAParams(bounds.lo, bounds.size, dims, box, mask_inside=True)
    tcfg = config.trace_config()
    rays = dataset_rays(dataset.train_views())

    def make_model(p):
        q, s = p.fields()
        ea = EAField(q, s)
        return Model(ea.masked(box) if box is not None else ea)

    flog = _fit_ea(params, rays, make_model, 0, config.iters_background, config.batch_rays,
                   config.lr_background, tcfg, config.seed)
    q, s = params.fields()
    return q, s, flog


def fit_interior(dataset: Dataset, ior, exterior: EAField, box: Box,
                 config: FitConfig = FitConfig(), dims=None):
    """Interior EA grids on the box with IoR and exterior frozen.

    Paths are traced with the frozen IoR; the interior radiance is accumulated
    with basic-radiance weighting 1/n^2 at RK4 step midpoints.
    Returns (emission GridField, absorption GridField, FitLog).
    """
    n = dims or (config.interior_dims,) * 3
    params = _EAParams(box.lo, box.size, n, None, mask_inside=False, sigma0=softplus(RAW_INIT))
    tcfg = config.trace_config(interior=True)
    o, d, t = dataset_rays(dataset.train_views())
    hits = _box_hits(o, d, box, tcfg.far_bound)
    rays = (o[hits], d[hits], t[hits])
    if hits.sum() == 0:
        raise FitError("no training ray crosses the refractive box")

    def make_model(p):
        q, s = p.fields()
        return Model(exterior, ior, box, EAField(q, s))

    flog = _fit_ea(params, rays, make_model, 1, config.iters_interior, config.batch_rays,
                   config.lr_interior, tcfg, config.seed)
    q, s = params.fields()
    return q, s, flog


# ------------------------------------------------------------------ IoR fit

def _box_hits(o, d, box: Box, far):
    out = np.zeros(len(o), dtype=bool)
    b = box.as_array()
    for i in range(len(o)):
        hit, t0, _ = K.intersect_box(o[i, 0], o[i, 1], o[i, 2], d[i, 0], d[i, 1], d[i, 2], b)
        out[i] = hit and t0 < far
    return out


def background_pyramid(exterior: EAField, box: Box, bounds: Box, config: FitConfig):
    kernels = bandwidth_schedule(config.bandwidth0, config.levels)
    return bake_masked_grid(exterior, box, bounds.lo, bounds.size, (config.bake_dims,) * 3,
                            kernels)


def fit_ior(dataset: Dataset, pyramid, box: Box, config: FitConfig = FitConfig(),
            init: IorField | None = None, callback=None):
    """Progressive eikonal fit of the raw IoR grid.

    ``pyramid`` is a list of (Q_i, P_i) baked background levels, coarse to fine.
    Batches contain only rays that reach the box. Returns (IorField, FitLog).
    """
    tcfg = config.trace_config()
    dims = (config.ior_dims,) * 3
    ior = IorField(init.raw.copy()) if init is not None else IorField.constant(box, dims)
    raw = ior.raw.values[..., 0].astype(np.float64)
    o, d, t = dataset_rays(dataset.train_views())
    hits = _box_hits(o, d, box, tcfg.far_bound)
    o, d, t = o[hits], d[hits], t[hits]
    if len(o) == 0:
        raise FitError("no training ray crosses the refractive box")
    rng = np.random.default_rng(config.seed)
    state = OptimState.like(raw, config.lr_ior)
    flog = FitLog()
    t_start = time.time()
    level = -1
    entry = None
    ext = None
    window = []
    h_in = tcfg.h_inside(box)
    boxa = box.as_array()
    for it in range(config.iters_ior):
        if config.progression == "fixed":
            want = min(it // config.doubling_every, len(pyramid) - 1)
        else:
            want = max(level, 0)
            if len(window) >= 2 * config.error_window:
                a = np.median(window[-2 * config.error_window:-config.error_window])
                b = np.median(window[-config.error_window:])
                if abs(a - b) < config.error_threshold * max(a, 1e-12):
                    want = min(level + 1, len(pyramid) - 1)
                    window = []
        if want != level:
            level = want
            state.level = level
            state.lr = config.lr_ior * config.lr_level_decay ** level
            ext = pyramid_field(pyramid[level], box).kernel_tuple()
            entry = np.zeros((len(o), 9))
            K.march_to_entry(o, d, ext, boxa, tcfg.h_outside, tcfg.far_bound, tcfg.t_min,
                             entry)
            live = np.nonzero(entry[:, 0] > 0)[0]
            log.info("level %d: %d live rays", level, len(live))
        idx = np.sort(rng.choice(live, size=min(config.batch_rays, len(live)), replace=False))
        z0 = np.ascontiguousarray(np.concatenate([entry[idx, 2:5], entry[idx, 5:9]], axis=1))
        grads = np.zeros_like(raw)
        renders = np.empty((len(idx), 3))
        flags = np.zeros(len(idx))
        active = np.ones(len(idx), dtype=np.bool_)
        kt = (0, raw, ior.raw.origin, ior.raw.scale, np.zeros(8))
        total = K.ior_batch_grad(z0, entry[idx, 1].copy(), d[idx], t[idx], active, ext, kt,
                                 boxa, h_in, tcfg.h_outside, tcfg.far_bound,
                                 tcfg.budget(box), tcfg.max_reentries, tcfg.t_min,
                                 config.inv_iters, grads, renders, flags)
        loss = total / (3 * len(idx))
        if not math.isfinite(loss):
            raise FitError(f"loss diverged at iteration {it}")
        trapped = flags.mean()
        if trapped > config.max_trapped_fraction:
            log.warning("iteration %d: %.0f%% rays trapped, batch skipped", it, 100 * trapped)
            flog.skipped += 1
        else:
            if config.grad_blur > 0:
                grads = gaussian_filter(grads, config.grad_blur, mode="nearest")
            if not adam_step(raw, grads, state):
                flog.skipped += 1
        flog.rows.append((it, loss, level))
        window.append(loss)
        if callback is not None:
            callback(it, loss, level)
    flog.seconds = time.time() - t_start
    fitted = IorField(GridField(ior.raw.origin, ior.raw.extent, raw[..., None].copy()))
    return fitted, flog


# ----------------------------------------------------------- trivial baseline

def _surface_points(P: GridField, o, d, box: Box, tau, steps=128):
    """Front/back points where straight-ray opacity inside the box first exceeds tau."""
    b = box.as_array()
    hit, t0, t1 = K.intersect_box(o[0], o[1], o[2], d[0], d[1], d[2], b)
    if not hit:
        return None
    h = (t1 - t0) / steps
    ts = t0 + (np.arange(steps) + 0.5) * h
    sig = np.empty((steps, 1))
    K.grid_sample_many(P.kernel_values(), P.origin, P.scale, o + ts[:, None] * d, sig)
    tau_f = 1.0 - np.exp(-np.cumsum(sig[:, 0]) * h)
    tau_b = 1.0 - np.exp(-np.cumsum(sig[::-1, 0]) * h)
    if not (np.any(tau_f > tau) and np.any(tau_b > tau)):
        return None
    i_f = int(np.argmax(tau_f > tau))
    i_b = steps - 1 - int(np.argmax(tau_b > tau))
    if i_b < i_f:
        return None
    return t0, ts[i_f] - 0.5 * h, ts[i_b] + 0.5 * h, t1


def baseline_trivial(absorption: GridField, box: Box, constant_n, rays, dims=(32, 32, 32),
                     tau=0.5, samples=10, damp=1e-2):
    """Constant IoR between opacity-thresholded front/back surfaces, fitted to a raw grid.

    ``rays`` is (origins, directions). Each ray that crosses a surface pair
    contributes ``samples`` point targets inside (n = constant_n) and the same
    number on each side outside (n = 1, i.e. raw at its initial value).
    """
    origins, dirs = rays
    base = IorField.constant(box, dims)
    raw0 = base.raw.values[..., 0]
    inside_raw = float(softplus_inv(constant_n - 1.0))
    pts, vals = [], []
    for o, d in zip(np.asarray(origins, float), np.asarray(dirs, float)):
        s = _surface_points(absorption, o, d, box, tau)
        if s is None:
            continue
        t0, tf, tb, t1 = s
        u = (np.arange(samples) + 0.5) / samples
        for a, b, v in ((t0, tf, RAW_INIT), (tf, tb, inside_raw), (tb, t1, RAW_INIT)):
            if b > a:
                tt = a + u * (b - a)
                pts.append(o + tt[:, None] * d)
                vals.append(np.full(samples, v))
    if not pts:
        return base
    pts = np.concatenate(pts)
    vals = np.concatenate(vals)
    A = _trilinear_matrix(base.raw, pts)
    x = lsqr(A, vals - A @ raw0.ravel(), damp=damp)[0]
    raw = raw0 + x.reshape(raw0.shape)
    return IorField(base.raw.with_values(raw[..., None]))


def _trilinear_matrix(grid: GridField, pts) -> csr_matrix:
    nx, ny, nz = grid.dims
    u = (pts - grid.origin) * grid.scale
    u = np.clip(u, 0.0, np.array([nx, ny, nz]) - 1.0)
    i = np.minimum(np.floor(u).astype(int), np.array([nx, ny, nz]) - 2)
    f = u - i
    rows, cols, w = [], [], []
    r = np.arange(len(pts))
    for kz in (0, 1):
        for ky in (0, 1):
            for kx in (0, 1):
                wx = f[:, 0] if kx else 1 - f[:, 0]
                wy = f[:, 1] if ky else 1 - f[:, 1]
                wz = f[:, 2] if kz else 1 - f[:, 2]
                col = ((i[:, 2] + kz) * ny + (i[:, 1] + ky)) * nx + (i[:, 0] + kx)
                rows.append(r)
                cols.append(col)
                w.append(wx * wy * wz)
    return csr_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(pts), nx * ny * nz))


# ---------------------------------------------------------------- evaluation

def evaluate(model: Model, views, config: TraceConfig, indices=None):
    """Render each view and score it; returns the metrics report and the renders."""
    rows = []
    renders = []
    for k, v in enumerate(views):
        o, d = generate_rays(v.camera)
        w, h = v.camera.resolution
        img = render_rays(o, d, model, config)[:, 0:3].reshape(h, w, 3).astype(np.float32)
        renders.append(img)
        rows.append({"index": int(indices[k]) if indices is not None else k,
                     "psnr_db": imageio.psnr(img, v.image),
                     "ssim": imageio.ssim(img, v.image)})
    report = {"views": rows,
              "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])) if rows else 0.0,
              "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else 0.0}
    return report, renders


def compare_images(a_list, b_list):
    rows = [{"index": i, "psnr_db": imageio.psnr(a, b), "ssim": imageio.ssim(a, b)}
            for i, (a, b) in enumerate(zip(a_list, b_list))]
    return {"views": rows,
            "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])) if rows else 0.0,
            "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else 0.0}


def write_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path):
    rep = json.loads(Path(path).read_text())
    for k in ("views", "mean_psnr_db", "mean_ssim"):
        if k not in rep:
            raise ValueError(f"{path}: report lacks {k!r}")
    return rep


# --------------------------------------------------------------- checkpoints

def save_checkpoint(out_dir, grids: dict, box: Box | None, stage: str, config: dict,
                    extra: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {}
    for name, g in sorted(grids.items()):
        fname = f"{name}.eikgrid"
        write_grid(out / fname, g)
        names[name] = fname
    doc = {"grids": names, "box": box.to_json() if box is not None else None,
           "stage": stage, "config": config}
    if extra:
        doc.update(extra)
    (out / "model.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path):
    """Returns (dict name -> GridField, model.json document)."""
    root = Path(path)
    if root.is_file():
        root = root.parent
    doc = json.loads((root / "model.json").read_text())
    grids = {}
    for name, fname in doc["grids"].items():
        p = root / fname
        if not p.exists():
            raise FileNotFoundError(f"{p}: named in {root / 'model.json'} but missing")
        grids[name] = read_grid(p)
    return grids, doc
