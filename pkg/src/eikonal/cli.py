"""Command-line driver: scene synthesis, staged fitting, rendering, metrics and checks.

Configuration is one JSON file (``--config``) with optional sections ``scene``
(a preset name or a full scene spec), ``fit`` (FitConfig fields) and ``seed``;
flags override the file. Every command that writes an output directory also
writes ``config.resolved.json`` there.

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checks, imageio
from .fields import RAW_INIT, Box, EAField, GridField, IorField, softplus_inv
from .odesolve import SolverError
from .recon import (FitConfig, FitError, background_pyramid, evaluate, fit_background,
                    fit_interior, fit_ior, load_checkpoint, save_checkpoint, write_report)
from .scene import (Camera, ConfigError, DatasetError, SceneSpec, build_scene, default_spec,
                    estimate_box, generate_rays, load_dataset, make_dataset, save_dataset)
from .transport import Model, TraceConfig, render_rays

log = logging.getLogger("eikonal")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunConfig:
    command: str
    stage: str | None = None
    scene: dict = field(default_factory=lambda: default_spec().to_json())
    fit: dict = field(default_factory=lambda: FitConfig().to_json())
    seed: int = 0
    threads: int | None = None
    out: str | None = None
    inputs: dict = field(default_factory=dict)

    def fit_config(self) -> FitConfig:
        try:
            return FitConfig(**self.fit)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad fit configuration: {e}") from None

    def scene_spec(self) -> SceneSpec:
        return SceneSpec.from_json(self.scene)

    def write(self, out_dir):
        path = Path(out_dir) / "config.resolved.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _read_config_file(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(doc) - {"scene", "fit", "seed"}
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    return doc


def resolve(args) -> RunConfig:
    """Defaults, then the config file, then flags."""
    cfg = RunConfig(command=args.command, stage=getattr(args, "stage", None))
    doc = _read_config_file(args.config) if args.config else {}
    scene = doc.get("scene")
    if isinstance(scene, str):
        cfg.scene = default_spec(scene).to_json()
    elif isinstance(scene, dict):
        cfg.scene = SceneSpec.from_json(scene).to_json()
    elif scene is not None:
        raise ConfigError("scene must be a preset name or an object")
    if getattr(args, "scene", None):
        cfg.scene = default_spec(args.scene).to_json()
    fit = dict(cfg.fit)
    extra = set(doc.get("fit", {})) - set(fit)
    if extra:
        raise ConfigError(f"unknown fit fields {sorted(extra)}")
    fit.update(doc.get("fit", {}))
    for f in fields(FitConfig):
        v = getattr(args, f"fit_{f.name}", None)
        if v is not None:
            fit[f.name] = v
    cfg.seed = int(doc.get("seed", 0)) if args.seed is None else args.seed
    fit["seed"] = cfg.seed
    cfg.fit = fit
    cfg.fit_config()  # validate now so bad values exit as configuration errors
    cfg.threads = args.threads
    cfg.out = str(args.out) if getattr(args, "out", None) else None
    return cfg


def _set_threads(n):
    if n is None:
        return
    import numba

    if n < 1:
        raise ConfigError("--threads must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError(f"{cfg.command} needs --out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _gt_ior_grid(scene, dims):
    """Ground-truth IoR sampled at grid nodes and mapped to the raw parameterization."""
    g = GridField.zeros(scene.box.lo, scene.box.size, (dims,) * 3, dtype=np.float64)
    if scene.ior is None:
        return g.with_values(np.full(g.values.shape, RAW_INIT))
    n = scene.ior.eval(g.node_positions().reshape(-1, 3)).reshape(g.values.shape)
    floor = float(np.log1p(np.exp(RAW_INIT)))
    return g.with_values(softplus_inv(np.maximum(n - 1.0, floor)))


# ------------------------------------------------------------------- commands

def cmd_make_scene(cfg: RunConfig):
    spec = cfg.scene_spec()
    scene = build_scene(spec)
    fc = cfg.fit_config()
    out = _out_dir(cfg)
    tcfg = TraceConfig(steps_inside=fc.steps_inside, far_bound=spec.far_bound,
                       steps_outside=fc.interior_steps_outside if spec.sticks
                       else fc.steps_outside)
    ds = make_dataset(scene, seed=cfg.seed, with_masks=True, config=tcfg)
    save_dataset(out, ds)
    (out / "scene.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n")
    (out / "box.json").write_text(json.dumps(scene.box.to_json(), indent=2) + "\n")
    if any(v.mask.any() for v in ds.views):
        est = estimate_box([v.mask for v in ds.views], [v.depth for v in ds.views],
                           [v.camera for v in ds.views])
        (out / "box_estimated.json").write_text(json.dumps(est.to_json(), indent=2) + "\n")
    save_checkpoint(out / "gt", {"ior": _gt_ior_grid(scene, fc.ior_dims)}, scene.box, "gt",
                    {"scene": spec.to_json()})
    cfg.write(out)
    log.info("wrote %d views to %s", len(ds.views), out)
    return EXIT_OK


def _dataset(cfg: RunConfig):
    path = cfg.inputs.get("dataset")
    if not path:
        raise ConfigError("--dataset is required")
    return load_dataset(path)


def _exterior(cfg: RunConfig, ds, box):
    """Background from a checkpoint if given, else the analytic scene of the dataset."""
    ck = cfg.inputs.get("background")
    if ck:
        grids, _ = _checkpoint(ck, ("emission", "absorption"))
        q, s = grids["emission"], grids["absorption"]
        ext = EAField(q, s)
        bounds = Box(q.origin, q.origin + q.extent)
    else:
        spec = ds.scene_spec()
        if spec is None:
            raise ConfigError("no --background checkpoint and the dataset has no scene.json")
        ext = build_scene(spec).exterior
        bounds = Box(spec.bounds_min, spec.bounds_max)
    return (ext.masked(box) if box is not None else ext), bounds


def _checkpoint(path, names):
    try:
        grids, doc = load_checkpoint(path)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    except (OSError, ValueError) as e:
        raise ConfigError(f"{path}: unreadable checkpoint ({e})") from None
    missing = [n for n in names if n not in grids]
    if missing:
        raise ConfigError(f"{path}: checkpoint lacks grids {missing}")
    return grids, doc


def _test_indices(ds):
    return ds.split["test"]


def cmd_fit(cfg: RunConfig):
    fc = cfg.fit_config()
    ds = _dataset(cfg)
    box = ds.box()
    stage = cfg.stage
    if stage in ("ior", "interior") and box is None:
        raise ConfigError(f"{ds.root}: no box.json; the {stage} stage needs the refractive box")
    out = _out_dir(cfg)
    cfg.write(out)
    test = ds.test_views()
    idx = _test_indices(ds)
    if stage == "background":
        spec = ds.scene_spec() or cfg.scene_spec()
        bounds = Box(spec.bounds_min, spec.bounds_max)
        q, s, flog = fit_background(ds, box, bounds, (fc.background_dims,) * 3, fc)
        save_checkpoint(out, {"emission": q, "absorption": s}, box, "background", fc.to_json())
        ext = EAField(q, s)
        model = Model(ext.masked(box) if box is not None else ext)
        report, renders = evaluate(model, test, fc.trace_config(), idx)
    elif stage == "ior":
        ext, bounds = _exterior(cfg, ds, box)
        init = None
        if cfg.inputs.get("init"):
            grids, _ = _checkpoint(cfg.inputs["init"], ("ior",))
            init = IorField(grids["ior"])
        pyramid = background_pyramid(ext, box, bounds, fc)
        ior, flog = fit_ior(ds, pyramid, box, fc, init=init)
        save_checkpoint(out, {"ior": ior.raw}, box, "ior", fc.to_json())
        report, renders = evaluate(Model(ext, ior, box), test, fc.trace_config(), idx)
        base, _ = evaluate(Model(ext), test, fc.trace_config(), idx)
        write_report(out / "baseline_metrics.json", base)
        report["baseline_mean_psnr_db"] = base["mean_psnr_db"]
        report["psnr_gain_db"] = report["mean_psnr_db"] - base["mean_psnr_db"]
    elif stage == "interior":
        ext, _ = _exterior(cfg, ds, box)
        if not cfg.inputs.get("ior"):
            raise ConfigError("the interior stage needs --ior CHECKPOINT")
        grids, _ = _checkpoint(cfg.inputs["ior"], ("ior",))
        ior = IorField(grids["ior"])
        q, s, flog = fit_interior(ds, ior, ext, box, fc)
        save_checkpoint(out, {"interior_emission": q, "interior_absorption": s}, box,
                        "interior", fc.to_json())
        model = Model(ext, ior, box, EAField(q, s))
        report, renders = evaluate(model, test, fc.trace_config(interior=True), idx)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    flog.write_csv(out / "loss.csv")
    write_report(out / "metrics.json", report)
    (out / "renders").mkdir(exist_ok=True)
    for i, img in zip(idx, renders):
        imageio.write_pfm(out / "renders" / f"view_{i:03d}.pfm", img)
    log.info("%s stage done: held-out PSNR %.2f dB", stage, report["mean_psnr_db"])
    return EXIT_OK


def _cameras(path):
    p = Path(path)
    if p.is_dir() or p.name == "dataset.json":
        ds = load_dataset(p)
        return [v.camera for v in ds.views], ds
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{p}: unreadable camera file ({e})") from None
    cams = doc["cameras"] if isinstance(doc, dict) else doc
    try:
        return [Camera.from_json(c) for c in cams], None
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{p}: bad camera entry ({e})") from None


def cmd_render(cfg: RunConfig):
    fc = cfg.fit_config()
    if not cfg.inputs.get("cameras"):
        raise ConfigError("--cameras is required")
    cams, ds = _cameras(cfg.inputs["cameras"])
    grids = {}
    box = None
    for ck in cfg.inputs.get("model") or []:
        g, doc = _checkpoint(ck, ())
        grids.update(g)
        if doc.get("box"):
            box = Box.from_json(doc["box"])
    if box is None and ds is not None:
        box = ds.box()
    if "emission" in grids and "absorption" in grids:
        ext = EAField(grids["emission"], grids["absorption"])
        ext = ext.masked(box) if box is not None else ext
    elif ds is not None and ds.scene_spec() is not None:
        ext = build_scene(ds.scene_spec()).exterior
        ext = ext.masked(box) if box is not None else ext
    else:
        raise ConfigError("no background: pass a background checkpoint via --model "
                          "or cameras from a dataset with scene.json")
    ior = IorField(grids["ior"]) if "ior" in grids else None
    inter = None
    if "interior_emission" in grids:
        inter = EAField(grids["interior_emission"], grids["interior_absorption"])
    if (ior is not None or inter is not None) and box is None:
        raise ConfigError("refractive or interior grids need a box")
    model = Model(ext, ior, box if ior is not None else None, inter)
    tcfg = fc.trace_config(interior=inter is not None)
    out = _out_dir(cfg)
    cfg.write(out)
    for i, cam in enumerate(cams):
        o, d = generate_rays(cam)
        w, h = cam.resolution
        img = render_rays(o, d, model, tcfg)[:, 0:3].reshape(h, w, 3).astype(np.float32)
        imageio.write_pfm(out / f"render_{i:03d}.pfm", img)
        imageio.write_ppm_preview(out / f"render_{i:03d}.ppm", img)
    log.info("rendered %d views to %s", len(cams), out)
    return EXIT_OK


def cmd_metrics(cfg: RunConfig):
    a, b = Path(cfg.inputs["dir_a"]), Path(cfg.inputs["dir_b"])
    for p in (a, b):
        if not p.is_dir():
            raise ConfigError(f"{p}: not a directory")
    names_a = {p.relative_to(a) for p in a.rglob("*.pfm")}
    names_b = {p.relative_to(b) for p in b.rglob("*.pfm")}
    common = sorted(names_a & names_b)
    if not common:
        raise ConfigError(f"no PFM files in common between {a} and {b}")
    rows = []
    for rel in common:
        x, y = imageio.read_pfm(a / rel), imageio.read_pfm(b / rel)
        rows.append({"file": str(rel), "psnr_db": imageio.psnr(x, y),
                     "ssim": imageio.ssim(x, y)})
    report = {"views": rows,
              "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
              "mean_ssim": float(np.mean([r["ssim"] for r in rows]))}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig):
    size = int(cfg.inputs.get("size", 8))
    if size < 2:
        raise ConfigError("--size must be >= 2")
    res = checks.gradcheck(cfg.seed, size)
    print(f"adjoint vs recorded backprop: {res['adjoint_vs_recorded']:.3e}")
    print(f"adjoint vs finite differences: {res['adjoint_vs_fd']:.3e}")
    print(f"recorded vs finite differences: {res['recorded_vs_fd']:.3e}")
    if cfg.out:
        out = _out_dir(cfg)
        cfg.write(out)
        write_report(out / "gradcheck.json", res)
    return EXIT_OK if res["passed"] else EXIT_RUNTIME


def cmd_validate(cfg: RunConfig):
    results = checks.run_all()
    for name, r in results.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'} {name}")
    if cfg.out:
        out = _out_dir(cfg)
        cfg.write(out)
        write_report(out / "validate.json", results)
    return EXIT_OK if all(r["passed"] for r in results.values()) else EXIT_RUNTIME


COMMANDS = {"make-scene": cmd_make_scene, "fit": cmd_fit, "render": cmd_render,
            "metrics": cmd_metrics, "gradcheck": cmd_gradcheck, "validate": cmd_validate}


# --------------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for data-parallel kernels (default: all cores)")


def _fit_overrides(p):
    g = p.add_argument_group("fit overrides")
    for f in fields(FitConfig):
        if f.name == "seed":
            continue
        default = f.default
        kind = type(default) if default is not None else str
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"fit_{f.name}", type=kind,
                       default=None, metavar=kind.__name__.upper())


def build_parser():
    ap = argparse.ArgumentParser(prog="eikonal", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("make-scene", help="render a synthetic dataset with ground truth")
    _common(p)
    p.add_argument("--scene", help="scene preset (blob-lens, no-refraction, blob-stick, empty)")
    _fit_overrides(p)
    p = sub.add_parser("fit", help="run one reconstruction stage")
    p.add_argument("stage", choices=("background", "ior", "interior"))
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--background", help="background checkpoint (default: analytic scene)")
    p.add_argument("--ior", help="IoR checkpoint (interior stage)")
    p.add_argument("--init", help="IoR checkpoint to start from (ior stage)")
    _fit_overrides(p)
    p = sub.add_parser("render", help="render checkpoints from given cameras")
    _common(p)
    p.add_argument("--model", action="append", help="checkpoint directory (repeatable)")
    p.add_argument("--cameras", help="dataset directory or camera JSON file")
    _fit_overrides(p)
    p = sub.add_parser("metrics", help="PSNR/SSIM between matching PFMs of two directories")
    _common(p)
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p = sub.add_parser("gradcheck", help="adjoint vs recorded backprop vs finite differences")
    _common(p)
    p.add_argument("--size", type=int, default=8, help="raw IoR grid resolution")
    p = sub.add_parser("validate", help="Luneburg, Snell, conservation and degeneracy checks")
    _common(p)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        for k in ("dataset", "background", "ior", "init", "model", "cameras", "dir_a",
                  "dir_b", "size"):
            v = getattr(args, k, None)
            if v is not None:
                cfg.inputs[k] = v
        _set_threads(cfg.threads)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DatasetError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (FitError, SolverError, FloatingPointError, RuntimeError, OSError, ValueError) as e:
        log.error("run failed: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
