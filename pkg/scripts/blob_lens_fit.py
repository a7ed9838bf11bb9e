"""Full-size IoR reconstruction on the blob-lens scene.

Renders the dataset from the analytic scene, fits the 64^3 IoR grid against the
analytic exterior, and reports held-out PSNR for the fit and for n = 1.

    python scripts/blob_lens_fit.py --out runs/blob_lens [--iters 5000] [--scene blob-lens]
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from eikonal.fields import Box
from eikonal.recon import (FitConfig, background_pyramid, evaluate, fit_ior, save_checkpoint,
                           write_report)
from eikonal.scene import build_scene, default_spec, make_dataset
from eikonal.transport import Model


def run(scene_name="blob-lens", iters=5000, seed=0, out=None, log_every=250,
        doubling_every=1000):
    t0 = time.time()
    scene = build_scene(default_spec(scene_name))
    cfg = FitConfig(iters_ior=iters, seed=seed, doubling_every=doubling_every)
    tcfg = cfg.trace_config()
    ds = make_dataset(scene, seed=seed, with_masks=False, config=tcfg)
    bounds = Box(scene.spec.bounds_min, scene.spec.bounds_max)
    pyramid = background_pyramid(scene.exterior, scene.box, bounds, cfg)

    def cb(it, loss, level):
        if it % log_every == 0:
            print(f"iter {it:5d}  level {level}  loss {loss:.4f}  {time.time() - t0:7.1f}s",
                  flush=True)

    ior, flog = fit_ior(ds, pyramid, scene.box, cfg, callback=cb)
    test = ds.test_views()
    fitted, _ = evaluate(Model(scene.exterior, ior, scene.box), test, tcfg)
    base, _ = evaluate(Model(scene.exterior), test, tcfg)
    n = ior.raw.values[..., 0].astype(np.float64)
    result = {
        "fitted_psnr_db": fitted["mean_psnr_db"],
        "baseline_psnr_db": base["mean_psnr_db"],
        "psnr_gain_db": fitted["mean_psnr_db"] - base["mean_psnr_db"],
        "max_n_minus_1": float(np.log1p(np.exp(n)).max()),
        "skipped_batches": flog.skipped,
        "fit_seconds": flog.seconds,
        "total_seconds": time.time() - t0,
    }
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, {"ior": ior.raw}, scene.box, "ior", cfg.to_json())
        flog.write_csv(out / "loss.csv")
        write_report(out / "metrics.json", fitted)
        (out / "summary.json").write_text(json.dumps(result, indent=2) + "\n")
    return result, flog


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="blob-lens")
    ap.add_argument("--iters", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--doubling-every", type=int, default=1000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    result, _ = run(args.scene, args.iters, args.seed, args.out,
                     doubling_every=args.doubling_every)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
