"""Loss and held-out PSNR along the straight path from n = 1 to the true IoR grid.

For alpha in [0, 1.2] the excess n - 1 is blended as (1 - alpha)*floor + alpha*truth
on the 64^3 grid. Shows how narrow the basin around the true field is.

    python scripts/gt_path_scan.py [--scene blob-lens] [--stride 7]
"""
import argparse

import numpy as np

from eikonal.cli import _gt_ior_grid
from eikonal.fields import IorField, softplus, softplus_inv
from eikonal.recon import FitConfig, dataset_rays, evaluate
from eikonal.scene import build_scene, default_spec, make_dataset
from eikonal.transport import Model, render_rays


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="blob-lens")
    ap.add_argument("--stride", type=int, default=7, help="use every k-th training pixel")
    ap.add_argument("--alphas", default="0,0.25,0.5,0.75,0.85,0.9,0.95,1,1.05,1.1,1.2")
    args = ap.parse_args()
    scene = build_scene(default_spec(args.scene))
    cfg = FitConfig()
    tcfg = cfg.trace_config()
    ds = make_dataset(scene, seed=0, with_masks=False, config=tcfg)
    gt = _gt_ior_grid(scene, cfg.ior_dims)
    e_gt = softplus(gt.values.astype(np.float64))
    e_0 = np.full_like(e_gt, float(softplus(-10.0)))
    o, d, t = dataset_rays(ds.train_views())
    o, d, t = o[::args.stride], d[::args.stride], t[::args.stride]
    print(f"{'alpha':>6} {'train L1':>9} {'held-out PSNR':>14}")
    for a in (float(x) for x in args.alphas.split(",")):
        e = np.maximum((1 - a) * e_0 + a * e_gt, e_0)
        ior = IorField(gt.with_values(softplus_inv(e)))
        model = Model(scene.exterior, ior, scene.box)
        loss = np.abs(render_rays(o, d, model, tcfg)[:, 0:3] - t).mean()
        rep, _ = evaluate(model, ds.test_views(), tcfg)
        print(f"{a:6.2f} {loss:9.4f} {rep['mean_psnr_db']:14.2f}", flush=True)


if __name__ == "__main__":
    main()
