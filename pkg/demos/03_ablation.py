"""Train the same scene with and without the plane loss and compare geometry.

Uses the acceptance budget (15 stereo frames at 160x120, 30 epochs,
64^3 grid reached through a coarse-to-fine schedule). Each run takes a few
minutes on one core.

    python3 demos/03_ablation.py [work_dir] [variant ...]

Variants: full, no-svd, no-dssim, ds-baseline.
"""
import sys
from pathlib import Path

import numpy as np

from planereg import dataset as D
from planereg.losses import LossWeights
from planereg.metrics import evaluate_geometry
from planereg.renderer import Rays, camera_rays
from planereg.trainer import TrainConfig, evaluate_split, fit

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_ablation")
variants = sys.argv[2:] or ["full", "no-svd"]
weights = {
    "full": LossWeights(),
    "no-svd": LossWeights(lambda1=0.0),
    "no-dssim": LossWeights(lambda0=0.0),
    "ds-baseline": LossWeights(regularizer="ds"),
}

data = work / "flat-road"
if not (data / "manifest.json").exists():
    spec = D.generate_scene("flat-road", seed=0)
    D.write_dataset(spec, D.generate_trajectory(15, seed=0, scene=spec), data, seed=0)
ds = D.load_dataset(data)

# every val pixel, paired with its ground-truth depth and label
val = ds.split("val")
rays = Rays.concat([camera_rays(ds.camera(f), ds.near, ds.far) for f in val])
gt_depth = np.concatenate([ds.depth(f).ravel() for f in val])
labels = np.concatenate([ds.semantic(f).ravel() for f in val])

print(f"{'variant':<12}{'CD (m^2)':>10}{'P_sigma (cm)':>14}{'PSNR':>8}{'SSIM':>8}")
for name in variants:
    cfg = TrainConfig(epochs=30, weights=weights[name], lr_scale_density=30.0,
                      lr_scale_color=30.0, coarse_to_fine=((0, 16), (0.15, 32), (0.3, 64)))
    res = fit(ds, cfg, work / name)
    geo = evaluate_geometry(res.field, rays, gt_depth, labels)
    img = evaluate_split(res.field, ds, "val")
    print(f"{name:<12}{geo.chamfer:>10.4f}{geo.p_sigma_cm:>14.2f}{img['psnr']:>8.2f}"
          f"{img['ssim']:>8.4f}", flush=True)
