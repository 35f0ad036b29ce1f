"""A walk through the synthetic street scenes.

Generates a short flat-road sequence, shows how frames are split, checks
that the ground-truth depth of road pixels lies on one plane, and writes
the ground points of the first training frame as a coloured PLY.

    python3 demos/01_dataset_tour.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from planereg import dataset as D
from planereg import fileio
from planereg.geometry import fit_plane
from planereg.renderer import camera_rays

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_data")

# The scene is a list of analytic primitives: road, dashed lane lines,
# sidewalks with a curb, and building facades.
spec = D.generate_scene("flat-road", seed=0)
for prim in spec.primitives[:6]:
    print(f"{prim.name:<12} class {prim.class_id} ({D.CLASS_TABLE[prim.class_id]})")
print("...", len(spec.primitives), "primitives in total\n")

# Stereo pairs along a jittered straight line, 0.5 m baseline.
cams = D.generate_trajectory(6, seed=0, scene=spec)
manifest = D.write_dataset(spec, cams, out, dropout=0.5, seed=0)
splits = [f["split"] for f in manifest["frames"]]
print("splits:", {s: splits.count(s) for s in ("train", "val", "dropped")})

ds = D.load_dataset(out)
frame = ds.split("train")[0]
cam = ds.camera(frame)
depth, sem = ds.depth(frame), ds.semantic(frame)
pts = camera_rays(cam, ds.near, ds.far).points(depth.ravel())
ground = np.isin(sem.ravel(), [1, 2, 3])  # road, lane, sidewalk
print(f"\nframe {frame}: {ground.sum()} ground pixels of {sem.size}")

# Road and lane pixels share a single plane; sidewalks sit on the curb.
road = np.isin(sem.ravel(), [1, 2])
fit = fit_plane(pts[road])
rms = fit.sigma3 / np.sqrt(road.sum())
print(f"road plane normal {np.round(fit.normal, 6)}, rms off-plane {rms:.2e} m")

ply = out / f"ground_frame{frame}.ply"
fileio.write_ply(ply, pts[ground], fileio.class_colors(sem.ravel()[ground]))
print("wrote", ply)
