"""Geometry and image metrics: semantic-filtered chamfer distance, plane
standard deviation over ground cells, PSNR and windowed SSIM.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RansacParams, ransac_plane
from .losses import SSIM_C1, SSIM_C2
from .renderer import N_SAMPLES_EVAL, Rays, render_rays, sample_rays
from .scenefield import VoxelField

PSNR_CAP = 99.0
REPORT_COLUMNS = ["scene", "variant", "CD", "P_sigma", "PSNR", "SSIM", "LPIPS",
                  "n_points", "n_cells"]


@dataclass
class GeoEvalConfig:
    eval_classes: frozenset = frozenset({1, 2, 3})
    patch_extent: float = 3.0
    ransac: RansacParams = field(default_factory=RansacParams)
    min_points_per_patch: int = 20

    def __post_init__(self):
        self.eval_classes = frozenset(int(c) for c in self.eval_classes)
        if self.patch_extent <= 0:
            raise ValueError("patch_extent must be positive")


@dataclass
class GeoEvalReport:
    chamfer: float  # m^2
    p_sigma: float  # m
    n_points_used: int
    cells: list = field(default_factory=list)

    @property
    def p_sigma_cm(self) -> float:
        return 100.0 * self.p_sigma


def filtered_point_pair(field_: VoxelField, rays: Rays, gt_depth, labels, classes,
                        n_samples: int = N_SAMPLES_EVAL, workers: int = 1):
    """Predicted and ground-truth points along the rays ending on ``classes``.

    Rows of the two returned (K, 3) arrays correspond to the same ray.
    """
    classes = {int(c) for c in classes}
    gt_depth = np.asarray(gt_depth, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    keep = np.isin(labels, list(classes)) & (gt_depth > 0) if classes else np.zeros(len(labels), bool)
    if not keep.any():
        raise ValueError("empty evaluation set")
    idx = np.flatnonzero(keep)
    sub = rays[idx]
    t = sample_rays(sub, n_samples, stratified=False)
    pred = render_rays(field_, sub, t, workers=workers)
    x = sub.points(pred.depth)
    y = sub.points(gt_depth[idx])
    return x, y


def chamfer(x, y) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=float).reshape(-1, 3)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    _, ix = cKDTree(y).query(x)
    _, iy = cKDTree(x).query(y)
    dxy = ((x - y[ix]) ** 2).sum(axis=1)
    dyx = ((y - x[iy]) ** 2).sum(axis=1)
    return float(dxy.mean() / 2 + dyx.mean() / 2)


def plane_cells(x_pred, y_gt, cfg: GeoEvalConfig) -> list[dict]:
    """Per-cell plane deviation of predicted points.

    Pairs are binned by the ground-truth point's (x, y) on a grid of
    ``patch_extent`` squares; the cell normal comes from RANSAC on the
    ground-truth points and the deviation is the population std of the
    predicted points projected on it.
    """
    x = np.asarray(x_pred, dtype=float).reshape(-1, 3)
    y = np.asarray(y_gt, dtype=float).reshape(-1, 3)
    if len(x) != len(y):
        raise ValueError("point clouds must correspond row by row")
    keys = np.floor(y[:, :2] / cfg.patch_extent).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    cells = []
    for c, key in enumerate(uniq):
        members = np.flatnonzero(inverse == c)
        if len(members) < cfg.min_points_per_patch:
            continue
        try:
            fit = ransac_plane(y[members], cfg.ransac)
        except ValueError:
            continue
        proj = x[members] @ fit.normal
        cells.append(dict(cell=[int(key[0]), int(key[1])], n_points=int(len(members)),
                          normal=fit.normal.tolist(), p_sigma=float(proj.std())))
    return cells


def plane_sigma(x_pred, y_gt, cfg: GeoEvalConfig | None = None) -> float:
    cells = plane_cells(x_pred, y_gt, cfg or GeoEvalConfig())
    if not cells:
        raise ValueError("no evaluable patches")
    return float(np.mean([c["p_sigma"] for c in cells]))


def evaluate_geometry(field_: VoxelField, rays: Rays, gt_depth, labels,
                      cfg: GeoEvalConfig | None = None, n_samples: int = N_SAMPLES_EVAL,
                      workers: int = 1) -> GeoEvalReport:
    cfg = cfg or GeoEvalConfig()
    x, y = filtered_point_pair(field_, rays, gt_depth, labels, cfg.eval_classes,
                               n_samples, workers)
    cells = plane_cells(x, y, cfg)
    if not cells:
        raise ValueError("no evaluable patches")
    return GeoEvalReport(chamfer=chamfer(x, y),
                         p_sigma=float(np.mean([c["p_sigma"] for c in cells])),
                         n_points_used=len(x), cells=cells)


def psnr(pred_image, gt_image) -> float:
    pred = np.asarray(pred_image, dtype=float)
    gt = np.asarray(gt_image, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _box_mean(a: np.ndarray, w: int) -> np.ndarray:
    """Means over all valid w x w windows of a (H, W, C) array."""
    c = np.cumsum(np.cumsum(a, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    s = c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]
    return s / (w * w)


def ssim_image(pred_image, gt_image, window: int = 11) -> float:
    """Mean SSIM over all stride-1 windows fully inside the image, averaged
    over channels."""
    x = np.asarray(pred_image, dtype=float)
    y = np.asarray(gt_image, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    mx, my = _box_mean(x, window), _box_mean(y, window)
    # same expression for variances and covariance keeps ssim(x, x) == 1 exactly
    vx = _box_mean(x * x, window) - mx * mx
    vy = _box_mean(y * y, window) - my * my
    cxy = _box_mean(x * y, window) - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
        (mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
    return float(s.mean())


def write_report(rows: list[dict], csv_path, diagnostics: dict | None = None) -> None:
    """Append rows to the evaluation CSV (header written once) and dump the
    per-cell diagnostics next to it as JSON."""
    csv_path = Path(csv_path)
    new = not csv_path.exists() or csv_path.stat().st_size == 0
    with open(csv_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "n/a") for k in REPORT_COLUMNS})
    if diagnostics is not None:
        json_path = csv_path.with_suffix(".json")
        existing = json.loads(json_path.read_text()) if json_path.exists() else []
        existing.append(diagnostics)
        json_path.write_text(json.dumps(existing, indent=2))
