"""Training losses on ray patches: photometric MSE, patch dSSIM, the SVD plane
loss with semantic gating, the depth-smoothness baseline, and their scheduled
combination.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .geometry import fit_plane, is_ill_conditioned, sigma3_with_gradient
from .renderer import Rays

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class SemanticGroups:
    """Named groups of class ids assumed to share a single 3D plane."""
    groups: Mapping[str, frozenset]

    def __post_init__(self):
        frozen = {name: frozenset(int(c) for c in ids) for name, ids in self.groups.items()}
        seen: dict[int, str] = {}
        for name, ids in frozen.items():
            for c in ids:
                if c in seen:
                    raise ValueError(f"class {c} appears in groups {seen[c]!r} and {name!r}")
                seen[c] = name
        object.__setattr__(self, "groups", frozen)

    def group_of(self, class_id: int) -> str | None:
        for name, ids in self.groups.items():
            if class_id in ids:
                return name
        return None

    def to_json(self) -> dict:
        return {name: sorted(ids) for name, ids in self.groups.items()}


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 0.1  # dSSIM
    lambda1: float = 0.01  # plane regulariser
    svd_delay_epochs: int = 1
    regularizer: str = "svd"  # "svd" or "ds" (depth-smoothness baseline)

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0 or self.svd_delay_epochs < 0:
            raise ValueError("loss weights and delay must be nonnegative")
        if self.regularizer not in ("svd", "ds"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")

    def lambda1_effective(self, epoch: int, eligible: bool = True) -> float:
        if epoch < self.svd_delay_epochs or not eligible:
            return 0.0
        return self.lambda1


@dataclass
class LossBreakdown:
    mse: float
    dssim: float
    svd: float
    total: float
    eligible: bool
    ds_baseline: float | None = None
    eligible_fraction: float = 0.0
    lambda1_effective: float = 0.0
    n_ill_conditioned: int = 0
    extra: dict = field(default_factory=dict)

    def as_log(self) -> dict:
        out = dict(mse=self.mse, dssim=self.dssim, svd=self.svd, total=self.total,
                   eligible_fraction=self.eligible_fraction)
        if self.ds_baseline is not None:
            out["ds"] = self.ds_baseline
        return out


def _check_shapes(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse_loss(pred_rgb, gt_rgb) -> float:
    pred, gt = _check_shapes(pred_rgb, gt_rgb)
    return float(np.mean((pred - gt) ** 2))


def _channels(x: np.ndarray) -> np.ndarray:
    """View a patch as (pixels, channels); 1-D input is a single channel."""
    if x.ndim == 1:
        return x[:, None]
    return x.reshape(-1, x.shape[-1])


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    vx, vy = (dx ** 2).mean(axis=0), (dy ** 2).mean(axis=0)
    cxy = (dx * dy).mean(axis=0)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx ** 2 + my ** 2 + SSIM_C1
    b2 = vx + vy + SSIM_C2
    return (a1 * a2) / (b1 * b2), (mx, my, dx, dy, a1, a2, b1, b2)


def ssim(x, y) -> float:
    """Single-window SSIM over a whole patch, averaged over channels.

    Uses population statistics and the usual stabilisers c1 = 0.01^2,
    c2 = 0.03^2 for unit dynamic range.
    """
    x, y = _check_shapes(x, y)
    s, _ = _ssim_terms(_channels(x), _channels(y))
    return float(s.mean())


def dssim_loss(pred_rgb, gt_rgb) -> tuple[float, np.ndarray]:
    """``(1 - ssim) / 2`` and its gradient with respect to ``pred_rgb``."""
    pred, gt = _check_shapes(pred_rgb, gt_rgb)
    x, y = _channels(pred), _channels(gt)
    s, (mx, my, dx, dy, a1, a2, b1, b2) = _ssim_terms(x, y)
    n = x.shape[0]
    # d s / d x_i for every pixel, per channel
    ds = s * (2 * my / (n * a1) + 2 * dy / (n * a2) - 2 * mx / (n * b1) - 2 * dx / (n * b2))
    grad = -0.5 * ds / x.shape[1]
    return float((1.0 - s.mean()) / 2.0), grad.reshape(pred.shape)


def svd_plane_loss(depths, rays: Rays) -> tuple[float, np.ndarray]:
    """Smallest singular value of the patch point cloud ``o + d * u``.

    Returns the loss and its gradient with respect to the depths.
    """
    d = np.asarray(depths, dtype=float).ravel()
    if len(d) != len(rays):
        raise ValueError("one depth per ray required")
    pts = rays.origins + d[:, None] * rays.dirs
    s3, grad_p = sigma3_with_gradient(pts)
    return s3, np.einsum("ij,ij->i", grad_p, rays.dirs).reshape(np.shape(depths))


def depth_smoothness_loss(depths) -> tuple[float, np.ndarray]:
    """Squared differences to the down and right neighbours, over the
    ``(S-1) x (S-1)`` top-left block of a square depth patch."""
    d = np.asarray(depths, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("depth patch must be square")
    core = d[:-1, :-1]
    dv = core - d[1:, :-1]
    dh = core - d[:-1, 1:]
    grad = np.zeros_like(d)
    grad[:-1, :-1] += 2 * dv + 2 * dh
    grad[1:, :-1] -= 2 * dv
    grad[:-1, 1:] -= 2 * dh
    return float((dv ** 2).sum() + (dh ** 2).sum()), grad


def patch_eligible(semantic, groups: SemanticGroups) -> tuple[bool, str | None]:
    """True iff every pixel's class belongs to one and the same group."""
    ids = np.unique(np.asarray(semantic).ravel())
    if ids.size == 0:
        return False, None
    names = {groups.group_of(int(c)) for c in ids}
    if len(names) == 1 and None not in names:
        return True, names.pop()
    return False, None


@dataclass
class PatchTerms:
    """Per-patch loss values and gradients w.r.t. rendered colour and depth."""
    mse: float
    dssim: float
    reg: float | None
    eligible: bool
    d_rgb_mse: np.ndarray
    d_rgb_dssim: np.ndarray
    d_depth_reg: np.ndarray | None
    ill_conditioned: bool = False


def patch_terms(pred_rgb, gt_rgb, depth, rays: Rays, semantic, groups: SemanticGroups,
                weights: LossWeights, epoch: int) -> PatchTerms:
    """Evaluate every loss on one S x S patch.

    The plane regulariser is evaluated on eligible patches only; during the
    delay epochs it is still reported but carries zero weight in the total.
    """
    pred, gt = _check_shapes(pred_rgb, gt_rgb)
    mse = mse_loss(pred, gt)
    d_mse = 2.0 * (pred - gt) / pred.size
    dssim, d_dssim = dssim_loss(pred, gt)
    eligible, _ = patch_eligible(semantic, groups)
    reg, d_reg, ill = None, None, False
    if eligible and weights.lambda1 > 0:
        if weights.regularizer == "svd":
            reg, d_reg = svd_plane_loss(depth, rays)
            pts = rays.origins + np.asarray(depth, float).ravel()[:, None] * rays.dirs
            ill = reg > 0 and is_ill_conditioned(fit_plane(pts))
        else:
            s = int(round(np.sqrt(np.size(depth))))
            reg, d_reg = depth_smoothness_loss(np.reshape(depth, (s, s)))
            d_reg = d_reg.ravel()
    return PatchTerms(mse, dssim, reg, eligible, d_mse, d_dssim, d_reg, ill)


def combine(terms: list[PatchTerms], weights: LossWeights, epoch: int):
    """Batch total loss and per-patch gradient scales.

    MSE and dSSIM are averaged over all patches; the plane term is averaged
    over the patches it was applied to.
    """
    p = len(terms)
    mse = float(np.mean([t.mse for t in terms]))
    dssim = float(np.mean([t.dssim for t in terms]))
    applied = [t for t in terms if t.reg is not None]
    reg = float(np.mean([t.reg for t in applied])) if applied else 0.0
    lam1 = weights.lambda1_effective(epoch) if applied else 0.0
    total = mse + weights.lambda0 * dssim + lam1 * reg
    eligible_fraction = sum(t.eligible for t in terms) / p
    is_svd = weights.regularizer == "svd"
    breakdown = LossBreakdown(
        mse=mse, dssim=dssim, svd=reg if is_svd else 0.0, total=total,
        eligible=bool(applied), ds_baseline=None if is_svd else reg,
        eligible_fraction=eligible_fraction, lambda1_effective=lam1,
        n_ill_conditioned=sum(t.ill_conditioned for t in terms),
    )
    scales = (1.0 / p, weights.lambda0 / p, lam1 / len(applied) if applied else 0.0)
    return breakdown, scales


def total_loss(pred_rgb, gt_rgb, depth, rays: Rays, semantic, groups: SemanticGroups,
               weights: LossWeights, epoch: int) -> LossBreakdown:
    """Scheduled total loss for a single patch."""
    terms = patch_terms(pred_rgb, gt_rgb, depth, rays, semantic, groups, weights, epoch)
    return combine([terms], weights, epoch)[0]
