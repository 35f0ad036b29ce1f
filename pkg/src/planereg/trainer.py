"""Patch-batch optimisation of a voxel field: sampling, exact gradients through
renderer and losses, lazy Adam with cosine decay, loss scheduling and early
stopping on validation PSNR.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import Dataset
from .losses import LossBreakdown, LossWeights, combine, patch_terms
from .metrics import psnr, ssim_image
from .renderer import (N_SAMPLES_EVAL, N_SAMPLES_TRAIN, Rays, render_image,
                       render_rays, render_rays_backward, rays_for_patch, sample_rays)
from .scenefield import ParamGrad, VoxelField, init_field, resample_field, save_checkpoint

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MIN_PSNR_GAIN = 0.01  # dB


class NonFiniteLossError(RuntimeError):
    """Raised when a step produces a NaN/inf loss; ``dump`` holds the context."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_patches: int = 128
    patch_size: int = 20
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    n_samples_train: int = N_SAMPLES_TRAIN
    n_samples_eval: int = N_SAMPLES_EVAL
    early_stop_patience: int = 10
    seed: int = 0
    resolution: tuple = (64, 64, 64)
    init_density_raw: float = -2.0
    # per-group multipliers on the scheduled learning rate
    lr_scale_density: float = 1.0
    lr_scale_color: float = 1.0
    workers: int = 1
    checkpoint_every: int = 1
    # composite a random per-patch colour behind the field during training
    random_background: bool = True
    # ((fraction of total steps, grid edge), ...): the grid is trilinearly
    # upsampled when training reaches each fraction; empty keeps ``resolution``
    coarse_to_fine: tuple = ()

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.resolution = tuple(int(r) for r in self.resolution)
        for name in ("epochs", "batch_patches", "patch_size", "n_samples_train",
                     "n_samples_eval", "early_stop_patience", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_start < 0 or self.lr_end < 0 or self.lr_end > self.lr_start:
            raise ValueError("learning rates must satisfy 0 <= lr_end <= lr_start")
        if self.lr_scale_density < 0 or self.lr_scale_color < 0:
            raise ValueError("learning-rate multipliers must be nonnegative")
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError("resolution must be three integers >= 2")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be nonnegative")
        stages = tuple((float(f), int(r)) for f, r in self.coarse_to_fine)
        if stages:
            fracs = [f for f, _ in stages]
            if fracs[0] != 0.0 or any(b <= a for a, b in zip(fracs, fracs[1:])) or fracs[-1] >= 1:
                raise ValueError("coarse_to_fine fractions must start at 0, increase, stay < 1")
            if min(r for _, r in stages) < 2:
                raise ValueError("coarse_to_fine resolutions must be >= 2")
        self.coarse_to_fine = stages

    def grid_at(self, step: int, total_steps: int) -> tuple:
        """Grid resolution in effect at ``step``."""
        res = self.resolution
        for frac, r in self.coarse_to_fine:
            if step >= int(frac * total_steps):
                res = (r, r, r)
        return res

    def to_json(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["coarse_to_fine"] = [list(s) for s in self.coarse_to_fine]
        return d


@dataclass
class OptimizerState:
    """Adam moments for both parameter groups."""
    m_density: np.ndarray
    v_density: np.ndarray
    m_color: np.ndarray
    v_color: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_field(cls, field_: VoxelField) -> "OptimizerState":
        z = np.zeros_like
        return cls(z(field_.density_raw), z(field_.density_raw),
                   z(field_.color_raw), z(field_.color_raw))


def _adam_update(param, grad, m, v, lr, state: OptimizerState, t: int) -> None:
    # lazy: entries with exactly zero gradient keep their parameters and moments
    live = grad != 0
    if not live.any():
        return
    g = grad[live]
    m[live] = state.beta1 * m[live] + (1 - state.beta1) * g
    v[live] = state.beta2 * v[live] + (1 - state.beta2) * g * g
    mhat = m[live] / (1 - state.beta1 ** t)
    vhat = v[live] / (1 - state.beta2 ** t)
    param[live] -= lr * mhat / (np.sqrt(vhat) + state.eps)


def adam_step(field_: VoxelField, grad: ParamGrad, state: OptimizerState, lr: float,
              lr_scale_density: float = 1.0, lr_scale_color: float = 1.0) -> None:
    """One bias-corrected Adam update in place."""
    state.step += 1
    t = state.step
    _adam_update(field_.density_raw, grad.density_grad, state.m_density, state.v_density,
                 lr * lr_scale_density, state, t)
    _adam_update(field_.color_raw, grad.color_grad, state.m_color, state.v_color,
                 lr * lr_scale_color, state, t)


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps and total_steps > 0")
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class PatchBatch:
    """One S x S training patch: rays and targets in row-major pixel order."""
    frame: int
    top_left: tuple[int, int]
    rays: Rays
    rgb: np.ndarray  # (S*S, 3)
    semantic: np.ndarray  # (S*S,)
    background: np.ndarray | None = None  # (S*S,) bool, rays that hit nothing

    @property
    def provenance(self) -> dict:
        return dict(frame=self.frame, top_left=list(self.top_left))


def steps_per_epoch(dataset: Dataset, cfg: TrainConfig) -> int:
    frames = dataset.split("train")
    pixels = sum(dataset.camera(f).width * dataset.camera(f).height for f in frames)
    return max(1, math.ceil(pixels / (cfg.batch_patches * cfg.patch_size ** 2)))


def check_patch_fits(dataset: Dataset, patch_size: int) -> None:
    for f in dataset.split("train"):
        cam = dataset.camera(f)
        if cam.width < patch_size or cam.height < patch_size:
            raise ValueError(f"frame {f} ({cam.width}x{cam.height}) is smaller than the "
                             f"{patch_size}x{patch_size} patch")


def sample_patch_batch(dataset: Dataset, rng: np.random.Generator, batch_patches: int = 128,
                       patch_size: int = 20) -> list[PatchBatch]:
    """Uniform random (train frame, top-left) with the patch fully inside the image."""
    frames = dataset.split("train")
    if not frames:
        raise ValueError("training split is empty")
    out = []
    s = patch_size
    for _ in range(batch_patches):
        f = int(frames[rng.integers(len(frames))])
        cam = dataset.camera(f)
        if cam.width < s or cam.height < s:
            raise ValueError(f"frame {f} is smaller than the {s}x{s} patch")
        i = int(rng.integers(cam.height - s + 1))
        j = int(rng.integers(cam.width - s + 1))
        rays = rays_for_patch(cam, (i, j), s, dataset.near, dataset.far)
        rgb = dataset.rgb(f)[i:i + s, j:j + s].reshape(-1, 3)
        sem = dataset.semantic(f)[i:i + s, j:j + s].ravel()
        bg = dataset.depth(f)[i:i + s, j:j + s].ravel() <= 0
        out.append(PatchBatch(f, (i, j), rays, rgb, sem, bg))
    return out


def loss_and_grad(field_: VoxelField, batch: list[PatchBatch], weights: LossWeights,
                  epoch: int, sample_t: np.ndarray, groups, workers: int = 1,
                  backgrounds: np.ndarray | None = None) -> tuple[LossBreakdown, ParamGrad]:
    """Scheduled batch loss and its exact gradient for fixed sample distances.

    With ``backgrounds`` (one rgb per patch) the rendered colour becomes
    ``color + T_final * bg`` and background pixels of the target are replaced
    by ``bg``; without it both keep the black background.
    """
    rays = Rays.concat(p.rays for p in batch)
    res = render_rays(field_, rays, sample_t, workers=workers)
    n = len(batch[0].rays)
    s = int(round(math.sqrt(n)))
    terms = []
    for k, p in enumerate(batch):
        sl = slice(k * n, (k + 1) * n)
        depth = res.depth[sl]
        pred, target = res.color[sl], p.rgb
        if backgrounds is not None:
            bg = backgrounds[k]
            pred = pred + res.transmittance_final[sl, None] * bg
            if p.background is not None:
                target = np.where(p.background[:, None], bg, target)
        terms.append(patch_terms(pred.reshape(s, s, 3), target.reshape(s, s, 3),
                                 depth.reshape(s, s), p.rays, p.semantic, groups, weights, epoch))
    breakdown, (s_mse, s_dssim, s_reg) = combine(terms, weights, epoch)
    d_color = np.zeros_like(res.color)
    d_depth = np.zeros_like(res.depth)
    d_tfinal = np.zeros_like(res.depth)
    for k, t in enumerate(terms):
        sl = slice(k * n, (k + 1) * n)
        d_color[sl] = (s_mse * t.d_rgb_mse + s_dssim * t.d_rgb_dssim).reshape(-1, 3)
        if backgrounds is not None:
            d_tfinal[sl] = d_color[sl] @ backgrounds[k]
        if t.d_depth_reg is not None and s_reg:
            d_depth[sl] = s_reg * np.ravel(t.d_depth_reg)
    breakdown.extra["n_patches"] = len(batch)
    breakdown.extra["n_eligible"] = sum(t.eligible for t in terms)
    breakdown.extra["nonfinite_patches"] = [
        batch[k].provenance for k, t in enumerate(terms)
        if not all(np.isfinite(v) for v in (t.mse, t.dssim, t.reg if t.reg is not None else 0.0))
    ]
    grad = ParamGrad.zeros_like(field_)
    if math.isfinite(breakdown.total):
        render_rays_backward(field_, rays, sample_t, d_color, d_depth, grad, workers=workers,
                             d_tfinal=d_tfinal)
    return breakdown, grad


def train_step(field_: VoxelField, batch: list[PatchBatch], optimizer: OptimizerState,
               weights: LossWeights, epoch: int, lr: float, rng: np.random.Generator, *,
               groups, n_samples: int = N_SAMPLES_TRAIN, workers: int = 1,
               lr_scale_density: float = 1.0, lr_scale_color: float = 1.0,
               random_background: bool = False) -> LossBreakdown:
    """Render with stratified samples, backpropagate the scheduled loss and
    apply one Adam update."""
    rays = Rays.concat(p.rays for p in batch)
    t = sample_rays(rays, n_samples, stratified=True, rng=rng)
    bgs = rng.random((len(batch), 3)) if random_background else None
    breakdown, grad = loss_and_grad(field_, batch, weights, epoch, t, groups, workers, bgs)
    if not math.isfinite(breakdown.total):
        dump = dict(step=optimizer.step, epoch=epoch, loss=breakdown.as_log(),
                    patches=breakdown.extra["nonfinite_patches"] or
                    [p.provenance for p in batch])
        raise NonFiniteLossError(f"non-finite loss at step {optimizer.step}", dump)
    adam_step(field_, grad, optimizer, lr, lr_scale_density, lr_scale_color)
    return breakdown


def evaluate_split(field_: VoxelField, dataset: Dataset, split: str = "val",
                   n_samples: int = N_SAMPLES_EVAL, workers: int = 1) -> dict:
    """Mean PSNR and SSIM over a split, rendered with midpoint sampling."""
    psnrs, ssims = [], []
    for f in dataset.split(split):
        rgb, _ = render_image(field_, dataset.camera(f), n_samples, near=dataset.near,
                              far=dataset.far, workers=workers)
        gt = dataset.rgb(f)
        psnrs.append(psnr(rgb, gt))
        ssims.append(ssim_image(rgb, gt))
    if not psnrs:
        raise ValueError(f"split {split!r} is empty")
    return dict(psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)))


@dataclass
class FitResult:
    field: VoxelField  # best validation PSNR
    final_field: VoxelField
    log: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_epoch: int = -1
    best_psnr: float = -math.inf
    wall_seconds: float = 0.0

    @property
    def summary(self) -> dict:
        return dict(best_epoch=self.best_epoch, best_psnr=self.best_psnr,
                    wall_seconds=self.wall_seconds)


def fit(dataset: Dataset, cfg: TrainConfig, out_dir=None,
        on_step: Callable[[int, list, LossBreakdown], None] | None = None,
        verbose: bool = False) -> FitResult:
    """Train a fresh field on the dataset's train split.

    After every epoch the val split is rendered; training stops once val PSNR
    has not improved by more than 0.01 dB for ``early_stop_patience`` epochs.
    ``on_step(step, batch, breakdown)`` is called after every update.
    """
    start = time.perf_counter()
    check_patch_fits(dataset, cfg.patch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None

    rng = np.random.default_rng(cfg.seed)
    lo, hi = dataset.bbox
    per_epoch = steps_per_epoch(dataset, cfg)
    total = cfg.epochs * per_epoch
    field_ = init_field(cfg.grid_at(0, total), (lo, hi), cfg.init_density_raw, seed=cfg.seed)
    opt = OptimizerState.for_field(field_)
    result = FitResult(field=field_.copy(), final_field=field_)
    stale = 0

    def emit(record):
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()

    try:
        for epoch in range(cfg.epochs):
            for k in range(per_epoch):
                step = epoch * per_epoch + k
                grid = cfg.grid_at(step, total)
                if grid != field_.resolution:
                    # moments belong to the old vertices; restart them on the new grid
                    field_ = resample_field(field_, grid)
                    opt = OptimizerState.for_field(field_)
                    result.final_field = field_
                lr = cosine_lr(step, total, cfg.lr_start, cfg.lr_end)
                batch = sample_patch_batch(dataset, rng, cfg.batch_patches, cfg.patch_size)
                try:
                    bd = train_step(field_, batch, opt, cfg.weights, epoch, lr, rng,
                                    groups=dataset.groups, n_samples=cfg.n_samples_train,
                                    workers=cfg.workers, lr_scale_density=cfg.lr_scale_density,
                                    lr_scale_color=cfg.lr_scale_color,
                                    random_background=cfg.random_background)
                except NonFiniteLossError as exc:
                    if out is not None:
                        (out / "nonfinite_dump.json").write_text(json.dumps(exc.dump, indent=2))
                    raise
                record = dict(step=step, epoch=epoch, lr=lr, **bd.as_log(),
                              lambda1_effective=bd.lambda1_effective,
                              n_eligible=bd.extra["n_eligible"],
                              n_patches=bd.extra["n_patches"])
                result.log.append(record)
                emit(record)
                if on_step is not None:
                    on_step(step, batch, bd)

            val = evaluate_split(field_, dataset, "val", cfg.n_samples_eval, cfg.workers)
            improved = val["psnr"] > result.best_psnr + MIN_PSNR_GAIN
            ep = dict(epoch=epoch, val_psnr=val["psnr"], val_ssim=val["ssim"], improved=improved)
            result.epochs.append(ep)
            emit(dict(kind="epoch", **ep))
            if verbose:
                print(f"epoch {epoch:3d}  loss {record['total']:.5f}  "
                      f"val psnr {val['psnr']:.3f}  ssim {val['ssim']:.4f}", flush=True)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                path = out / f"ckpt_epoch{epoch:03d}.plnf"
                save_checkpoint(field_, path)
                result.checkpoints.append(path)
            if improved:
                result.best_psnr, result.best_epoch = val["psnr"], epoch
                result.field = field_.copy()
                if out is not None:
                    save_checkpoint(result.field, out / "best.plnf")
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    result.wall_seconds = time.perf_counter() - start
    if out is not None:
        (out / "summary.json").write_text(json.dumps(result.summary, indent=2))
    return result
