import json
import math

import numpy as np
import pytest

from planereg.losses import LossWeights, SemanticGroups
from planereg.renderer import Rays, rays_for_patch, sample_rays
from planereg.scenefield import ParamGrad, VoxelField, init_field
from planereg.trainer import (
    NonFiniteLossError, OptimizerState, PatchBatch, TrainConfig, adam_step, cosine_lr, fit,
    loss_and_grad, sample_patch_batch, steps_per_epoch, train_step,
)

GROUND = SemanticGroups({"ground": {1, 2, 3}})


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-2, 1e-4) == pytest.approx(1e-2, abs=1e-15)
    assert cosine_lr(100, 100, 1e-2, 1e-4) == pytest.approx(1e-4, abs=1e-15)
    assert cosine_lr(50, 100, 1e-2, 1e-4) == pytest.approx(5.05e-3, abs=1e-15)
    lrs = [cosine_lr(s, 40, 1e-2, 1e-4) for s in range(41)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-2, 1e-4)


def test_config_validation():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_patches, cfg.patch_size) == (100, 128, 20)
    assert (cfg.lr_start, cfg.lr_end, cfg.early_stop_patience) == (1e-2, 1e-4, 10)
    assert cfg.weights == LossWeights(0.1, 0.01, 1)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-4, lr_end=1e-2)
    with pytest.raises(ValueError):
        TrainConfig(batch_patches=0)
    assert TrainConfig(weights=dict(lambda1=0.5)).weights.lambda1 == 0.5


def test_batch_shape_and_determinism(tiny_dataset):
    batch = sample_patch_batch(tiny_dataset, np.random.default_rng(1), 128, 20)
    assert len(batch) == 128
    assert sum(len(p.rays) for p in batch) == 51200
    again = sample_patch_batch(tiny_dataset, np.random.default_rng(1), 128, 20)
    for a, b in zip(batch, again):
        assert (a.frame, a.top_left) == (b.frame, b.top_left)
        np.testing.assert_array_equal(a.rgb, b.rgb)
    p = batch[0]
    i, j = p.top_left
    np.testing.assert_array_equal(p.rgb, tiny_dataset.rgb(p.frame)[i:i + 20, j:j + 20].reshape(-1, 3))


def test_patch_bounds_over_10000_draws(tiny_dataset):
    rng = np.random.default_rng(2)
    corners = set()
    for p in sample_patch_batch(tiny_dataset, rng, 10000, 20):
        cam = tiny_dataset.camera(p.frame)
        i, j = p.top_left
        assert 0 <= i <= cam.height - 20 and 0 <= j <= cam.width - 20
        corners.add((i, j))
    # both extreme rows/cols are reachable
    assert {0, 10} <= {i for i, _ in corners} and {0, 20} <= {j for _, j in corners}
    with pytest.raises(ValueError):
        sample_patch_batch(tiny_dataset, rng, 1, 31)


def test_steps_per_epoch(tiny_dataset):
    n_train = len(tiny_dataset.split("train"))
    cfg = TrainConfig(batch_patches=2, patch_size=20)
    assert steps_per_epoch(tiny_dataset, cfg) == math.ceil(n_train * 1200 / 800)


def test_zero_gradient_leaves_parameters():
    f = init_field((4, 4, 4), ([0, 0, 0], [1, 1, 1]), -1.0, seed=0)
    before = f.copy()
    opt = OptimizerState.for_field(f)
    adam_step(f, ParamGrad.zeros_like(f), opt, 1e-2)
    np.testing.assert_array_equal(f.density_raw, before.density_raw)
    np.testing.assert_array_equal(f.color_raw, before.color_raw)
    g = ParamGrad.zeros_like(f)
    g.density_grad[1, 2, 3] = 0.5
    adam_step(f, g, opt, 1e-2)
    changed = np.flatnonzero(f.density_raw != before.density_raw)
    assert changed.tolist() == [np.ravel_multi_index((1, 2, 3), (4, 4, 4))]
    # first bias-corrected Adam step moves by lr * g / (|g| + eps)
    fresh = before.copy()
    adam_step(fresh, g, OptimizerState.for_field(fresh), 1e-2)
    assert fresh.density_raw[1, 2, 3] - before.density_raw[1, 2, 3] == pytest.approx(
        -1e-2 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def micro_setup(seed, classes=1):
    """8^3 field, one 4x4 patch looking at the field, 8 samples per ray."""
    rng = np.random.default_rng(seed)
    f = VoxelField((8, 8, 8), np.zeros(3), np.ones(3) * 2.0,
                   rng.normal(0.0, 1.0, (8, 8, 8)), rng.normal(size=(8, 8, 8, 3)))
    from planereg.renderer import Camera
    cam = Camera(6.0, 6.0, 2.0, 2.0, 4, 4, np.eye(3), [1.0, 1.0, -0.5])
    rays = rays_for_patch(cam, (0, 0), 4, near=0.6, far=3.0)
    t = sample_rays(rays, 8, stratified=True, rng=rng)
    sem = np.full(16, classes)
    patch = PatchBatch(0, (0, 0), rays, rng.random((16, 3)), sem, np.zeros(16, bool))
    return f, patch, t, rng.random((1, 3))


def _fd_check(f, fn, grad, rng, n_check=40, h=1e-6):
    """Norm-wise relative error of the analytic gradient on sampled live entries."""
    ana, num = [], []
    for arr, g in ((f.density_raw, grad.density_grad), (f.color_raw, grad.color_grad)):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        live = np.flatnonzero(gflat)
        for idx in rng.choice(live, size=min(n_check, live.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = fn()
            flat[idx] = old - h
            dn = fn()
            flat[idx] = old
            num.append((up - dn) / (2 * h))
            ana.append(gflat[idx])
    ana, num = np.array(ana), np.array(num)
    return np.linalg.norm(ana - num) / np.linalg.norm(num)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("background", [False, True])
def test_end_to_end_gradient(seed, background):
    f, patch, t, bg = micro_setup(seed)
    w = LossWeights(lambda0=0.1, lambda1=0.01, svd_delay_epochs=0)
    bgs = bg if background else None
    bd, grad = loss_and_grad(f, [patch], w, 1, t, GROUND, backgrounds=bgs)
    assert bd.eligible and bd.svd > 0

    def total():
        return loss_and_grad(f, [patch], w, 1, t, GROUND, backgrounds=bgs)[0].total

    assert _fd_check(f, total, grad, np.random.default_rng(seed)) < 1e-3


def test_epoch_zero_svd_has_no_weight():
    f, patch, t, _ = micro_setup(5)
    w = LossWeights()
    bd0, g0 = loss_and_grad(f, [patch], w, 0, t, GROUND)
    assert bd0.svd > 0 and bd0.lambda1_effective == 0
    assert bd0.total == pytest.approx(bd0.mse + 0.1 * bd0.dssim, abs=1e-15)
    nosvd = LossWeights(lambda1=0.0)
    _, g_ref = loss_and_grad(f, [patch], nosvd, 0, t, GROUND)
    np.testing.assert_array_equal(g0.density_grad, g_ref.density_grad)
    bd1, _ = loss_and_grad(f, [patch], w, 1, t, GROUND)
    assert bd1.lambda1_effective == 0.01


def test_nonfinite_loss_aborts_with_dump():
    f, patch, _, _ = micro_setup(6)
    f.density_raw[:] = np.nan
    opt = OptimizerState.for_field(f)
    with pytest.raises(NonFiniteLossError) as exc:
        train_step(f, [patch], opt, LossWeights(), 1, 1e-2, np.random.default_rng(0),
                   groups=GROUND, n_samples=8)
    assert exc.value.dump["patches"] == [dict(frame=0, top_left=[0, 0])]
    assert opt.step == 0


def test_pure_mse_overfit_descends(tiny_dataset):
    rng = np.random.default_rng(3)
    lo, hi = tiny_dataset.bbox
    f = init_field((16, 16, 16), (lo, hi), -2.0)
    opt = OptimizerState.for_field(f)
    w = LossWeights(lambda0=0.0, lambda1=0.0)
    frame = tiny_dataset.split("train")[0]
    cam = tiny_dataset.camera(frame)
    rays = rays_for_patch(cam, (5, 10), 20, tiny_dataset.near, tiny_dataset.far)
    patch = PatchBatch(frame, (5, 10), rays, tiny_dataset.rgb(frame)[5:25, 10:30].reshape(-1, 3),
                       tiny_dataset.semantic(frame)[5:25, 10:30].ravel())
    losses = [train_step(f, [patch], opt, w, 0, 5e-2, rng, groups=GROUND, n_samples=32).mse
              for _ in range(50)]
    assert losses[-1] < 0.5 * losses[0]


def test_fit_log_identity_and_gating(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=2, batch_patches=8, resolution=(12, 12, 12), n_samples_train=16,
                      n_samples_eval=16, weights=LossWeights(svd_delay_epochs=1))
    seen = []
    res = fit(tiny_dataset, cfg, tmp_path, on_step=lambda s, b, bd: seen.append((s, b, bd)))
    assert [e["epoch"] for e in res.epochs] == [0, 1]
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    steps = [r for r in lines if "step" in r]
    assert len(steps) == len(seen) == 2 * steps_per_epoch(tiny_dataset, cfg)
    for rec, (_, batch, _) in zip(steps, seen):
        lam = 0.01 if rec["epoch"] >= 1 and rec["n_eligible"] else 0.0
        assert rec["lambda1_effective"] == lam
        assert rec["total"] == pytest.approx(rec["mse"] + 0.1 * rec["dssim"] + lam * rec["svd"],
                                             abs=1e-9)
        recount = sum(np.isin(np.unique(p.semantic), [1, 2, 3]).all() for p in batch) / len(batch)
        assert rec["eligible_fraction"] == recount
    assert any(r["lambda1_effective"] == 0.01 for r in steps)
    assert {p.name for p in tmp_path.iterdir()} >= {
        "config.json", "train_log.jsonl", "best.plnf", "summary.json",
        "ckpt_epoch000.plnf", "ckpt_epoch001.plnf"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"best_epoch", "best_psnr", "wall_seconds"}


def test_fit_one_epoch(tiny_dataset):
    res = fit(tiny_dataset, TrainConfig(epochs=1, batch_patches=4, resolution=(8, 8, 8),
                                        n_samples_train=8, n_samples_eval=8))
    assert len(res.epochs) == 1 and res.field.resolution == (8, 8, 8)


def test_early_stop_with_frozen_lr(tiny_dataset):
    cfg = TrainConfig(epochs=10, batch_patches=4, resolution=(8, 8, 8), n_samples_train=8,
                      n_samples_eval=8, lr_start=0.0, lr_end=0.0, early_stop_patience=1)
    res = fit(tiny_dataset, cfg)
    assert len(res.epochs) == 2 and res.best_epoch == 0


def test_fit_is_deterministic(tiny_dataset):
    cfg = TrainConfig(epochs=2, batch_patches=4, resolution=(8, 8, 8), n_samples_train=8,
                      n_samples_eval=8, seed=7)
    a, b = fit(tiny_dataset, cfg), fit(tiny_dataset, cfg)
    assert a.epochs[-1]["val_psnr"] == pytest.approx(b.epochs[-1]["val_psnr"], abs=1e-6)
    np.testing.assert_array_equal(a.final_field.density_raw, b.final_field.density_raw)
