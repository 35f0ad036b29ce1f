import numpy as np
import pytest

from planereg.renderer import (
    Camera, Rays, camera_rays, pixel_rays, rays_for_patch, render_image, render_ray,
    render_ray_backward, render_rays, render_rays_backward, sample_ray, sample_rays,
)
from planereg.scenefield import ParamGrad, VoxelField, init_field, query_batch


def identity_camera(w=8, h=6, t=(0, 0, 0)):
    return Camera(10.0, 10.0, w / 2, h / 2, w, h, np.eye(3), np.asarray(t, float))


def random_field(seed, res=(8, 8, 8), scale=1.0):
    rng = np.random.default_rng(seed)
    return VoxelField(res, np.zeros(3), np.full(3, 2.0),
                      rng.normal(0, 1.5, res) * scale, rng.normal(size=res + (3,)))


def random_rays(rng, n, near=0.05, far=4.0):
    o = rng.uniform(-0.5, 2.5, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Rays(o, d, near, far)


def composite_oracle(field, rays, t):
    """Plain numpy alpha compositing over field.query_batch."""
    r, n = t.shape
    pts = rays.points(t).reshape(-1, 3)
    sigma, rgb = query_batch(field, pts)
    sigma, rgb = sigma.reshape(r, n), rgb.reshape(r, n, 3)
    delta = np.concatenate([np.diff(t, axis=1), rays.far[:, None] - t[:, -1:]], axis=1)
    alpha = 1 - np.exp(-sigma * delta)
    trans = np.cumprod(np.concatenate([np.ones((r, 1)), 1 - alpha], axis=1), axis=1)
    w = trans[:, :-1] * alpha
    return (w[..., None] * rgb).sum(1), (w * t).sum(1), w, trans[:, -1]


def test_camera_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(1, 1, 0, 0, 2, 2, np.diag([1, 1, -1.0]), np.zeros(3))
    with pytest.raises(ValueError, match="focal"):
        Camera(0, 1, 0, 0, 2, 2, np.eye(3), np.zeros(3))
    cam = identity_camera(t=(1, 2, 3))
    back = Camera.from_c2w(cam.c2w, **cam.intrinsics())
    np.testing.assert_array_equal(back.c2w, cam.c2w)


def test_principal_ray():
    cam = identity_camera()
    rays = pixel_rays(cam, [cam.cy - 0.5], [cam.cx - 0.5])
    np.testing.assert_allclose(rays.dirs[0], [0, 0, 1], atol=1e-15)


def test_patch_rays():
    cam = Camera(100, 100, 80, 60, 160, 120, np.eye(3), np.zeros(3))
    rays = rays_for_patch(cam, (10, 30), 20)
    assert len(rays) == 400
    np.testing.assert_allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-12)
    # row-major: second ray is one column to the right
    assert rays.dirs[1, 0] > rays.dirs[0, 0] and rays.dirs[20, 1] > rays.dirs[0, 1]
    moved = Camera(100, 100, 80, 60, 160, 120, np.eye(3), np.array([1.0, -2.0, 3.0]))
    r2 = rays_for_patch(moved, (10, 30), 20)
    np.testing.assert_array_equal(r2.dirs, rays.dirs)
    np.testing.assert_allclose(r2.origins - rays.origins, np.tile([1.0, -2.0, 3.0], (400, 1)))
    with pytest.raises(ValueError, match="patch out of bounds"):
        rays_for_patch(cam, (101, 0), 20)
    with pytest.raises(ValueError, match="patch out of bounds"):
        rays_for_patch(cam, (0, -1), 20)


def test_ray_bounds_validated():
    with pytest.raises(ValueError):
        Rays(np.zeros(3), [0, 0, 1], 2.0, 1.0)
    with pytest.raises(ValueError):
        Rays(np.zeros(3), [0, 0, 1], 0.0, 1.0)


def test_sampling():
    ray = Rays(np.zeros(3), [0, 0, 1.0], 1.0, 5.0)
    np.testing.assert_allclose(sample_ray(ray, 4, stratified=False), [1.5, 2.5, 3.5, 4.5])
    np.testing.assert_array_equal(sample_ray(ray, 8, True, seed=3), sample_ray(ray, 8, True, seed=3))
    rng = np.random.default_rng(0)
    rays = random_rays(rng, 1000, near=0.5, far=3.0)
    t = sample_rays(rays, 16, stratified=True, rng=1)
    width = (3.0 - 0.5) / 16
    for k in range(16):
        lo, hi = 0.5 + k * width, 0.5 + (k + 1) * width
        assert np.all((t[:, k] >= lo) & (t[:, k] <= hi))
    assert np.all(np.diff(t, axis=1) > 0)
    with pytest.raises(ValueError):
        sample_ray(ray, 1)


def test_empty_field():
    f = init_field((4, 4, 4), (np.zeros(3), np.ones(3)), init_density_raw=-800.0)
    cam = identity_camera()
    ray = pixel_rays(cam, [2], [3], 0.05, 3.0)
    res = render_ray(f, ray, sample_ray(ray, 32))
    assert res.depth == 0.0 and res.transmittance_final == 1.0
    assert not res.color.any()
    rgb, depth = render_image(f, cam, 16, far=3.0)
    assert not rgb.any() and not depth.any()


def test_single_opaque_sample():
    f = init_field((2, 2, 2), (np.zeros(3), np.ones(3)), init_density_raw=-800.0)
    ray = Rays([0.5, 0.5, -1.0], [0, 0, 1.0], 0.05, 3.0)
    t = np.array([0.5, 1.2, 1.5, 2.5])
    # the whole box is opaque; t = 0.5 lies before it, t = 1.2 is the first hit
    f.density_raw[:] = 1e4
    f.color_raw[:] = np.array([2.0, -1.0, 0.0])
    res = render_ray(f, ray, t)
    assert res.depth == pytest.approx(1.2, abs=1e-12)
    np.testing.assert_allclose(res.color, 1 / (1 + np.exp(-np.array([2.0, -1.0, 0.0]))), atol=1e-12)


def test_homogeneous_medium_closed_form():
    sigma0 = 0.5
    raw = np.log(np.expm1(sigma0))  # inverse softplus
    f = init_field((4, 4, 4), (np.full(3, -10.0), np.full(3, 10.0)), raw)
    ray = Rays(np.zeros(3), [0, 0.6, 0.8], 0.5, 4.5)
    res = render_ray(f, ray, sample_ray(ray, 1024))
    assert res.transmittance_final == pytest.approx(np.exp(-sigma0 * 4.0), abs=1e-3)


def test_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    f = random_field(1)
    rays = random_rays(rng, 200)
    t = sample_rays(rays, 24, stratified=True, rng=rng)
    res = render_rays(f, rays, t)
    color, depth, w, tf = composite_oracle(f, rays, t)
    np.testing.assert_allclose(res.color, color, atol=1e-12)
    np.testing.assert_allclose(res.depth, depth, atol=1e-12)
    np.testing.assert_allclose(res.weights, w, atol=1e-12)
    np.testing.assert_allclose(res.transmittance_final, tf, atol=1e-12)


def test_conservation_monotone_and_depth_bounds():
    rng = np.random.default_rng(2)
    f = random_field(2, scale=3.0)
    rays = random_rays(rng, 10_000)
    t = sample_rays(rays, 32, stratified=True, rng=rng)
    res = render_rays(f, rays, t)
    total = res.weights.sum(axis=1) + res.transmittance_final
    assert np.max(np.abs(total - 1)) < 1e-6
    assert np.all(res.weights >= 0)
    trans = 1 - np.cumsum(res.weights, axis=1)
    assert np.all(np.diff(trans, axis=1) <= 1e-15)
    opaque = res.transmittance_final < 1 - 1e-9
    norm = res.depth[opaque] / (1 - res.transmittance_final[opaque])
    assert np.all(norm >= rays.near[opaque] - 1e-9) and np.all(norm <= rays.far[opaque] + 1e-9)


def test_opaque_plane_depth():
    # plane z = d in front of a camera looking along +z; solid for z >= d
    d = 1.3
    res_ = (16, 16, 33)
    f = VoxelField(res_, np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 3.2]),
                   np.zeros(res_), np.zeros(res_ + (3,)))
    # raw = K (z - d) is linear, so trilinear interpolation reproduces it exactly
    z = np.linspace(0, 3.2, 33)
    f.density_raw[:] = (1e5 * (z - d))[None, None, :]
    cam = Camera(20, 20, 8, 8, 16, 16, np.eye(3), np.array([0.0, 0.0, 0.0]))
    rays = camera_rays(cam, 0.05, 3.0)
    t = sample_rays(rays, 192)
    res = render_rays(f, rays, t)
    gt = d / rays.dirs[:, 2]
    spacing = (3.0 - 0.05) / 192
    assert np.max(np.abs(res.depth - gt)) < spacing


def test_backward_finite_differences_all_parameters():
    rng = np.random.default_rng(3)
    for trial in range(3):
        f = random_field(10 + trial)
        ray = Rays([0.3, 0.4, 0.2], [0.5, 0.6, 0.62] / np.linalg.norm([0.5, 0.6, 0.62]), 0.05, 3.5)
        t = sample_ray(ray, 16, stratified=True, seed=trial)
        dc, dd = rng.normal(size=3), rng.normal()
        acc = ParamGrad.zeros_like(f)
        render_ray_backward(f, ray, t, dc, dd, acc)

        def objective():
            r = render_ray(f, ray, t)
            return dc @ r.color + dd * r.depth

        h = 1e-6
        for arr, grad in ((f.density_raw, acc.density_grad), (f.color_raw, acc.color_grad)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = objective()
                flat[i] = old - h
                dn = objective()
                flat[i] = old
                fd[i] = (up - dn) / (2 * h)
            scale = np.max(np.abs(fd))
            assert scale > 0
            assert np.max(np.abs(gflat - fd)) / scale < 1e-3


def test_backward_transmittance_cotangent():
    rng = np.random.default_rng(4)
    f = random_field(4)
    rays = random_rays(rng, 5)
    t = sample_rays(rays, 12)
    gt = rng.normal(size=5)
    acc = ParamGrad.zeros_like(f)
    render_rays_backward(f, rays, t, np.zeros((5, 3)), np.zeros(5), acc, d_tfinal=gt)
    assert not acc.color_grad.any()
    idx = np.argsort(-np.abs(acc.density_grad.ravel()))[:20]
    flat = f.density_raw.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + 1e-6
        up = gt @ render_rays(f, rays, t).transmittance_final
        flat[i] = old - 1e-6
        dn = gt @ render_rays(f, rays, t).transmittance_final
        flat[i] = old
        fd = (up - dn) / 2e-6
        assert abs(acc.density_grad.ravel()[i] - fd) <= 1e-5 * max(abs(fd), 1e-4)


def test_backward_zero_cotangent_and_empty_space_depth():
    f = random_field(5)
    ray = Rays([0.1, 0.1, 0.1], [0, 0, 1.0], 0.05, 3.0)
    t = sample_ray(ray, 16)
    acc = ParamGrad.zeros_like(f)
    render_ray_backward(f, ray, t, np.zeros(3), 0.0, acc)
    assert acc.is_zero()
    empty = init_field((8, 8, 8), (np.zeros(3), np.full(3, 2.0)), init_density_raw=-30.0)
    render_ray_backward(empty, ray, t, np.zeros(3), 1.0, acc)
    assert acc.density_grad.any()


def test_render_image_equals_per_pixel_loop():
    f = random_field(6)
    cam = Camera(6, 6, 4, 3, 8, 6, np.eye(3), np.array([1.0, 1.0, -0.5]))
    rgb, depth = render_image(f, cam, 20, far=4.0)
    assert rgb.shape == (6, 8, 3) and depth.shape == (6, 8)
    for i in range(6):
        for j in range(8):
            ray = pixel_rays(cam, [i], [j], 0.05, 4.0)
            r = render_ray(f, ray, sample_ray(ray, 20))
            assert np.array_equal(r.color, rgb[i, j])
            assert r.depth == depth[i, j]


def test_image_ray_count():
    cam = Camera(100, 100, 80, 60, 160, 120, np.eye(3), np.zeros(3))
    assert len(camera_rays(cam)) == 19200


def test_workers_reproducible():
    rng = np.random.default_rng(7)
    f = random_field(7)
    rays = random_rays(rng, 301)
    t = sample_rays(rays, 16, True, rng)
    a = render_rays(f, rays, t, workers=1)
    b = render_rays(f, rays, t, workers=3)
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.depth, b.depth)
    dc, dd = rng.normal(size=(301, 3)), rng.normal(size=301)
    g1, g2, g3 = (ParamGrad.zeros_like(f) for _ in range(3))
    render_rays_backward(f, rays, t, dc, dd, g1, workers=3)
    render_rays_backward(f, rays, t, dc, dd, g2, workers=3)
    render_rays_backward(f, rays, t, dc, dd, g3, workers=1)
    np.testing.assert_array_equal(g1.density_grad, g2.density_grad)
    np.testing.assert_allclose(g1.density_grad, g3.density_grad, rtol=1e-10, atol=1e-14)


def test_rejects_unsorted_samples():
    f = random_field(8)
    ray = Rays([0.1, 0.1, 0.1], [0, 0, 1.0], 0.05, 3.0)
    with pytest.raises(ValueError, match="increasing"):
        render_ray(f, ray, [1.0, 0.5, 2.0])
