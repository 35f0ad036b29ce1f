import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planereg.scenefield import (
    ParamGrad, VoxelField, init_field, load_checkpoint, query, query_backward,
    query_batch, resample_field, save_checkpoint, sigmoid, softplus,
)


def random_field(seed=0, res=(5, 4, 6), lo=(-1.0, 0.0, 0.5), hi=(1.0, 2.0, 2.0)):
    rng = np.random.default_rng(seed)
    return VoxelField(res, np.array(lo), np.array(hi),
                      rng.normal(size=res), rng.normal(size=res + (3,)))


def direct_trilinear(field, x):
    """Independent oracle: explicit 8-corner sum over the enclosing cell."""
    g = (np.asarray(x) - field.bbox_min) / field.voxel_size
    base = np.minimum(np.floor(g).astype(int), np.array(field.resolution) - 2)
    f = g - base
    raw_d, raw_c = 0.0, np.zeros(3)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                i, j, k = base + (dx, dy, dz)
                raw_d += w * field.density_raw[i, j, k]
                raw_c += w * field.color_raw[i, j, k]
    return raw_d, raw_c


def test_init_field():
    f = init_field((2, 2, 2), ([0, 0, 0], [1, 1, 1]), -2.0, seed=3)
    assert np.all(f.density_raw == -2.0) and f.density_raw.size == 8
    g = init_field((2, 2, 2), ([0, 0, 0], [1, 1, 1]), -2.0, seed=3)
    np.testing.assert_array_equal(f.color_raw, g.color_raw)
    assert np.all(np.abs(f.color_raw) <= 0.1)
    big = init_field((64, 64, 64), ([0, 0, 0], [1, 1, 1]))
    assert big.density_raw.size == 262144 and big.color_raw.size == 3 * 262144
    with pytest.raises(ValueError):
        init_field((0, 4, 4), ([0, 0, 0], [1, 1, 1]))


def test_field_validation():
    with pytest.raises(ValueError, match="bbox"):
        VoxelField((2, 2, 2), np.ones(3), np.zeros(3), np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 3)))
    with pytest.raises(ValueError, match="density_raw"):
        VoxelField((2, 2, 2), np.zeros(3), np.ones(3), np.zeros((2, 2, 3)), np.zeros((2, 2, 2, 3)))


def test_query_at_corner_and_outside():
    f = init_field((3, 3, 3), ([0, 0, 0], [2, 2, 2]), 0.0)
    s = query(f, f.vertex_position(1, 1, 1))
    assert s.sigma == pytest.approx(np.log(2.0), abs=1e-12)
    out = query(f, [3.0, 1.0, 1.0])
    assert out.sigma == 0.0 and not out.rgb.any()


def test_midpoint_is_average_of_corners():
    rng = np.random.default_rng(1)
    for _ in range(100):
        f = random_field(int(rng.integers(1 << 30)))
        i, j, k = (int(rng.integers(n - 1)) for n in f.resolution)
        axis = int(rng.integers(3))
        step = np.zeros(3, int)
        step[axis] = 1
        a, b = f.vertex_position(i, j, k), f.vertex_position(*(np.array([i, j, k]) + step))
        s = query(f, (a + b) / 2)
        raw = (f.density_raw[i, j, k] + f.density_raw[tuple(np.array([i, j, k]) + step)]) / 2
        assert s.sigma == pytest.approx(float(softplus(raw)), rel=1e-12)


def test_query_matches_direct_oracle():
    f = random_field(2)
    rng = np.random.default_rng(2)
    xs = f.bbox_min + rng.random((100, 3)) * (f.bbox_max - f.bbox_min)
    sig, rgb = query_batch(f, xs)
    for x, s, c in zip(xs, sig, rgb):
        rd, rc = direct_trilinear(f, x)
        assert s == pytest.approx(float(softplus(rd)), rel=1e-12)
        np.testing.assert_allclose(c, sigmoid(rc), rtol=1e-12)


def test_query_backward_finite_differences():
    rng = np.random.default_rng(3)
    for trial in range(25):
        f = random_field(100 + trial)
        x = f.bbox_min + rng.random(3) * (f.bbox_max - f.bbox_min)
        ds, dc = rng.normal(), rng.normal(size=3)
        acc = ParamGrad.zeros_like(f)
        query_backward(f, x, ds, dc, acc)

        def objective():
            s = query(f, x)
            return ds * s.sigma + dc @ s.rgb

        touched = np.flatnonzero(acc.density_grad) if trial % 2 else np.flatnonzero(acc.color_grad)
        assert 0 < touched.size <= 8 * (1 if trial % 2 else 3)
        arr = f.density_raw if trial % 2 else f.color_raw
        grad = acc.density_grad if trial % 2 else acc.color_grad
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        h = 1e-6
        for idx in touched:
            old = flat[idx]
            flat[idx] = old + h
            up = objective()
            flat[idx] = old - h
            dn = objective()
            flat[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(gflat[idx] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_query_backward_corner_and_outside():
    f = random_field(4)
    acc = ParamGrad.zeros_like(f)
    query_backward(f, f.bbox_max + 1.0, 1.0, np.ones(3), acc)
    assert acc.is_zero()
    query_backward(f, f.vertex_position(2, 1, 3), 1.0, np.zeros(3), acc)
    nz = np.flatnonzero(acc.density_grad)
    assert nz.tolist() == [np.ravel_multi_index((2, 1, 3), f.resolution)]
    raw = f.density_raw[2, 1, 3]
    assert acc.density_grad[2, 1, 3] == pytest.approx(float(sigmoid(raw)), rel=1e-12)


def test_gradient_completeness():
    f = random_field(5)
    x = np.array([0.1, 0.7, 1.1])
    before = query(f, x)
    acc = ParamGrad.zeros_like(f)
    query_backward(f, x, 1.0, np.ones(3), acc)
    outside = np.flatnonzero(acc.density_grad.ravel() == 0)
    f.density_raw.reshape(-1)[outside] += 3.0
    f.color_raw.reshape(-1, 3)[outside] -= 2.0
    after = query(f, x)
    assert after.sigma == before.sigma
    np.testing.assert_array_equal(after.rgb, before.rgb)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_sigma_nonnegative_rgb_in_range(seed, a, b, c):
    f = random_field(seed)
    f.density_raw *= 30
    s = query(f, f.bbox_min + np.array([a, b, c]) * (f.bbox_max - f.bbox_min))
    assert s.sigma >= 0
    assert np.all((s.rgb >= 0) & (s.rgb <= 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_query_continuity(seed, a, b, c):
    f = random_field(seed)
    x = f.bbox_min + np.array([a, b, c]) * (f.bbox_max - f.bbox_min)
    assert abs(query(f, x + 1e-7).sigma - query(f, x).sigma) < 1e-5


def test_checkpoint_round_trip(tmp_path):
    f = random_field(6)
    p = tmp_path / "f.plnf"
    save_checkpoint(f, p)
    g = load_checkpoint(p)
    assert g.resolution == f.resolution
    np.testing.assert_array_equal(g.bbox_min, f.bbox_min)
    np.testing.assert_array_equal(g.density_raw, f.density_raw.astype(np.float32))
    np.testing.assert_array_equal(g.color_raw, f.color_raw.astype(np.float32))


def test_checkpoint_layout(tmp_path):
    f = random_field(7, res=(2, 3, 4))
    p = tmp_path / "f.plnf"
    save_checkpoint(f, p)
    data = p.read_bytes()
    hdr = struct.Struct("<4sI3I6d")
    magic, version, nx, ny, nz, *box = hdr.unpack_from(data)
    assert (magic, version, (nx, ny, nz)) == (b"PLNF", 1, (2, 3, 4))
    body = np.frombuffer(data, "<f4", offset=hdr.size)
    # second density value is vertex (1, 0, 0): x varies fastest
    assert body[1] == np.float32(f.density_raw[1, 0, 0])
    assert body[2] == np.float32(f.density_raw[0, 1, 0])
    assert len(body) == 4 * 24


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.plnf"
    bad.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
    f = random_field(8)
    good = tmp_path / "g.plnf"
    save_checkpoint(f, good)
    (tmp_path / "t.plnf").write_bytes(good.read_bytes()[:-4])
    with pytest.raises(ValueError, match="expected"):
        load_checkpoint(tmp_path / "t.plnf")


def test_resample_refinement_is_exact():
    f = random_field(9, res=(3, 5, 4))
    g = resample_field(f, (5, 9, 7))
    rng = np.random.default_rng(9)
    xs = f.bbox_min + rng.random((200, 3)) * (f.bbox_max - f.bbox_min)
    s1, c1 = query_batch(f, xs)
    s2, c2 = query_batch(g, xs)
    np.testing.assert_allclose(s2, s1, rtol=1e-12)
    np.testing.assert_allclose(c2, c1, rtol=1e-12)
