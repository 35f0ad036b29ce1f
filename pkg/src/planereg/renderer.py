"""Pinhole ray generation and alpha-compositing volume rendering of colour and
expected depth, with the exact reverse pass into voxel-field gradients.

Camera frame follows the OpenCV convention (x right, y down, z forward);
poses are camera-to-world. Pixel ``(row, col)`` is sampled at its centre
``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .scenefield import ParamGrad, VoxelField

DEFAULT_NEAR = 0.05
N_SAMPLES_TRAIN = 64
N_SAMPLES_EVAL = 192


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) camera-to-world
    translation: np.ndarray  # (3,) camera centre in world

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def c2w(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_c2w(cls, c2w, fx, fy, cx, cy, width, height) -> "Camera":
        m = np.asarray(c2w, dtype=float).reshape(4, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), m[:3, :3], m[:3, 3])

    def intrinsics(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


@dataclass
class Rays:
    """A batch of rays; ``origins``/``dirs`` are (R, 3), bounds are (R,)."""
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        self.origins = np.ascontiguousarray(np.asarray(self.origins, dtype=float).reshape(-1, 3))
        self.dirs = np.ascontiguousarray(np.asarray(self.dirs, dtype=float).reshape(-1, 3))
        n = len(self.origins)
        self.near = np.broadcast_to(np.asarray(self.near, dtype=float), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=float), (n,)).copy()
        if np.any(self.near <= 0) or np.any(self.near >= self.far):
            raise ValueError("ray bounds must satisfy 0 < near < far")

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, sl) -> "Rays":
        if isinstance(sl, (int, np.integer)):
            sl = slice(sl, sl + 1)
        return Rays(self.origins[sl], self.dirs[sl], self.near[sl], self.far[sl])

    def points(self, t: np.ndarray) -> np.ndarray:
        """World points at distances ``t`` (R,) or (R, n)."""
        t = np.asarray(t, dtype=float)
        if t.ndim == 1:
            return self.origins + t[:, None] * self.dirs
        return self.origins[:, None, :] + t[..., None] * self.dirs[:, None, :]

    @staticmethod
    def concat(items) -> "Rays":
        items = list(items)
        return Rays(
            np.concatenate([r.origins for r in items]),
            np.concatenate([r.dirs for r in items]),
            np.concatenate([r.near for r in items]),
            np.concatenate([r.far for r in items]),
        )


@dataclass
class RenderResult:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    weights: np.ndarray  # (R, n)
    transmittance_final: np.ndarray  # (R,)
    sample_t: np.ndarray  # (R, n)


def pixel_rays(camera: Camera, rows: np.ndarray, cols: np.ndarray,
               near: float = DEFAULT_NEAR, far: float = 100.0) -> Rays:
    rows = np.asarray(rows, dtype=float).ravel()
    cols = np.asarray(cols, dtype=float).ravel()
    d_cam = np.stack([
        (cols + 0.5 - camera.cx) / camera.fx,
        (rows + 0.5 - camera.cy) / camera.fy,
        np.ones_like(rows),
    ], axis=1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.translation, d.shape)
    return Rays(o, d, near, far)


def rays_for_patch(camera: Camera, top_left: tuple[int, int], patch_size: int,
                   near: float = DEFAULT_NEAR, far: float = 100.0) -> Rays:
    """Row-major rays for the ``patch_size``^2 pixels below/right of ``top_left=(row, col)``."""
    i, j = top_left
    if i < 0 or j < 0 or i + patch_size > camera.height or j + patch_size > camera.width:
        raise ValueError("patch out of bounds")
    rr, cc = np.meshgrid(np.arange(i, i + patch_size), np.arange(j, j + patch_size), indexing="ij")
    return pixel_rays(camera, rr, cc, near, far)


def camera_rays(camera: Camera, near: float = DEFAULT_NEAR, far: float = 100.0) -> Rays:
    rr, cc = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return pixel_rays(camera, rr, cc, near, far)


def sample_rays(rays: Rays, n_samples: int, stratified: bool = False, rng=None) -> np.ndarray:
    """Sample distances (R, n): bin midpoints, or one uniform draw per bin."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    if stratified:
        rng = np.random.default_rng(rng)
        u = rng.random((len(rays), n_samples))
    else:
        u = np.full((len(rays), n_samples), 0.5)
    frac = edges[:-1] + u * (edges[1] - edges[0])
    return rays.near[:, None] + frac * (rays.far - rays.near)[:, None]


def sample_ray(ray: Rays, n_samples: int, stratified: bool = False, seed=None) -> np.ndarray:
    """Sample distances for the first ray of ``ray``."""
    return sample_rays(ray[:1], n_samples, stratified, seed)[0]


def _geometry(field: VoxelField):
    return (np.asarray(field.resolution, dtype=np.int64), field.bbox_min, field.voxel_size)


def _blocks(n: int, workers: int):
    workers = max(1, min(int(workers), n)) if n else 1
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def render_rays(field: VoxelField, rays: Rays, sample_t: np.ndarray,
                workers: int = 1) -> RenderResult:
    """Composite colour and expected depth along each ray.

    With ``delta_i`` the gap to the next sample (the last one runs to ``far``),
    ``alpha_i = 1 - exp(-sigma_i delta_i)`` and ``w_i = T_i alpha_i``.
    """
    t = np.ascontiguousarray(np.atleast_2d(np.asarray(sample_t, dtype=float)))
    if len(t) != len(rays):
        raise ValueError("need one row of sample distances per ray")
    if np.any(np.diff(t, axis=1) <= 0):
        raise ValueError("sample distances must be strictly increasing")
    r, n = t.shape
    color = np.zeros((r, 3))
    depth = np.zeros(r)
    weights = np.zeros((r, n))
    tfinal = np.ones(r)
    res, bmin, vsize = _geometry(field)
    packed = field.packed()

    def run(sl):
        _kernels.render_forward(packed, res, bmin, vsize, rays.origins[sl], rays.dirs[sl],
                                rays.far[sl], t[sl], color[sl], depth[sl], weights[sl],
                                tfinal[sl])

    blocks = _blocks(r, workers)
    if len(blocks) == 1:
        run(blocks[0])
    else:
        with ThreadPoolExecutor(len(blocks)) as pool:
            list(pool.map(run, blocks))
    return RenderResult(color, depth, weights, tfinal, t)


def render_ray(field: VoxelField, ray: Rays, sample_t) -> RenderResult:
    """Render one ray; fields of the result drop the leading batch axis."""
    res = render_rays(field, ray[:1], np.asarray(sample_t, dtype=float)[None, :])
    return RenderResult(res.color[0], float(res.depth[0]), res.weights[0],
                        float(res.transmittance_final[0]), res.sample_t[0])


def render_rays_backward(field: VoxelField, rays: Rays, sample_t, d_color, d_depth,
                         accum: ParamGrad, workers: int = 1, d_tfinal=None) -> None:
    """Accumulate into ``accum`` the gradient of
    ``sum(d_color . color + d_depth * depth + d_tfinal * transmittance_final)``.

    Each worker owns a private gradient buffer; buffers are merged in block
    order, so the result is reproducible for a fixed worker count.
    """
    t = np.ascontiguousarray(np.atleast_2d(np.asarray(sample_t, dtype=float)))
    d_color = np.ascontiguousarray(np.asarray(d_color, dtype=float).reshape(-1, 3))
    d_depth = np.ascontiguousarray(np.asarray(d_depth, dtype=float).reshape(-1))
    if d_tfinal is None:
        d_tfinal = np.zeros(len(t))
    d_tfinal = np.ascontiguousarray(np.asarray(d_tfinal, dtype=float).reshape(-1))
    if not (d_color.any() or d_depth.any() or d_tfinal.any()):
        return
    res, bmin, vsize = _geometry(field)
    packed = field.packed()

    def run(sl):
        buf = np.zeros_like(packed)
        _kernels.render_backward(packed, res, bmin, vsize, rays.origins[sl], rays.dirs[sl],
                                 rays.far[sl], t[sl], d_color[sl], d_depth[sl], d_tfinal[sl], buf)
        return buf

    blocks = _blocks(len(t), workers)
    if len(blocks) == 1:
        bufs = [run(blocks[0])]
    else:
        with ThreadPoolExecutor(len(blocks)) as pool:
            bufs = list(pool.map(run, blocks))
    for buf in bufs:
        accum.add_packed(buf)


def render_ray_backward(field: VoxelField, ray: Rays, sample_t, d_color, d_depth: float,
                        accum: ParamGrad) -> None:
    render_rays_backward(field, ray[:1], np.asarray(sample_t, dtype=float)[None, :],
                         np.asarray(d_color, dtype=float)[None, :], [d_depth], accum)


def render_image(field: VoxelField, camera: Camera, n_samples: int = N_SAMPLES_EVAL,
                 stratified: bool = False, near: float = DEFAULT_NEAR, far: float = 100.0,
                 rng=None, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Render a full frame; returns colour (H, W, 3) and depth (H, W)."""
    rays = camera_rays(camera, near, far)
    t = sample_rays(rays, n_samples, stratified, rng)
    res = render_rays(field, rays, t, workers=workers)
    h, w = camera.height, camera.width
    return res.color.reshape(h, w, 3), res.depth.reshape(h, w)
