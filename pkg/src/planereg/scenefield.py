"""Dense voxel radiance field: density and colour stored on grid vertices,
trilinearly interpolated, with softplus / sigmoid activations.

Parameters live on the ``nx * ny * nz`` vertices of a regular lattice spanning
the bounding box (vertex ``i`` along an axis sits at
``min + i * (max - min) / (n - 1)``). Points outside the box are empty space.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"PLNF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI3I6d")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class VoxelField:
    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density_raw: np.ndarray  # (nx, ny, nz)
    color_raw: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.bbox_min = np.asarray(self.bbox_min, dtype=float)
        self.bbox_max = np.asarray(self.bbox_max, dtype=float)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError(f"resolution must be three integers >= 2, got {self.resolution}")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox min must be < max componentwise")
        if self.density_raw.shape != self.resolution:
            raise ValueError("density_raw shape does not match resolution")
        if self.color_raw.shape != self.resolution + (3,):
            raise ValueError("color_raw shape does not match resolution")

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.resolution) - 1)

    def packed(self) -> np.ndarray:
        """(n_vertices, 4) table of raw parameters: density then rgb."""
        return np.concatenate(
            [self.density_raw.reshape(-1, 1), self.color_raw.reshape(-1, 3)], axis=1
        )

    def copy(self) -> "VoxelField":
        return VoxelField(
            self.resolution, self.bbox_min.copy(), self.bbox_max.copy(),
            self.density_raw.copy(), self.color_raw.copy(),
        )

    def vertex_position(self, ix: int, iy: int, iz: int) -> np.ndarray:
        return self.bbox_min + np.array([ix, iy, iz]) * self.voxel_size


@dataclass(frozen=True)
class FieldSample:
    sigma: float
    rgb: np.ndarray


@dataclass
class ParamGrad:
    density_grad: np.ndarray
    color_grad: np.ndarray

    @classmethod
    def zeros_like(cls, field: VoxelField) -> "ParamGrad":
        return cls(np.zeros_like(field.density_raw), np.zeros_like(field.color_raw))

    def add_packed(self, packed_grad: np.ndarray) -> None:
        self.density_grad += packed_grad[:, 0].reshape(self.density_grad.shape)
        self.color_grad += packed_grad[:, 1:].reshape(self.color_grad.shape)

    def __iadd__(self, other: "ParamGrad") -> "ParamGrad":
        self.density_grad += other.density_grad
        self.color_grad += other.color_grad
        return self

    def is_zero(self) -> bool:
        return not (self.density_grad.any() or self.color_grad.any())


def init_field(resolution, bbox, init_density_raw: float = -2.0, seed: int = 0) -> VoxelField:
    """Constant density everywhere, colour raw values uniform in [-0.1, 0.1]."""
    res = tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) <= 0:
        raise ValueError(f"invalid resolution {resolution}")
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    rng = np.random.default_rng(seed)
    return VoxelField(
        resolution=res,
        bbox_min=lo,
        bbox_max=hi,
        density_raw=np.full(res, float(init_density_raw)),
        color_raw=rng.uniform(-0.1, 0.1, size=res + (3,)),
    )


@dataclass
class Interp:
    """Trilinear stencil for a batch of points: 8 vertex indices and weights."""
    index: np.ndarray  # (M, 8) flat vertex ids
    weight: np.ndarray  # (M, 8)
    inside: np.ndarray  # (M,) bool


def interp_stencil(field: VoxelField, xs: np.ndarray) -> Interp:
    xs = np.asarray(xs, dtype=float).reshape(-1, 3)
    res = np.array(field.resolution)
    g = (xs - field.bbox_min) / field.voxel_size
    inside = np.all((xs >= field.bbox_min) & (xs <= field.bbox_max), axis=1)
    base = np.clip(np.floor(g), 0, res - 2).astype(np.int64)
    f = np.clip(g - base, 0.0, 1.0)
    nx, ny, nz = field.resolution
    strides = np.array([ny * nz, nz, 1])
    b = base @ strides
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    index = np.stack([
        b, b + strides[2], b + strides[1], b + strides[1] + strides[2],
        b + strides[0], b + strides[0] + strides[2], b + strides[0] + strides[1],
        b + strides[0] + strides[1] + strides[2],
    ], axis=1)
    weight = np.stack([
        gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
        fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz,
    ], axis=1)
    weight[~inside] = 0.0
    return Interp(index, weight, inside)


def interpolate_raw(packed: np.ndarray, stencil: Interp) -> np.ndarray:
    """Interpolated raw (M, 4) values."""
    out = np.zeros((len(stencil.weight), packed.shape[1]))
    for k in range(8):
        out += stencil.weight[:, k, None] * packed[stencil.index[:, k]]
    return out


def activate(raw: np.ndarray, inside: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sigma = np.where(inside, softplus(raw[:, 0]), 0.0)
    rgb = np.where(inside[:, None], sigmoid(raw[:, 1:]), 0.0)
    return sigma, rgb


def query_batch(field: VoxelField, xs) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`query`: returns sigma (M,) and rgb (M, 3)."""
    st = interp_stencil(field, xs)
    raw = interpolate_raw(field.packed(), st)
    return activate(raw, st.inside)


def query(field: VoxelField, x) -> FieldSample:
    sigma, rgb = query_batch(field, np.asarray(x, dtype=float)[None, :])
    return FieldSample(float(sigma[0]), rgb[0])


def resample_field(field: VoxelField, resolution) -> VoxelField:
    """Same bounding box at a new resolution, raw parameters trilinearly
    interpolated from the old grid.

    Refining a grid (n - 1 dividing m - 1 per axis) represents exactly the
    same raw function.
    """
    res = tuple(int(r) for r in resolution)
    axes = [np.linspace(field.bbox_min[i], field.bbox_max[i], res[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = np.clip(pts, field.bbox_min, field.bbox_max)
    raw = interpolate_raw(field.packed(), interp_stencil(field, pts))
    return VoxelField(res, field.bbox_min.copy(), field.bbox_max.copy(),
                      raw[:, 0].reshape(res), raw[:, 1:].reshape(res + (3,)))


def raw_cotangent(raw: np.ndarray, inside: np.ndarray, d_sigma: np.ndarray,
                  d_rgb: np.ndarray) -> np.ndarray:
    """Chain rule through the activations: d/d(raw) given d/d(sigma, rgb)."""
    out = np.zeros_like(raw)
    out[:, 0] = d_sigma * sigmoid(raw[:, 0])  # softplus' = sigmoid
    s = sigmoid(raw[:, 1:])
    out[:, 1:] = d_rgb * s * (1.0 - s)
    out[~inside] = 0.0
    return out


def scatter_raw_grad(stencil: Interp, d_raw: np.ndarray, n_vertices: int) -> np.ndarray:
    """Distribute per-point raw cotangents to grid vertices -> (n_vertices, C)."""
    idx = stencil.index.ravel()
    out = np.empty((n_vertices, d_raw.shape[1]))
    for c in range(d_raw.shape[1]):
        vals = (stencil.weight * d_raw[:, c, None]).ravel()
        out[:, c] = np.bincount(idx, weights=vals, minlength=n_vertices)
    return out


def query_backward_batch(field: VoxelField, xs, d_sigma, d_rgb, accum: ParamGrad) -> None:
    xs = np.asarray(xs, dtype=float).reshape(-1, 3)
    d_sigma = np.asarray(d_sigma, dtype=float).reshape(-1)
    d_rgb = np.asarray(d_rgb, dtype=float).reshape(-1, 3)
    st = interp_stencil(field, xs)
    if not st.inside.any():
        return
    raw = interpolate_raw(field.packed(), st)
    d_raw = raw_cotangent(raw, st.inside, d_sigma, d_rgb)
    accum.add_packed(scatter_raw_grad(st, d_raw, field.n_vertices))


def query_backward(field: VoxelField, x, d_sigma: float, d_rgb, accum: ParamGrad) -> None:
    """Accumulate d(d_sigma*sigma + d_rgb.rgb)/d(params) at point ``x`` into ``accum``."""
    query_backward_batch(field, np.asarray(x, dtype=float)[None, :], [d_sigma],
                         np.asarray(d_rgb, dtype=float)[None, :], accum)


def save_checkpoint(field: VoxelField, path) -> None:
    path = Path(path)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *field.resolution,
                          *field.bbox_min, *field.bbox_max)
    # x-fastest order == C order of the (z, y, x) transpose
    dens = np.ascontiguousarray(field.density_raw.transpose(2, 1, 0)).astype("<f4")
    col = np.ascontiguousarray(field.color_raw.transpose(2, 1, 0, 3)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dens.tobytes())
        fh.write(col.tobytes())


def load_checkpoint(path) -> VoxelField:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, nx, ny, nz, *box = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * n * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    dens = body[:n].reshape(nz, ny, nx).transpose(2, 1, 0)
    col = body[n:].reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return VoxelField(
        (nx, ny, nz), np.array(box[:3]), np.array(box[3:]),
        dens.astype(float), col.astype(float),
    )
