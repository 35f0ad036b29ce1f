"""Image, depth and point-cloud file formats."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_PNG_SCALE = 1000.0  # stored value / 1000 = metres

# class id -> display colour for PLY export
CLASS_COLORS = {
    0: (0, 0, 0),
    1: (128, 64, 128),
    2: (255, 255, 255),
    3: (244, 35, 232),
    4: (70, 70, 70),
}


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_rgb_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_label_png(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("class ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8)).save(path)


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).astype(np.int64)


def write_depth_png(path, depth: np.ndarray) -> None:
    """16-bit grayscale PNG in millimetres (saturates at 65.535 m)."""
    mm = np.clip(np.rint(np.asarray(depth, dtype=float) * DEPTH_PNG_SCALE), 0, 65535)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / DEPTH_PNG_SCALE


def write_depth_bin(path, depth: np.ndarray) -> None:
    np.ascontiguousarray(depth, dtype="<f4").tofile(path)


def read_depth_bin(path, shape: tuple[int, int]) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: expected {shape[0] * shape[1]} depth values, found {data.size}")
    return data.reshape(shape).astype(float)


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII PLY with float xyz and uchar rgb per vertex."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if colors is None:
        colors = np.full((len(pts), 3), 255, dtype=np.uint8)
    colors = np.asarray(colors).reshape(-1, 3).astype(np.uint8)
    if len(colors) != len(pts):
        raise ValueError("one colour per point required")
    header = "\n".join([
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ])
    table = np.column_stack([pts, colors.astype(float)])
    np.savetxt(path, table, fmt=["%.6f"] * 3 + ["%d"] * 3, header=header, comments="")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the ASCII PLY layout produced by :func:`write_ply`."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            end = i
            break
    if n is None or end is None:
        raise ValueError(f"{path}: malformed PLY header")
    body = lines[end + 1:end + 1 + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} vertices, found {len(body)}")
    arr = np.array([ln.split() for ln in body], dtype=float).reshape(n, 6)
    return arr[:, :3], arr[:, 3:].astype(np.uint8)


def class_colors(labels: np.ndarray) -> np.ndarray:
    return np.array([CLASS_COLORS.get(int(c), (255, 0, 0)) for c in np.ravel(labels)],
                    dtype=np.uint8).reshape(-1, 3)
