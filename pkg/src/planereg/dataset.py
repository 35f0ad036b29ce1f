"""Procedural street scenes with exact ground truth, and the on-disk dataset
format.

World frame: z up, travel along +y, x to the right of the direction of travel.
Class table: 0 background, 1 road, 2 lane, 3 sidewalk, 4 building.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import fileio
from .losses import SemanticGroups
from .renderer import DEFAULT_NEAR, Camera, Rays, camera_rays

MANIFEST_VERSION = 1
CLASS_TABLE = {0: "background", 1: "road", 2: "lane", 3: "sidewalk", 4: "building"}
DEFAULT_GROUPS = SemanticGroups({"ground": frozenset({1, 2, 3})})
PRESETS = ("flat-road", "slanted-road", "curb")
IMAGE_SIZE = (160, 120)
FOCAL = 100.0
BASELINE = 0.5


class DatasetError(Exception):
    """Base class for dataset loading problems."""


class MissingFileError(DatasetError):
    pass


class ManifestSchemaError(DatasetError):
    pass


class UnsupportedVersionError(DatasetError):
    pass


class UnknownClassError(DatasetError):
    pass


@dataclass(frozen=True)
class Texture:
    kind: str = "uniform"  # uniform | stripes | checker
    color_a: tuple = (0.5, 0.5, 0.5)
    color_b: tuple = (0.5, 0.5, 0.5)
    period: float = 1.0
    duty: float = 0.5  # stripes: fraction of each period painted color_a
    phase: float = 0.0  # stripes: shift along the surface, in periods

    def lookup(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Colour at in-surface coordinates ``a`` (across) and ``b`` (along)."""
        ca, cb = np.asarray(self.color_a), np.asarray(self.color_b)
        if self.kind == "uniform":
            return np.broadcast_to(ca, a.shape + (3,)).copy()
        if self.kind == "stripes":
            on = np.mod(b / self.period + self.phase, 1.0) < self.duty
        elif self.kind == "checker":
            on = (np.floor(a / self.period) + np.floor(b / self.period)) % 2 == 0
        else:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        return np.where(on[:, None], ca, cb)


@dataclass(frozen=True)
class PlaneRect:
    """Rectangle centred at ``center`` spanned by unit axes ``u`` (across) and
    ``v`` (along), with half extents."""
    name: str
    class_id: int
    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float
    texture: Texture = Texture()

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def intersect(self, rays: Rays) -> np.ndarray:
        n = self.normal
        c = np.asarray(self.center, dtype=float)
        denom = rays.dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - rays.origins) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        p = rays.origins + np.where(np.isfinite(t), t, 0.0)[:, None] * rays.dirs
        a, b = (p - c) @ np.asarray(self.u), (p - c) @ np.asarray(self.v)
        ok = (t > 1e-9) & (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        return np.where(ok, t, np.inf)

    def shade(self, p: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return self.texture.lookup((p - c) @ np.asarray(self.u), (p - c) @ np.asarray(self.v))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box."""
    name: str
    class_id: int
    lo: tuple
    hi: tuple
    texture: Texture = Texture()

    def intersect(self, rays: Rays) -> np.ndarray:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays.dirs
            t1 = (lo - rays.origins) * inv
            t2 = (hi - rays.origins) * inv
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)

    def shade(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        # face axis = coordinate closest to a box wall
        gap = np.minimum(np.abs(p - lo), np.abs(p - hi))
        axis = gap.argmin(axis=1)
        # in-face coordinates: remaining axes, "along" is z for walls, y otherwise
        a = np.where(axis == 0, p[:, 1], p[:, 0])
        b = np.where(axis == 2, p[:, 1], p[:, 2])
        return self.texture.lookup(a, b)


@dataclass(frozen=True)
class SceneSpec:
    preset: str
    seed: int
    primitives: tuple
    bbox_min: tuple
    bbox_max: tuple
    ground_point: tuple = (0.0, 0.0, 0.0)
    ground_normal: tuple = (0.0, 0.0, 1.0)
    ambient: float = 1.0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    @property
    def classes(self) -> set[int]:
        return {p.class_id for p in self.primitives}

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.bbox_max, self.bbox_min)))

    def ground_height(self, x: float, y: float) -> float:
        n = np.asarray(self.ground_normal, float)
        p0 = np.asarray(self.ground_point, float)
        return float(p0[2] - (n[0] * (x - p0[0]) + n[1] * (y - p0[1])) / n[2])


def _ground_rect(name, class_id, x0, x1, y0, y1, tex, grade_deg=0.0, z0=0.0):
    """Ground rectangle over x in [x0, x1], y in [y0, y1] on the plane through
    (0, 0, z0) descending along +y by ``grade_deg``."""
    g = math.radians(grade_deg)
    v = (0.0, math.cos(g), -math.sin(g))
    yc = 0.5 * (y0 + y1)
    center = (0.5 * (x0 + x1), yc, z0 - math.tan(g) * yc)
    return PlaneRect(name, class_id, center, (1.0, 0.0, 0.0), v,
                     0.5 * (x1 - x0), 0.5 * (y1 - y0) / math.cos(g), tex)


def generate_scene(preset: str = "flat-road", seed: int = 0) -> SceneSpec:
    """Street scene: textureless road with dashed lane markings (centre line
    and two dividers), sidewalks and checkered facades on both sides.

    ``flat-road`` keeps road, lane and sidewalk on z = 0; ``slanted-road``
    tilts the ground to a 5 degree downhill grade along +y; ``curb`` raises the
    sidewalks 0.15 m above the road.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    rng = np.random.default_rng(seed)
    y0, y1 = -1.0, 17.0
    road_w, lane_w, walk_w = 3.0, 0.15, 1.5
    wall_x = road_w + walk_w
    grade = 5.0 if preset == "slanted-road" else 0.0

    road = Texture("uniform", (0.36, 0.36, 0.38))
    walk = Texture("uniform", (0.62, 0.6, 0.56))
    # dashed markings on the centre line and both lane dividers
    marks = [-road_w / 2, 0.0, road_w / 2]
    prims = []
    edges = [-road_w]
    for k, xm in enumerate(marks):
        tex = Texture("stripes", (0.95, 0.95, 0.92), road.color_a,
                      period=float(rng.uniform(2.5, 3.5)), duty=0.5,
                      phase=float(rng.uniform(0.0, 1.0)))
        prims.append(_ground_rect(f"lane-{k}", 2, xm - lane_w / 2, xm + lane_w / 2, y0, y1,
                                  tex, grade))
        edges += [xm - lane_w / 2, xm + lane_w / 2]
    edges.append(road_w)
    for k in range(0, len(edges), 2):
        prims.append(_ground_rect(f"road-{k // 2}", 1, edges[k], edges[k + 1], y0, y1,
                                  road, grade))
    if preset == "curb":
        curb = 0.15
        prims += [
            Box("sidewalk-left", 3, (-wall_x, y0, -0.5), (-road_w, y1, curb), walk),
            Box("sidewalk-right", 3, (road_w, y0, -0.5), (wall_x, y1, curb), walk),
        ]
    else:
        prims += [
            _ground_rect("sidewalk-left", 3, -wall_x, -road_w, y0, y1, walk, grade),
            _ground_rect("sidewalk-right", 3, road_w, wall_x, y0, y1, walk, grade),
        ]
    z_lo = -math.tan(math.radians(grade)) * y1 - 0.5
    for side, sign in (("left", -1.0), ("right", 1.0)):
        base = rng.uniform(0.35, 0.75, size=3)
        tex = Texture("checker", tuple(base), tuple(np.clip(base * 0.55, 0, 1)),
                      period=float(rng.uniform(0.45, 0.7)))
        x_in, x_out = sign * wall_x, sign * (wall_x + 0.5)
        prims.append(Box(f"building-{side}", 4, (min(x_in, x_out), y0, z_lo),
                         (max(x_in, x_out), y1, 4.0), tex))
    g = math.radians(grade)
    return SceneSpec(
        preset=preset, seed=seed, primitives=tuple(prims),
        bbox_min=(-wall_x - 0.7, y0 - 0.2, z_lo - 0.1),
        bbox_max=(wall_x + 0.7, y1 + 0.2, 4.2),
        ground_normal=(0.0, math.sin(g), math.cos(g)),
    )


def raytrace_ground_truth(spec: SceneSpec, camera: Camera):
    """Exact nearest-hit rendering: rgb (H, W, 3), ray depth (H, W), class ids (H, W).

    Depth is the distance along the unit ray direction; background pixels get
    depth 0, colour 0 and class 0.
    """
    rays = camera_rays(camera)
    hits = np.stack([p.intersect(rays) for p in spec.primitives], axis=1)
    which = hits.argmin(axis=1)
    t = hits[np.arange(len(rays)), which]
    hit = np.isfinite(t)
    rgb = np.zeros((len(rays), 3))
    labels = np.zeros(len(rays), dtype=np.int64)
    depth = np.where(hit, t, 0.0)
    pts = rays.points(depth)
    for k, prim in enumerate(spec.primitives):
        sel = hit & (which == k)
        if sel.any():
            rgb[sel] = spec.ambient * prim.shade(pts[sel])
            labels[sel] = prim.class_id
    h, w = camera.height, camera.width
    return np.clip(rgb, 0, 1).reshape(h, w, 3), depth.reshape(h, w), labels.reshape(h, w)


def look_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation looking along +y rotated by ``yaw`` (left
    positive, about +z) and tilted down by ``pitch``, in radians."""
    fwd = np.array([-math.sin(yaw) * math.cos(pitch), math.cos(yaw) * math.cos(pitch),
                    -math.sin(pitch)])
    right = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def generate_trajectory(n_frames: int, style: str = "line-with-jitter", seed: int = 0, *,
                        spacing: float = 0.6, height: float = 1.5, pitch_deg: float = 15.0,
                        jitter_deg: float = 2.0, baseline: float = BASELINE,
                        image_size: tuple[int, int] = IMAGE_SIZE, focal: float = FOCAL,
                        scene: SceneSpec | None = None) -> list[Camera]:
    """Stereo rig driving along +y; returns [left0, right0, left1, right1, ...].

    With ``scene`` given the rig height follows the scene's ground plane.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if style not in ("line-with-jitter", "arc"):
        raise ValueError(f"unknown trajectory style {style!r}")
    rng = np.random.default_rng(seed)
    w, h = image_size
    cams = []
    for k in range(n_frames):
        y = k * spacing
        if style == "arc":
            radius = 40.0
            x = radius - math.sqrt(max(radius ** 2 - y ** 2, 0.0))
            yaw = -math.asin(min(y / radius, 1.0))
        else:
            x, yaw = 0.0, 0.0
        yaw += math.radians(rng.uniform(-jitter_deg, jitter_deg))
        pitch = math.radians(pitch_deg + rng.uniform(-jitter_deg, jitter_deg))
        ground = scene.ground_height(x, y) if scene is not None else 0.0
        rot = look_rotation(yaw, pitch)
        left = np.array([x, y, ground + height]) - 0.5 * baseline * rot[:, 0]
        for pos in (left, left + baseline * rot[:, 0]):
            cams.append(Camera(focal, focal, w / 2, h / 2, w, h, rot, pos))
    return cams


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "cameras", "frames", "class_table", "semantic_groups",
                 "bbox", "near", "far"],
    "properties": {
        "version": {"type": "integer"},
        "cameras": {"type": "array", "items": {
            "type": "object",
            "required": ["fx", "fy", "cx", "cy", "width", "height", "c2w"],
            "properties": {
                "c2w": {"type": "array", "minItems": 4, "maxItems": 4, "items": {
                    "type": "array", "minItems": 4, "maxItems": 4,
                    "items": {"type": "number"}}},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
            }}},
        "frames": {"type": "array", "items": {
            "type": "object",
            "required": ["index", "camera", "rgb", "sem", "depth", "split"],
            "properties": {"split": {"enum": ["train", "val", "dropped"]}}}},
        "class_table": {"type": "object"},
        "semantic_groups": {"type": "object"},
        "bbox": {"type": "object", "required": ["min", "max"]},
        "near": {"type": "number", "exclusiveMinimum": 0},
        "far": {"type": "number"},
    },
}


def assign_splits(n_frames: int, dropout: float, seed: int) -> list[str]:
    """Split for each camera of a stereo sequence [left0, right0, left1, ...].

    Even-numbered left frames are validation; ``dropout`` of the remaining
    frames is dropped at random (seeded), the rest train.
    """
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    splits = []
    for k in range(2 * n_frames):
        frame, left = divmod(k, 2)[0], k % 2 == 0
        splits.append("val" if left and frame % 2 == 0 else "train")
    cand = [k for k, s in enumerate(splits) if s == "train"]
    n_drop = int(round(dropout * len(cand)))
    rng = np.random.default_rng(seed)
    for k in rng.choice(cand, size=n_drop, replace=False):
        splits[int(k)] = "dropped"
    return splits


def _camera_json(cam: Camera) -> dict:
    return dict(cam.intrinsics(), c2w=cam.c2w.tolist())


def write_dataset(spec: SceneSpec, cameras: list[Camera], out_dir, dropout: float = 0.5,
                  seed: int = 0, label_noise: float = 0.0) -> dict:
    """Render ground truth for every camera and write the dataset directory.

    ``label_noise`` flips each semantic pixel to a random other class with that
    probability (the written maps only; rgb and depth stay exact). The manifest
    is written last.
    """
    out = Path(out_dir)
    if len(cameras) % 2:
        raise ValueError("cameras must come in left/right pairs")
    splits = assign_splits(len(cameras) // 2, dropout, seed)
    noise_rng = np.random.default_rng(seed + 1)
    frames = []
    try:
        for sub in ("rgb", "sem", "depth"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for k, cam in enumerate(cameras):
            rgb, depth, sem = raytrace_ground_truth(spec, cam)
            if label_noise > 0:
                flip = noise_rng.random(sem.shape) < label_noise
                shift = noise_rng.integers(1, len(CLASS_TABLE), size=sem.shape)
                sem = np.where(flip, (sem + shift) % len(CLASS_TABLE), sem)
            names = {s: f"{s}/{k:04d}.{'bin' if s == 'depth' else 'png'}"
                     for s in ("rgb", "sem", "depth")}
            fileio.write_rgb_png(out / names["rgb"], rgb)
            fileio.write_label_png(out / names["sem"], sem)
            fileio.write_depth_bin(out / names["depth"], depth)
            frames.append(dict(index=k, camera=k, frame=k // 2,
                               side="left" if k % 2 == 0 else "right",
                               split=splits[k], **names))
        manifest = dict(
            version=MANIFEST_VERSION,
            preset=spec.preset,
            seed=seed,
            dropout=dropout,
            label_noise=label_noise,
            cameras=[_camera_json(c) for c in cameras],
            frames=frames,
            class_table={str(k): v for k, v in CLASS_TABLE.items()},
            semantic_groups=DEFAULT_GROUPS.to_json(),
            bbox=dict(min=list(spec.bbox_min), max=list(spec.bbox_max)),
            near=DEFAULT_NEAR,
            far=spec.diameter,
        )
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise DatasetError(f"failed writing dataset to {out}: {exc}") from exc
    return manifest


@dataclass
class Dataset:
    """A loaded dataset directory; images are read on first access."""
    root: Path
    manifest: dict
    cameras: list
    groups: SemanticGroups
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def frames(self) -> list[dict]:
        return self.manifest["frames"]

    @property
    def near(self) -> float:
        return float(self.manifest["near"])

    @property
    def far(self) -> float:
        return float(self.manifest["far"])

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.manifest["bbox"]
        return np.array(b["min"], float), np.array(b["max"], float)

    @property
    def class_table(self) -> dict[int, str]:
        return {int(k): v for k, v in self.manifest["class_table"].items()}

    def split(self, name: str) -> list[int]:
        return [f["index"] for f in self.frames if f["split"] == name]

    def camera(self, index: int) -> Camera:
        return self.cameras[self.frames[index]["camera"]]

    def _load(self, kind: str, index: int):
        key = (kind, index)
        if key not in self._cache:
            frame = self.frames[index]
            path = self.root / frame[kind]
            if not path.exists():
                raise MissingFileError(f"missing {kind} file: {path}")
            cam = self.camera(index)
            if kind == "rgb":
                data = fileio.read_rgb_png(path)
            elif kind == "sem":
                data = fileio.read_label_png(path)
                unknown = set(np.unique(data).tolist()) - set(self.class_table)
                if unknown:
                    raise UnknownClassError(f"{path}: class ids {sorted(unknown)} not in class table")
            else:
                data = fileio.read_depth_bin(path, (cam.height, cam.width))
            if data.shape[:2] != (cam.height, cam.width):
                raise ManifestSchemaError(f"{path}: image size does not match camera")
            self._cache[key] = data
        return self._cache[key]

    def rgb(self, index: int) -> np.ndarray:
        return self._load("rgb", index)

    def semantic(self, index: int) -> np.ndarray:
        return self._load("sem", index)

    def depth(self, index: int) -> np.ndarray:
        return self._load("depth", index)


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise MissingFileError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(manifest, dict) and manifest.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(
            f"unsupported manifest version {manifest.get('version')!r} (expected {MANIFEST_VERSION})")
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ManifestSchemaError(f"{path}: {exc.message}") from exc

    table = {int(k) for k in manifest["class_table"]}
    for name, ids in manifest["semantic_groups"].items():
        bad = set(ids) - table
        if bad:
            raise UnknownClassError(f"semantic group {name!r} uses unknown class ids {sorted(bad)}")
    cameras = []
    for c in manifest["cameras"]:
        try:
            cameras.append(Camera.from_c2w(c["c2w"], c["fx"], c["fy"], c["cx"], c["cy"],
                                           c["width"], c["height"]))
        except ValueError as exc:
            raise ManifestSchemaError(f"{path}: bad camera ({exc})") from exc
    for f in manifest["frames"]:
        if not 0 <= f["camera"] < len(cameras):
            raise ManifestSchemaError(f"{path}: frame {f['index']} references unknown camera")
        for kind in ("rgb", "sem", "depth"):
            if not (root / f[kind]).exists():
                raise MissingFileError(f"missing {kind} file: {root / f[kind]}")
    groups = SemanticGroups({k: frozenset(v) for k, v in manifest["semantic_groups"].items()})
    return Dataset(root, manifest, cameras, groups)
