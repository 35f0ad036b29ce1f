"""Command-line entry point: ``planereg <command> [options]``.

Commands: gen-data, train, eval, render, export-ply. Every command accepts
``--config FILE`` (flat JSON keyed by flag name, flags win), ``--threads N``
(falls back to ``PLANEREG_THREADS``) and ``--json`` for single-line JSON errors
on stderr. Exit codes: 0 success, 2 usage or input error, 1 internal error.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
import traceback
from pathlib import Path

import numpy as np

from . import dataset as D
from . import fileio
from .losses import LossWeights
from .metrics import (GeoEvalConfig, evaluate_geometry, filtered_point_pair, write_report)
from .renderer import N_SAMPLES_EVAL, Camera, Rays, camera_rays, render_image
from .scenefield import load_checkpoint
from .trainer import TrainConfig, evaluate_split, fit


class UsageError(Exception):
    """Bad flags or bad input files; exits with status 2."""


CLASS_NAMES = {name: cid for cid, name in D.CLASS_TABLE.items()}

# command -> {option: default}; the single source for flags and config keys
DEFAULTS = {
    "gen-data": dict(preset="flat-road", out=None, frames=15, seed=0, dropout=0.5,
                     trajectory="line-with-jitter", width=D.IMAGE_SIZE[0],
                     height=D.IMAGE_SIZE[1], focal=D.FOCAL, label_noise=0.0),
    "train": dict(data=None, out=None, epochs=100, batch_patches=128, patch_size=20,
                  lr_start=1e-2, lr_end=1e-4, lambda0=0.1, lambda1=0.01, svd_delay_epochs=1,
                  no_svd=False, no_dssim=False, ds_baseline=False, samples=64,
                  eval_samples=N_SAMPLES_EVAL, patience=10, seed=0, resolution=64,
                  init_density=-2.0, lr_scale_density=TrainConfig.lr_scale_density,
                  lr_scale_color=TrainConfig.lr_scale_color, coarse_to_fine=None,
                  random_background=True, quiet=False),
    "eval": dict(data=None, checkpoint=None, out=None, scene=None, variant="model",
                 classes="road,lane,sidewalk", samples=N_SAMPLES_EVAL, patch_extent=3.0,
                 min_points=20),
    "render": dict(checkpoint=None, poses="val", data=None, out=None, samples=N_SAMPLES_EVAL),
    "export-ply": dict(checkpoint=None, data=None, out=None, classes="road,lane,sidewalk",
                       split="val", samples=N_SAMPLES_EVAL),
}
REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "checkpoint", "out"),
    "render": ("checkpoint", "out"),
    "export-ply": ("checkpoint", "data", "out"),
}
HELP = {
    "gen-data": "generate a synthetic street dataset",
    "train": "fit a voxel field to a dataset",
    "eval": "geometry and image metrics of a checkpoint",
    "render": "render RGB and depth images from a checkpoint",
    "export-ply": "export predicted and ground-truth point clouds",
}
FLAG_HELP = {
    "no_svd": "disable the plane loss (lambda1 = 0)",
    "no_dssim": "disable the dSSIM loss (lambda0 = 0)",
    "ds_baseline": "use depth smoothness instead of the plane loss",
    "poses": "'val' or a JSON pose file",
    "classes": "comma-separated class names or ids",
    "coarse_to_fine": "grid schedule, e.g. '0:16,0.15:32,0.3:64' (fraction:resolution)",
    "random_background": "composite a random colour behind the field during training",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="planereg", description="Plane-regularised voxel radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--threads", type=int, help="worker threads (env PLANEREG_THREADS)")
        p.add_argument("--json", action="store_true", help="machine-readable errors")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool) and key.startswith("no_"):
                # BooleanOptionalAction reads any "--no-" spelling as False
                p.add_argument(flag, action="store_true", help=FLAG_HELP.get(key))
            elif isinstance(default, bool):
                p.add_argument(flag, action=argparse.BooleanOptionalAction,
                               help=FLAG_HELP.get(key))
            else:
                kind = type(default) if default is not None else str
                p.add_argument(flag, type=kind, help=FLAG_HELP.get(key),
                               metavar=key.upper())
    return parser


def resolve_options(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[cmd])
    given = vars(args)
    if given.get("config"):
        path = Path(given["config"])
        try:
            cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: expected a JSON object")
        for key, value in cfg.items():
            norm = key.replace("-", "_")
            if norm not in opts:
                raise UsageError(f"{path}: unknown key {key!r} for {cmd}")
            want = type(DEFAULTS[cmd][norm])
            if DEFAULTS[cmd][norm] is not None and want is float and isinstance(value, int):
                value = float(value)
            if DEFAULTS[cmd][norm] is not None and not isinstance(value, want):
                raise UsageError(f"{path}: {key!r} must be {want.__name__}")
            opts[norm] = value
    for key in DEFAULTS[cmd]:
        if key in given:
            opts[key] = given[key]
    missing = [k for k in REQUIRED[cmd] if opts.get(k) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s) "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    threads = given.get("threads")
    if threads is None:
        env = os.environ.get("PLANEREG_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise UsageError(f"PLANEREG_THREADS must be an integer, got {env!r}")
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    opts["threads"] = threads
    return opts


def parse_classes(text: str) -> set[int]:
    out = set()
    for item in (s.strip() for s in str(text).split(",")):
        if not item:
            continue
        if item.isdigit() and int(item) in D.CLASS_TABLE:
            out.add(int(item))
        elif item in CLASS_NAMES:
            out.add(CLASS_NAMES[item])
        else:
            raise UsageError(f"unknown class {item!r}; known: {', '.join(CLASS_NAMES)}")
    if not out:
        raise UsageError("empty class selection")
    return out


def parse_schedule(text: str | None) -> tuple:
    if not text:
        return ()
    stages = []
    for item in text.split(","):
        try:
            frac, res = item.split(":")
            stages.append((float(frac), int(res)))
        except ValueError:
            raise UsageError(f"bad coarse-to-fine stage {item!r}; expected FRACTION:RESOLUTION")
    return tuple(stages)


def _load_dataset(path) -> D.Dataset:
    try:
        return D.load_dataset(path)
    except D.DatasetError as exc:
        raise UsageError(str(exc))


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_gen_data(o: dict) -> int:
    if o["preset"] not in D.PRESETS:
        raise UsageError(f"unknown preset {o['preset']!r}; choose from {', '.join(D.PRESETS)}")
    try:
        spec = D.generate_scene(o["preset"], o["seed"])
        cams = D.generate_trajectory(o["frames"], o["trajectory"], o["seed"],
                                     image_size=(o["width"], o["height"]), focal=o["focal"],
                                     scene=spec)
        manifest = D.write_dataset(spec, cams, o["out"], o["dropout"], o["seed"],
                                   o["label_noise"])
    except ValueError as exc:
        raise UsageError(str(exc))
    splits = [f["split"] for f in manifest["frames"]]
    print(json.dumps(dict(out=str(o["out"]), preset=o["preset"], cameras=len(cams),
                          train=splits.count("train"), val=splits.count("val"),
                          dropped=splits.count("dropped"))))
    return 0


def train_config(o: dict) -> TrainConfig:
    if o["no_svd"] and o["ds_baseline"]:
        raise UsageError("--no-svd and --ds-baseline are mutually exclusive")
    weights = LossWeights(
        lambda0=0.0 if o["no_dssim"] else o["lambda0"],
        lambda1=0.0 if o["no_svd"] else o["lambda1"],
        svd_delay_epochs=o["svd_delay_epochs"],
        regularizer="ds" if o["ds_baseline"] else "svd",
    )
    kwargs = dict(
        epochs=o["epochs"], batch_patches=o["batch_patches"], patch_size=o["patch_size"],
        lr_start=o["lr_start"], lr_end=o["lr_end"], weights=weights,
        n_samples_train=o["samples"], n_samples_eval=o["eval_samples"],
        early_stop_patience=o["patience"], seed=o["seed"], resolution=(o["resolution"],) * 3,
        init_density_raw=o["init_density"], lr_scale_density=o["lr_scale_density"],
        lr_scale_color=o["lr_scale_color"], workers=o["threads"],
        random_background=o["random_background"],
    )
    if o["coarse_to_fine"] is not None:
        kwargs["coarse_to_fine"] = parse_schedule(o["coarse_to_fine"])
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_train(o: dict) -> int:
    cfg = train_config(o)
    ds = _load_dataset(o["data"])
    try:
        res = fit(ds, cfg, o["out"], verbose=not o["quiet"])
    except ValueError as exc:
        raise UsageError(str(exc))
    print(json.dumps(dict(res.summary, out=str(o["out"]), epochs_run=len(res.epochs))))
    return 0


def cmd_eval(o: dict) -> int:
    ds = _load_dataset(o["data"])
    field_ = _load_checkpoint(o["checkpoint"])
    classes = parse_classes(o["classes"])
    frames = ds.split("val")
    if not frames:
        raise UsageError("dataset has no val frames")
    rays, depth, labels = [], [], []
    for f in frames:
        rays.append(camera_rays(ds.camera(f), ds.near, ds.far))
        depth.append(ds.depth(f).ravel())
        labels.append(ds.semantic(f).ravel())
    cfg = GeoEvalConfig(eval_classes=classes, patch_extent=o["patch_extent"],
                        min_points_per_patch=o["min_points"])
    try:
        geo = evaluate_geometry(field_, Rays.concat(rays), np.concatenate(depth),
                                np.concatenate(labels), cfg, o["samples"], o["threads"])
    except ValueError as exc:
        raise UsageError(str(exc))
    img = evaluate_split(field_, ds, "val", o["samples"], o["threads"])
    row = dict(scene=o["scene"] or ds.manifest.get("preset", "unknown"), variant=o["variant"],
               CD=geo.chamfer, P_sigma=geo.p_sigma_cm, PSNR=img["psnr"], SSIM=img["ssim"],
               LPIPS="n/a", n_points=geo.n_points_used, n_cells=len(geo.cells))
    diagnostics = dict(scene=row["scene"], variant=row["variant"], units=dict(
        CD="m^2", P_sigma="cm"), cells=geo.cells)
    write_report([row], o["out"], diagnostics)
    print(json.dumps(row))
    return 0


def _element_lines(text: str, key: str) -> list[int]:
    """1-based line numbers where each element of the top-level array ``key`` starts."""
    m = re.search(r'"%s"\s*:\s*\[' % re.escape(key), text)
    if not m:
        return []
    lines, depth, i, in_str = [], 0, m.end(), False
    expecting = True
    while i < len(text):
        ch = text[i]
        if in_str:
            if ch == "\\":
                i += 1
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "[{":
            if depth == 0 and expecting:
                lines.append(text.count("\n", 0, i) + 1)
                expecting = False
            depth += 1
        elif ch in "]}":
            if depth == 0:
                break
            depth -= 1
        elif ch == "," and depth == 0:
            expecting = True
        i += 1
    return lines


def read_pose_file(path) -> list[Camera]:
    """Pose file: ``{"intrinsics": {fx, fy, cx, cy, width, height},
    "poses": [4x4 camera-to-world, ...]}``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read pose file {path}: {exc}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})")
    if not isinstance(doc, dict) or "poses" not in doc or "intrinsics" not in doc:
        raise UsageError(f"{path}:1: expected an object with 'intrinsics' and 'poses'")
    intr = doc["intrinsics"]
    try:
        k = [intr[n] for n in ("fx", "fy", "cx", "cy", "width", "height")]
    except (KeyError, TypeError):
        line = text.count("\n", 0, text.find('"intrinsics"')) + 1
        raise UsageError(f"{path}:{line}: intrinsics need fx, fy, cx, cy, width, height")
    lines = _element_lines(text, "poses")
    cams = []
    for i, pose in enumerate(doc["poses"]):
        line = lines[i] if i < len(lines) else 1
        try:
            m = np.asarray(pose, dtype=float)
            if m.shape != (4, 4):
                raise ValueError(f"pose must be 4x4, got shape {m.shape}")
            cams.append(Camera.from_c2w(m, *k))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"{path}:{line}: pose {i}: {exc}")
    if not cams:
        raise UsageError(f"{path}:1: no poses")
    return cams


def cmd_render(o: dict) -> int:
    field_ = _load_checkpoint(o["checkpoint"])
    near, far = 0.05, float(np.linalg.norm(field_.bbox_max - field_.bbox_min))
    if o["poses"] == "val":
        if o["data"] is None:
            raise UsageError("--poses val needs --data")
        ds = _load_dataset(o["data"])
        cams = [ds.camera(f) for f in ds.split("val")]
        names = [f"{f:04d}" for f in ds.split("val")]
        near, far = ds.near, ds.far
    else:
        cams = read_pose_file(o["poses"])
        names = [f"{i:04d}" for i in range(len(cams))]
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, cam in zip(names, cams):
        rgb, depth = render_image(field_, cam, o["samples"], near=near, far=far,
                                  workers=o["threads"])
        fileio.write_rgb_png(out / f"rgb_{name}.png", rgb)
        fileio.write_depth_png(out / f"depth_{name}.png", depth)
        fileio.write_depth_bin(out / f"depth_{name}.bin", depth)
    print(json.dumps(dict(out=str(out), rendered=len(cams))))
    return 0


def cmd_export_ply(o: dict) -> int:
    ds = _load_dataset(o["data"])
    field_ = _load_checkpoint(o["checkpoint"])
    classes = parse_classes(o["classes"])
    frames = ds.split(o["split"])
    if not frames:
        raise UsageError(f"split {o['split']!r} is empty")
    rays, depth, labels = [], [], []
    for f in frames:
        rays.append(camera_rays(ds.camera(f), ds.near, ds.far))
        depth.append(ds.depth(f).ravel())
        labels.append(ds.semantic(f).ravel())
    labels = np.concatenate(labels)
    depth = np.concatenate(depth)
    try:
        x, y = filtered_point_pair(field_, Rays.concat(rays), depth, labels, classes,
                                   o["samples"], o["threads"])
    except ValueError as exc:
        raise UsageError(str(exc))
    kept = labels[np.isin(labels, list(classes)) & (depth > 0)]
    colors = fileio.class_colors(kept)
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    gt_path = out.with_name(out.stem + "_gt" + out.suffix)
    fileio.write_ply(out, x, colors)
    fileio.write_ply(gt_path, y, colors)
    print(json.dumps(dict(pred=str(out), gt=str(gt_path), points=len(x))))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "render": cmd_render, "export-ply": cmd_export_ply}


def _report(message: str, kind: str, as_json: bool) -> None:
    if as_json:
        print(json.dumps(dict(error=kind, message=message)), file=sys.stderr)
    else:
        print(f"planereg: error: {message}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        opts = resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        _report(str(exc), "usage", as_json)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        _report(f"{type(exc).__name__}: {exc}", "internal", as_json)
        if not as_json:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
