"""Command-line front-end: ``mvcvox gen|train|eval|ablate|mesh``.

Every option can also come from a JSON object given with ``--config``; keys
are the option names with dashes replaced by underscores.  Explicit flags
win over the file, the file wins over the defaults.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .ablation import AblationConfig, report_csv, run_ablation, samples_for_views, summarize, trend_checks
from .dataset import (DatasetConfig, DatasetError, config_from_manifest, generate_dataset, read_dataset,
                      read_manifest, write_dataset)
from .geometry import VoxelGrid
from .losses import DEFAULT_LAMBDA, LossConfig
from .metrics import chamfer, iou_arrays, mesh_to_points, per_vertex_chamfer
from .model import (TrainConfig, TrainingDiverged, history_csv, load_checkpoint, occluded_mask, predict,
                    save_checkpoint, train)
from .surface import marching_cubes

log = logging.getLogger("mvcvox")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# (flag, type, default, help); a type of bool makes a switch
OPTIONS = {
    "gen": [
        ("--out", str, None, "output directory (required)"),
        ("--scenes", int, 240, "total scene count"),
        ("--test-scenes", int, None, "scenes held out as the test split, the last ones (default: scenes // 6)"),
        ("--views", int, 6, "cameras on the circular rig"),
        ("--res", int, 32, "ground-truth grid resolution"),
        ("--img", int, 64, "image resolution"),
        ("--seed", int, 0, "dataset seed"),
        ("--parts", _int_list, (3, 6), "min,max body parts"),
        ("--kind", str, "body", "scene family: body or sphere"),
        ("--radius", float, 2.5, "rig radius"),
        ("--elevation", float, 0.0, "rig elevation (radians)"),
        ("--depth", bool, False, "also write 16-bit depth images"),
    ],
    "train": [
        ("--data", str, None, "dataset directory (required)"),
        ("--out", str, None, "checkpoint path (required)"),
        ("--history", str, None, "history CSV path (default: checkpoint path + .csv)"),
        ("--loss", str, "mvc", "3d (lambda = 0) or mvc"),
        ("--lambda", float, DEFAULT_LAMBDA, "weight of the consistency term for --loss mvc"),
        ("--gamma", float, None, "occupied-class weight (default: per-sample balance)"),
        ("--views", int, 2, "views per training sample"),
        ("--stacks", int, 2, "predictor stacks"),
        ("--epochs", int, 40, "training epochs"),
        ("--batch", int, 4, "scenes per step"),
        ("--lr", float, 2.5e-4, "Adam step size"),
        ("--decay-every", int, 20, "epochs between step-size decays"),
        ("--decay-factor", float, 0.1, "step-size multiplier at each decay"),
        ("--depth-input", bool, False, "feed the depth image as a second channel"),
        ("--eval-every", int, 1, "epochs between validation passes on the test split"),
        ("--val-points", int, 2000, "surface samples per mesh for validation Chamfer"),
        ("--seed", int, 0, "initialization and shuffling seed"),
    ],
    "eval": [
        ("--data", str, None, "dataset directory (required)"),
        ("--checkpoint", str, None, "checkpoint to evaluate"),
        ("--self", bool, False, "score the ground truth against itself (no checkpoint)"),
        ("--split", str, "test", "split to evaluate"),
        ("--csv", str, None, "write the metrics table here"),
        ("--error-maps", str, None, "directory for per-vertex error PLYs, one per sample"),
        ("--iso", float, 0.5, "iso value / IoU threshold"),
        ("--points", int, 10000, "surface samples per mesh for Chamfer"),
        ("--seed", int, 0, "surface sampling seed"),
    ],
    "ablate": [
        ("--data", str, None, "dataset directory (required)"),
        ("--out", str, None, "report CSV path (default: print only)"),
        ("--views", _int_list, (2, 4, 6), "view counts to compare"),
        ("--seeds", int, 3, "training seeds per condition (0..seeds-1)"),
        ("--lambda", float, DEFAULT_LAMBDA, "consistency weight of the mvc condition"),
        ("--gamma", float, 0.5, "occupied-class weight in every condition"),
        ("--epochs", int, 10, "training epochs per run"),
        ("--batch", int, 4, "scenes per step"),
        ("--lr", float, 1e-3, "Adam step size"),
        ("--decay-every", int, 8, "epochs between step-size decays"),
        ("--decay-factor", float, 0.1, "step-size multiplier at each decay"),
        ("--stacks", int, 2, "predictor stacks"),
        ("--points", int, 0, "surface samples for Chamfer (0 skips Chamfer)"),
        ("--workers", int, 1, "parallel training processes (0 = one per CPU core)"),
    ],
    "mesh": [
        ("--grid", str, None, "VXG1 grid to extract"),
        ("--checkpoint", str, None, "checkpoint used with --image"),
        ("--image", str, None, "silhouette PGM fed to the checkpoint"),
        ("--depth-image", str, None, "depth PGM for checkpoints trained with depth input"),
        ("--out", str, None, "output mesh, .obj or .ply (required)"),
        ("--iso", float, 0.5, "iso value in (0, 1)"),
    ],
}


SUMMARIES = {
    "gen": "render a synthetic dataset to disk",
    "train": "fit the predictor on a generated dataset",
    "eval": "score predictions or a checkpoint on the test split",
    "ablate": "train every views x loss x seed condition and report",
    "mesh": "extract a surface from a grid or a checkpoint prediction",
}


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcvox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name])
        p.add_argument("--config", type=str, default=None, help="JSON file with option values (default: none)")
        for flag, typ, default, text in opts:
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            if typ is bool:
                p.add_argument(flag, dest=_dest(flag), action="store_const", const=True, default=None,
                               help=f"{text} (default: off)")
            else:
                if "required" in text or "(default" in text:
                    note = text
                else:
                    note = f"{text} (default: {'none' if shown is None else shown})"
                p.add_argument(flag, dest=_dest(flag), type=typ, default=None, help=note)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = OPTIONS[command]
    values = {_dest(f): d for f, _, d, _ in opts}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise fileio.FormatError(args.config, f"cannot read ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        types = {_dest(f): t for f, t, _, _ in opts}
        for key, val in data.items():
            if key not in types:
                raise UsageError(f"{args.config}: unknown option {key!r}")
            typ = types[key]
            try:
                if typ is bool:
                    if not isinstance(val, bool):
                        raise ValueError("expected true or false")
                elif val is not None:
                    val = typ(",".join(map(str, val)) if isinstance(val, list) else val)
            except (ValueError, TypeError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key!r} ({exc})") from exc
            values[key] = val
    for key in values:
        given = getattr(args, key, None)
        if given is not None:
            values[key] = given
    return values


def _require(opts: dict, *keys):
    for k in keys:
        if opts.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


# -- commands -----------------------------------------------------------------

def cmd_gen(o: dict, out=None) -> int:
    out = out or sys.stdout
    _require(o, "out")
    if o["views"] < 1:
        raise UsageError("--views must be >= 1")
    if o["test_scenes"] is None:
        o["test_scenes"] = o["scenes"] // 6
    if o["scenes"] < 1 or not 0 <= o["test_scenes"] <= o["scenes"]:
        raise UsageError("need --scenes >= 1 and 0 <= --test-scenes <= --scenes")
    if o["res"] < 8 or o["img"] < 16:
        raise UsageError("need --res >= 8 and --img >= 16")
    if len(o["parts"]) != 2 or not 1 <= o["parts"][0] <= o["parts"][1]:
        raise UsageError("--parts must be min,max with 1 <= min <= max")
    if o["kind"] not in ("body", "sphere"):
        raise UsageError("--kind must be body or sphere")
    cfg = DatasetConfig(scenes=o["scenes"], test_scenes=o["test_scenes"], views=o["views"], res=o["res"],
                        img=o["img"], seed=o["seed"], n_parts_range=tuple(o["parts"]), kind=o["kind"],
                        radius=o["radius"], elevation=o["elevation"], depth=bool(o["depth"]))
    ds = generate_dataset(cfg)
    try:
        nbytes = write_dataset(ds, o["out"])
    except OSError as exc:
        raise fileio.FormatError(o["out"], f"cannot write ({exc.strerror})") from exc
    n_img = cfg.scenes * cfg.views * (2 if cfg.depth else 1)
    print(f"scenes {cfg.scenes} (train {cfg.scenes - cfg.test_scenes}, test {cfg.test_scenes})", file=out)
    print(f"images {n_img}", file=out)
    print(f"grids {cfg.scenes * cfg.views}", file=out)
    print(f"bytes {nbytes}", file=out)
    return 0


def _samples_with_views(root, n_views: int, split: str) -> list:
    """``split`` samples of the dataset at ``root`` with ``n_views`` views each.

    A divisor of the stored view count takes an equidistant subset; any other
    count re-renders the scenes from their recorded seeds on a new rig.
    """
    cfg = config_from_manifest(read_manifest(root))
    if cfg.views % n_views == 0:
        return [s.views(n_views) for s in read_dataset(root, (split,)).samples]
    log.info("re-rendering %s split on a %d-camera rig", split, n_views)
    return samples_for_views(cfg, n_views, split)


def cmd_train(o: dict, out=None) -> int:
    out = out or sys.stdout
    _require(o, "data", "out")
    if o["loss"] not in ("3d", "mvc"):
        raise UsageError("--loss must be 3d or mvc")
    if o["views"] < 1 or o["stacks"] < 1 or o["epochs"] < 0 or o["batch"] < 1:
        raise UsageError("need --views >= 1, --stacks >= 1, --epochs >= 0 and --batch >= 1")
    if not o["lr"] > 0 or o["lambda"] < 0 or o["eval_every"] < 1:
        raise UsageError("need --lr > 0, --lambda >= 0 and --eval-every >= 1")
    try:
        loss = LossConfig(gamma=o["gamma"], lam=o["lambda"] if o["loss"] == "mvc" else 0.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    inputs = ("silhouette", "depth") if o["depth_input"] else ("silhouette",)
    cfg = TrainConfig(lr=o["lr"], lr_decay_every=o["decay_every"], lr_decay_factor=o["decay_factor"],
                      epochs=o["epochs"], batch_size=o["batch"], n_views=o["views"], k_stacks=o["stacks"],
                      loss=loss, seed=o["seed"], inputs=inputs, eval_every=o["eval_every"],
                      val_points=o["val_points"])
    samples = _samples_with_views(o["data"], o["views"], "train")
    if not samples:
        raise UsageError("dataset has no training scenes")
    val = read_dataset(o["data"], ("test",)).samples or None
    if o["depth_input"] and samples[0].depths is None:
        raise UsageError("--depth-input needs a dataset generated with --depth")
    params, history = train(samples, cfg, val=val)
    save_checkpoint(o["out"], params)
    hist_path = o["history"] or o["out"] + ".csv"
    fileio.atomic_write(hist_path, history_csv(history).encode("ascii"))
    last = history[-1] if history else None
    if last:
        print(f"epoch {last['epoch']} loss {last['total']:.6f} l3d {last['l3d']:.6f} lmvc {last['lmvc']:.6f}", file=out)
    print(f"checkpoint {o['out']}", file=out)
    print(f"history {hist_path}", file=out)
    return 0


EVAL_FIELDS = ("sample", "scene", "iou", "iou_occluded", "cd")


def cmd_eval(o: dict, out=None) -> int:
    out = out or sys.stdout
    _require(o, "data")
    if bool(o["self"]) == bool(o["checkpoint"]):
        raise UsageError("give exactly one of --checkpoint and --self")
    if not 0.0 < o["iso"] < 1.0 or o["points"] < 1:
        raise UsageError("need 0 < --iso < 1 and --points >= 1")
    ds = read_dataset(o["data"], (o["split"],))
    if not ds.samples:
        raise UsageError(f"split {o['split']!r} is empty")
    res = ds.config.res
    occ = occluded_mask(res)
    if o["self"]:
        preds = [s.gt_occ[0].astype(np.float64) for s in ds.samples]
    else:
        params = load_checkpoint(o["checkpoint"])
        if params.arch.res != res or params.arch.img != ds.config.img:
            raise UsageError("checkpoint resolution does not match the dataset")
        imgs = np.concatenate([s.images(params.arch.inputs)[:1] for s in ds.samples])
        preds = list(predict(params, imgs).astype(np.float64))
    rows = []
    for i, (s, pred) in enumerate(zip(ds.samples, preds)):
        gt = s.gt_occ[0].astype(np.float64)
        mp = marching_cubes(VoxelGrid(pred, ds.config.extent), o["iso"])
        mg = marching_cubes(VoxelGrid(gt, ds.config.extent), o["iso"])
        if mp.is_empty() or mg.is_empty():
            cd = 0.0 if mp.is_empty() and mg.is_empty() else float("inf")
            gt_pts = None if mg.is_empty() else mesh_to_points(mg, o["points"], o["seed"])
        else:
            gt_pts = mesh_to_points(mg, o["points"], o["seed"])
            cd = chamfer(mesh_to_points(mp, o["points"], o["seed"]), gt_pts)
        rows.append({"sample": i, "scene": s.spec.seed, "iou": iou_arrays(pred, gt, o["iso"]),
                     "iou_occluded": iou_arrays(pred, gt, o["iso"], occ), "cd": cd})
        if o["error_maps"]:
            quality = per_vertex_chamfer(mp, gt_pts) if gt_pts is not None and not mp.is_empty() else \
                np.full(len(mp.vertices), np.inf)
            fileio.write_ply(Path(o["error_maps"]) / f"sample{i:05d}.ply", mp, quality)
    agg = {"sample": "mean", "scene": "", **{k: float(np.mean([r[k] for r in rows])) for k in EVAL_FIELDS[2:]}}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_FIELDS)
    for r in rows + [agg]:
        w.writerow([r["sample"], r["scene"]] + [repr(float(r[k])) for k in EVAL_FIELDS[2:]])
    text = buf.getvalue()
    if o["csv"]:
        fileio.atomic_write(o["csv"], text.encode("ascii"))
    out.write(text)
    return 0


def cmd_ablate(o: dict, out=None) -> int:
    out = out or sys.stdout
    _require(o, "data")
    if not o["views"] or min(o["views"]) < 1 or o["seeds"] < 1 or o["epochs"] < 1 or o["workers"] < 0:
        raise UsageError("need --views >= 1 each, --seeds >= 1 and --epochs >= 1")
    dcfg = config_from_manifest(read_manifest(o["data"]))
    test = read_dataset(o["data"], ("test",)).samples
    try:
        loss = LossConfig(gamma=o["gamma"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tcfg = TrainConfig(lr=o["lr"], lr_decay_every=o["decay_every"], lr_decay_factor=o["decay_factor"],
                       epochs=o["epochs"], batch_size=o["batch"], k_stacks=o["stacks"], loss=loss)
    acfg = AblationConfig(views=o["views"], seeds=tuple(range(o["seeds"])), lam=o["lambda"], train=tcfg,
                          chamfer_points=o["points"])
    workers = o["workers"] if o["workers"] > 0 else (os.cpu_count() or 1)
    rows = run_ablation(dcfg, acfg, test_set=test, workers=workers)
    summary = summarize(rows)
    text = report_csv(rows, summary)
    if o["out"]:
        fileio.atomic_write(o["out"], text.encode("ascii"))
    out.write(text)
    if len(set(o["views"])) > 1:
        chk = trend_checks(summary)
        print(f"# median IoU margin mvc@{max(o['views'])} over 3d@{min(o['views'])}: "
              f"full {chk['full_margin']:.4f}, occluded {chk['occluded_margin_value']:.4f}", file=out)
    return 0


def cmd_mesh(o: dict, out=None) -> int:
    out = out or sys.stdout
    _require(o, "out")
    if not 0.0 < o["iso"] < 1.0:
        raise UsageError(f"--iso must lie in (0, 1), got {o['iso']}")
    if Path(o["out"]).suffix.lower() not in (".obj", ".ply"):
        raise UsageError("--out must end in .obj or .ply")
    if o["grid"]:
        grid = fileio.read_vxg(o["grid"])
    elif o["checkpoint"] and o["image"]:
        params = load_checkpoint(o["checkpoint"])
        chans = [fileio.read_pgm(o["image"])]
        if "depth" in params.arch.inputs:
            _require(o, "depth_image")
            chans.append(fileio.read_pgm(o["depth_image"]))
        img = np.stack(chans)
        if img.shape[1:] != (params.arch.img, params.arch.img):
            raise UsageError(f"image is {img.shape[2]}x{img.shape[1]}, checkpoint expects {params.arch.img}")
        grid = VoxelGrid(predict(params, img[None])[0].astype(np.float64))
    else:
        raise UsageError("give --grid, or --checkpoint together with --image")
    mesh = marching_cubes(grid, o["iso"])
    fileio.write_mesh(o["out"], mesh)
    print(f"vertices {len(mesh.vertices)} triangles {mesh.n_triangles}", file=out)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "mesh": cmd_mesh}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        opts = resolve(args.command, args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"mvcvox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (fileio.FormatError, OSError) as exc:
        print(f"mvcvox {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, FloatingPointError, DatasetError) as exc:
        print(f"mvcvox {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
