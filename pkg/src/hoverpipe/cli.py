"""Command-line interface.

stdout carries data (JSON or tables); diagnostics go to stderr. Exit codes:
0 success, 2 unreadable or malformed input, 3 shape/format mismatch,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io, metrics, plotting, postproc, synth, tiling
from .errors import FormatError, MissingClass, PatchLargerThanImage, ShapeMismatch
from .hover import LAYER_CLASSES, make_target_bundle
from .losses import LossWeights, gradient_check, total_loss

EXIT_IO = 2
EXIT_SHAPE = 3
EXIT_VERIFY = 4
GRAD_TOL = 1e-5

BRANCH_FILES = ("np", "hover", "nc", "ls")
LAYER_NAMES = {"background": 0, "other": 1, "basal": 2, "epithelium": 3, "keratin": 4}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- configuration -----------------------------------------------------------

def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


RUN_DEFAULTS = {
    **{f.name: f.default for f in fields(postproc.PostprocParams)},
    **{f.name: f.default for f in fields(LossWeights)},
    "patch": 256,
    "min_tissue": 0.1,
    "min_object": tiling.DEFAULT_MIN_OBJECT,
    "min_hole": tiling.DEFAULT_MIN_HOLE,
    "min_epithelium": 1,
    "workers": 1,
}
_INT_OPTIONAL = {"layer_min_object", "layer_min_hole"}


def resolve_config(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides the defaults."""
    file_values = {}
    if getattr(args, "params", None):
        file_values = io.read_config(args.params)
        unknown = sorted(set(file_values) - set(RUN_DEFAULTS))
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, default in RUN_DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
        elif key in file_values:
            raw = file_values[key]
            if key in _INT_OPTIONAL:
                cfg[key] = None if raw.lower() in ("", "none", "auto") else int(raw)
            else:
                cfg[key] = _coerce(raw, default)
        else:
            cfg[key] = default
    return cfg


def postproc_params(cfg: dict) -> postproc.PostprocParams:
    return postproc.PostprocParams(**{f.name: cfg[f.name] for f in fields(postproc.PostprocParams)})


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**{f.name: cfg[f.name] for f in fields(LossWeights)})


# -- helpers -----------------------------------------------------------------

def _read_tensor(path) -> np.ndarray:
    try:
        return io.read_tensor(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {path}") from None


def _read_json(path):
    try:
        return io.read_json(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_IO, f"{path}: invalid JSON ({exc})") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    sys.stdout.write(io.dumps(obj))


def read_bundle(paths: dict) -> list[postproc.PredictionBundle]:
    """Load branch tensors; 4-D inputs are batches of tiles along axis 0."""
    arrays = {k: _read_tensor(p).astype(np.float64) for k, p in paths.items()}
    ndims = {a.ndim for a in arrays.values()}
    if ndims == {3}:
        arrays = {k: a[None] for k, a in arrays.items()}
    elif ndims != {4}:
        raise ShapeMismatch("branch tensors must all be (C, H, W) or all (N, C, H, W)")
    n = {a.shape[0] for a in arrays.values()}
    if len(n) != 1:
        raise ShapeMismatch("branch tensors disagree on batch size")
    return [postproc.PredictionBundle(**{k: a[i] for k, a in arrays.items()}) for i in range(n.pop())]


def _as_batch(array: np.ndarray, name: str) -> np.ndarray:
    if array.ndim == 2:
        return array[None]
    if array.ndim == 3:
        return array
    raise ShapeMismatch(f"{name} must be (H, W) or (N, H, W), got {array.shape}")


def parallel_map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _classes_from_map(instances: np.ndarray, class_map: np.ndarray) -> dict[int, str]:
    """Per-instance class as the most frequent non-background code under its mask."""
    if class_map.shape != instances.shape:
        raise ShapeMismatch(f"class map {class_map.shape} vs instances {instances.shape}")
    out = {}
    for label in np.unique(instances):
        if label == 0:
            continue
        codes = np.bincount(class_map[instances == label].astype(np.int64), minlength=5)[1:5]
        if not codes.any():
            raise MissingClass(f"instance {int(label)} has no class pixels")
        out[int(label)] = LAYER_CLASSES[1 + int(np.argmax(codes))]
    return out


def _classes_from_json(obj) -> dict[int, str]:
    if isinstance(obj, list):  # nuclei.json records
        return {int(r["label"]): r["final_class"] for r in obj}
    return {int(k): v for k, v in obj.items()}


def load_classes(path, instances: np.ndarray) -> list[dict[int, str]]:
    """Classes per tile from a class-map tensor or a JSON label->class table."""
    if str(path).endswith(".json"):
        obj = _read_json(path)
        if instances.shape[0] == 1:
            return [_classes_from_json(obj)]
        if not isinstance(obj, list) or len(obj) != instances.shape[0]:
            raise ShapeMismatch("batched JSON classes need one entry per tile")
        return [_classes_from_json(o) for o in obj]
    cmap = _as_batch(_read_tensor(path), "class map")
    if cmap.shape != instances.shape:
        raise ShapeMismatch(f"class map {cmap.shape} vs instances {instances.shape}")
    return [_classes_from_map(i, c) for i, c in zip(instances, cmap)]


# -- commands ----------------------------------------------------------------

def cmd_encode(args) -> int:
    instances = _read_tensor(args.instances)
    layers = _read_tensor(args.layers)
    classes = _classes_from_json(_read_json(args.classes))
    if instances.ndim != 2 or layers.ndim != 2:
        raise ShapeMismatch("instances and layers must be 2-D")
    target = make_target_bundle(instances.astype(np.uint32), classes, layers)
    out = _out_dir(args.out_dir)
    for name in BRANCH_FILES:
        io.write_tensor(out / f"{name}.hst", getattr(target, name))
    return 0


def _postprocess_tile(job):
    bundle, params = job
    bundle.check_softmax()
    return postproc.run_full_postprocess(bundle, params)


def cmd_postprocess(args) -> int:
    cfg = resolve_config(args)
    params = postproc_params(cfg)
    bundles = read_bundle({k: getattr(args, k) for k in BRANCH_FILES})
    results = parallel_map(_postprocess_tile, [(b, params) for b in bundles], cfg["workers"])
    out = _out_dir(args.out_dir)
    single = len(results) == 1

    def stack(name):
        arrays = [getattr(r, name) for r in results]
        return arrays[0] if single else np.stack(arrays)

    io.write_tensor(out / "instances.hst", stack("instances").astype(np.uint32))
    io.write_tensor(out / "nuclear_class_map.hst", stack("nuclear_class_map").astype(np.uint8))
    io.write_tensor(out / "layer_map.hst", stack("layer_map").astype(np.uint8))
    records = [[rec.to_dict() for rec in r.records] for r in results]
    io.write_json(out / "nuclei.json", records[0] if single else records)
    if args.overlay:
        io.write_pnm(out / "overlay.ppm", plotting.overlay_rgb(results[0].nuclear_class_map, results[0].layer_map))
    if args.figures:
        figdir = _out_dir(args.figures)
        for i, r in enumerate(results):
            name = "segmentation.png" if single else f"segmentation_{i:04d}.png"
            plotting.plot_segmentation(r.nuclear_class_map, r.layer_map, figdir / name, r.instances)
    print(f"{sum(len(r.records) for r in results)} nuclei in {len(results)} tile(s)", file=sys.stderr)
    return 0


def _eval_tile(kwargs):
    return metrics.tile_counts(**kwargs)


def format_table(report: dict) -> str:
    """Fixed-width tables: nuclear metrics, then layer metrics."""
    cols = [("Dice", "dice"), ("AJI", "aji"), ("DQ", "dq"), ("SQ", "sq"), ("PQ", "pq"), ("Fd", "f_d"),
            ("Fc_o", "f_c_other"), ("Fc_b", "f_c_basal"), ("Fc_e", "f_c_epithelium")]
    cols = [(h, k) for h, k in cols if k in report]
    lines = [" ".join(f"{h:>8}" for h, _ in cols), " ".join(f"{report[k]:8.3f}" for _, k in cols)]
    layer = report.get("layer")
    if layer:
        heads = ["Bkgd.", "Other", "Basal", "Epith.", "Keratin", "Mean"]
        lines.append("")
        lines.append(f"{'':>10} " + " ".join(f"{h:>8}" for h in heads))
        for metric in ("precision", "recall", "f1"):
            vals = [layer[c][metric] for c in LAYER_CLASSES]
            vals.append(float(np.mean(vals)) if metric != "f1" else layer["mean_f1"])
            lines.append(f"{metric:>10} " + " ".join(f"{v:8.3f}" for v in vals))
        lines.append(f"{'accuracy':>10} {layer['accuracy']:8.3f}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    gt = _as_batch(_read_tensor(args.gt_instances), "gt instances")
    pred = _as_batch(_read_tensor(args.pred_instances), "pred instances")
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"gt {gt.shape} vs pred {pred.shape}")
    n = gt.shape[0]
    gt_cls = pred_cls = [None] * n
    if bool(args.gt_classes) != bool(args.pred_classes):
        raise CliError(EXIT_IO, "--gt-classes and --pred-classes must be given together")
    if args.gt_classes:
        gt_cls = load_classes(args.gt_classes, gt)
        pred_cls = load_classes(args.pred_classes, pred)
    gt_lay = pred_lay = [None] * n
    if bool(args.gt_layers) != bool(args.pred_layers):
        raise CliError(EXIT_IO, "--gt-layers and --pred-layers must be given together")
    if args.gt_layers:
        gt_lay = _as_batch(_read_tensor(args.gt_layers), "gt layers")
        pred_lay = _as_batch(_read_tensor(args.pred_layers), "pred layers")
        if gt_lay.shape != gt.shape or pred_lay.shape != gt.shape:
            raise ShapeMismatch("layer maps must match the instance maps' extent")
    jobs = [dict(gt=gt[i], pred=pred[i], gt_classes=gt_cls[i], pred_classes=pred_cls[i],
                 gt_layers=gt_lay[i], pred_layers=pred_lay[i]) for i in range(n)]
    counts = parallel_map(_eval_tile, jobs, cfg["workers"])
    if args.mode == "pooled":
        total = metrics.TileCounts()
        for c in counts:
            total = total + c
        report = metrics.report_from_counts(total)
    else:
        report = metrics._mean_reports([metrics.report_from_counts(c) for c in counts])
    report["mode"] = args.mode
    report["tiles"] = n
    io.write_json(args.report, report)
    sys.stdout.write(format_table(report))
    if args.figures:
        plotting.plot_report(report, _out_dir(args.figures) / "metrics.png")
    return 0


def cmd_tile(args) -> int:
    cfg = resolve_config(args)
    try:
        rgb = io.read_pnm(args.rgb)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {args.rgb}") from None
    if rgb.ndim != 3:
        raise FormatError("--rgb must be a P6 colour image")
    layers = _read_tensor(args.layers)
    if layers.ndim != 2 or layers.shape != rgb.shape[:2]:
        raise ShapeMismatch(f"layers {layers.shape} vs image {rgb.shape[:2]}")
    tissue = tiling.tissue_mask(rgb, cfg["min_object"], cfg["min_hole"])
    tiles = tiling.select_patches(tissue, layers, cfg["patch"], cfg["min_tissue"],
                                  cfg["min_epithelium"], workers=cfg["workers"])
    manifest = {
        "image": {"height": rgb.shape[0], "width": rgb.shape[1]},
        "patch": cfg["patch"],
        "min_tissue": cfg["min_tissue"],
        "tiles": [t.to_dict() for t in tiles],
    }
    if args.mpp is not None:
        manifest["microns_per_pixel"] = args.mpp
    io.write_json(args.manifest, manifest)
    if args.extract:
        out = _out_dir(args.extract)
        p = cfg["patch"]
        for t in tiles:
            r, c = t.origin
            stem = f"tile_{r:06d}_{c:06d}"
            io.write_tensor(out / f"{stem}_rgb.hst", np.ascontiguousarray(rgb[r:r + p, c:c + p].transpose(2, 0, 1)))
            io.write_tensor(out / f"{stem}_layers.hst", layers[r:r + p, c:c + p])
    print(f"{len(tiles)} tiles selected", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    params = synth.SceneParams(
        seed=args.seed, extent=args.extent, nucleus_count=args.nuclei,
        radius_range=(args.radius_min, args.radius_max), min_gap=args.min_gap)
    scene = synth.generate_scene(params)
    bundle = synth.perfect_bundle(scene)
    corr = synth.CorruptionParams(gaussian_sigma=args.sigma, hover_noise_sigma=args.sigma,
                                  boundary_jitter=args.jitter)
    bundle = synth.corrupt(bundle, corr, args.seed)
    out = _out_dir(args.out_dir)
    io.write_tensor(out / "instances.hst", scene.instances)
    io.write_tensor(out / "layers.hst", scene.layer_map)
    io.write_tensor(out / "nuclear_class_map.hst", scene.nuclear_class_map)
    io.write_json(out / "classes.json", {str(k): v for k, v in scene.nucleus_classes.items()})
    for name in BRANCH_FILES:
        io.write_tensor(out / f"{name}.hst", getattr(bundle, name))
    io.write_json(out / "scene.json", {
        "seed": params.seed, "extent": params.extent, "nucleus_count": params.nucleus_count,
        "radius_range": list(params.radius_range), "min_gap": params.min_gap,
        "layer_band_fractions": list(params.layer_band_fractions),
        "sigma": args.sigma, "jitter": args.jitter,
    })
    return 0


def cmd_losses(args) -> int:
    cfg = resolve_config(args)
    result = {}
    if args.pred_dir or args.target_dir:
        if not (args.pred_dir and args.target_dir):
            raise CliError(EXIT_IO, "--pred-dir and --target-dir must be given together")
        pred = read_bundle({k: Path(args.pred_dir) / f"{k}.hst" for k in BRANCH_FILES})
        target = read_bundle({k: Path(args.target_dir) / f"{k}.hst" for k in BRANCH_FILES})
        if len(pred) != 1 or len(target) != 1:
            raise ShapeMismatch("losses expects single-tile bundles")
        if pred[0].shape != target[0].shape:
            raise ShapeMismatch(f"prediction {pred[0].shape} vs target {target[0].shape}")
        t = target[0]
        breakdown = total_loss(pred[0], t, loss_weights(cfg), nucleus_mask=t.np[1] > 0.5)
        result.update(breakdown.to_dict())
    elif not args.grad_check:
        raise CliError(EXIT_IO, "give --pred-dir/--target-dir, --grad-check, or both")
    failed = False
    if args.grad_check:
        errs = gradient_check(seed=args.seed, trials=args.trials)
        worst = max(errs.values())
        failed = worst > GRAD_TOL
        result["grad_check"] = {"max_rel_err": worst, "per_loss": errs, "tolerance": GRAD_TOL,
                                "seed": args.seed, "trials": args.trials, "passed": not failed}
        print(f"grad-check max relative error {worst:.3e} (tolerance {GRAD_TOL:g})", file=sys.stderr)
    _emit(result)
    return EXIT_VERIFY if failed else 0


# -- parser ------------------------------------------------------------------

def _add_postproc_flags(p):
    g = p.add_argument_group("post-processing")
    g.add_argument("--np-threshold", dest="np_threshold", type=float)
    g.add_argument("--marker-gradient-threshold", dest="marker_gradient_threshold", type=float)
    g.add_argument("--min-marker-area", dest="min_marker_area", type=int)
    g.add_argument("--min-nucleus-area", dest="min_nucleus_area", type=int)
    g.add_argument("--layer-morph-radius", dest="layer_morph_radius", type=int)
    g.add_argument("--layer-min-object", dest="layer_min_object", type=int)
    g.add_argument("--layer-min-hole", dest="layer_min_hole", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoverpipe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, params=True):
        if params:
            p.add_argument("--params", help="key = value config file")
        p.add_argument("--workers", type=int, help="tile-level worker processes (default 1)")

    p = sub.add_parser("encode", help="build training targets from ground truth")
    p.add_argument("--instances", required=True)
    p.add_argument("--classes", required=True, help="JSON mapping label -> other|epithelial")
    p.add_argument("--layers", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("postprocess", help="instances, nuclear classes and layers from branch outputs")
    for name in BRANCH_FILES:
        p.add_argument(f"--{name}", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--overlay", action="store_true", help="also write overlay.ppm")
    p.add_argument("--figures", help="directory for PNG figures")
    common(p)
    _add_postproc_flags(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="metrics report for predictions against ground truth")
    p.add_argument("--gt-instances", required=True)
    p.add_argument("--pred-instances", required=True)
    p.add_argument("--gt-classes")
    p.add_argument("--pred-classes")
    p.add_argument("--gt-layers")
    p.add_argument("--pred-layers")
    p.add_argument("--report", required=True)
    p.add_argument("--mode", choices=("pooled", "mean"), default="pooled")
    p.add_argument("--figures", help="directory for PNG figures")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tile", help="tissue mask and patch manifest for a slide")
    p.add_argument("--rgb", required=True)
    p.add_argument("--layers", required=True)
    p.add_argument("--patch", type=int)
    p.add_argument("--min-tissue", dest="min_tissue", type=float)
    p.add_argument("--min-object", dest="min_object", type=int)
    p.add_argument("--min-hole", dest="min_hole", type=int)
    p.add_argument("--min-epithelium", dest="min_epithelium", type=int)
    p.add_argument("--mpp", type=float, help="microns per pixel, recorded in the manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--extract", help="directory for per-tile tensors")
    common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("synth", help="write a synthetic scene and its prediction bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=int, default=256)
    p.add_argument("--nuclei", type=int, default=20)
    p.add_argument("--radius-min", type=int, default=4)
    p.add_argument("--radius-max", type=int, default=8)
    p.add_argument("--min-gap", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("losses", help="loss breakdown and gradient verification")
    p.add_argument("--pred-dir")
    p.add_argument("--target-dir")
    p.add_argument("--grad-check", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    for k in "abcdefgh":
        p.add_argument(f"--lambda-{k}", dest=f"lambda_{k}", type=float)
    common(p)
    p.set_defaults(func=cmd_losses)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ShapeMismatch, MissingClass, PatchLargerThanImage) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
