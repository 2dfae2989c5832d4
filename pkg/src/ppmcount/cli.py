"""Command-line front end: synth, tile, train, predict, evaluate, render.

Every option can also come from a flat ``key=value`` file passed with
``--config``; keys are option names without the leading dashes (either
``batch-size`` or ``batch_size``). Options given on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import atomic_write
from .confmap import load_annotations
from .dataset import (SPLITS, SynthSpec, read_dataset, read_ppm, split, synthesize, tag_density, tile,
                      write_dataset, write_ppm)
from .localization import PeakParams, find_peaks, read_detections, write_detections
from .metrics import build_report, match_points, report_csv, report_table
from .network import STRIDE, Model, NetworkConfig, image_tensor, load_model
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("ppmcount")

DEFAULT_SPLIT = "0.8516,0.0742,0.0742"
_NET_SKIP = {"stride", "input_size"}
_TRAIN_SKIP = {"tau", "delta", "match_radius"}


class CliError(Exception):
    pass


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


_HELP = {
    "stages": "number of confidence-map stages T",
    "backbone_widths": "channels of the three backbone blocks",
    "ppm_scales": "pyramid pooling grid sizes",
    "ppm_channels": "channels per pyramid level",
    "stage1_widths": "stage-1 3x3 width and 1x1 width",
    "refine_width": "channels of the refinement stages",
    "refine_kernel": "kernel size of the refinement stages",
    "sigma_max": "Gaussian sigma of stage 1 (map px)",
    "sigma_min": "Gaussian sigma of the last stage (map px)",
    "seed": "seed for initialization and batch order",
    "checkpoint_every": "write last.pkc every N epochs",
}


def _add_dataclass_options(parser, cls, skip=()):
    group = parser.add_argument_group(f"{cls.__name__} options")
    for f in fields(cls):
        if f.name in skip:
            continue
        if isinstance(f.default, tuple):
            kind, default = _ints, ",".join(str(v) for v in f.default)
        else:
            kind, default = type(f.default), f.default
        group.add_argument(_flag(f.name), dest=f.name, type=kind, default=default, metavar=f.name.upper(),
                           help=_HELP.get(f.name, f.name.replace("_", " ")))


def _peak_options(parser):
    p, t = PeakParams(), TrainConfig()
    parser.add_argument("--tau", type=float, default=p.tau, help="peak threshold")
    parser.add_argument("--delta", type=float, default=p.delta, help="minimum distance between kept peaks (map px)")
    parser.add_argument("--match-radius", dest="match_radius", type=float, default=t.match_radius,
                        help="match radius in map pixels (scaled by the stride in image space)")


def _defaults_epilog() -> str:
    parts = [f"{f.name}={getattr(NetworkConfig(), f.name)}" for f in fields(NetworkConfig)]
    parts += [f"{f.name}={getattr(TrainConfig(), f.name)}" for f in fields(TrainConfig)]
    body = "\n".join(f"  {p}" for p in parts)
    return f"defaults (override with --option or a --config file):\n{body}\n"


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="ppmcount", description="Count and locate objects with multi-stage confidence maps.",
        epilog=_defaults_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", type=Path, default=None, help="flat key=value file of option defaults")
        return p

    spec = SynthSpec()
    p = command("synth", "generate a synthetic dataset of disk-shaped objects")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--n", type=int, default=spec.n_samples, help="number of samples")
    p.add_argument("--size", type=int, default=spec.image_size, help="image side in pixels")
    p.add_argument("--count", type=_ints, default=",".join(map(str, spec.count_range)),
                   help="objects per image: N or MIN,MAX")
    p.add_argument("--radius", type=_floats, default=",".join(map(str, spec.radius_range)), help="disk radius MIN,MAX")
    p.add_argument("--placement", choices=("grid", "uniform"), default=spec.placement,
                   help="jittered grid cells or rejection-sampled uniform positions")
    p.add_argument("--grid-cell", dest="grid_cell", type=int, default=spec.grid_cell, help="grid cell side (px)")
    p.add_argument("--jitter", type=float, default=spec.jitter, help="max offset from the cell centre (px)")
    p.add_argument("--min-separation", dest="min_separation", type=float, default=spec.min_separation,
                   help="minimum distance between object centres (px)")
    p.add_argument("--seed", type=int, default=spec.seed, help="generator seed")
    p.add_argument("--split", type=_floats, default=DEFAULT_SPLIT, help="train,val,test fractions")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0, help="seed of the split order")

    p = command("tile", "cut a large annotated raster into square patches")
    p.add_argument("--raster", type=Path, required=True, help="P6 image")
    p.add_argument("--annotations", type=Path, required=True, help="annotation JSON with one record for the raster")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--patch", type=int, default=512, help="tile side (px)")
    p.add_argument("--overlap", type=int, default=0, help="overlap between adjacent tiles (px)")
    p.add_argument("--prefix", default="tile", help="tile id prefix")
    p.add_argument("--split", type=_floats, default=DEFAULT_SPLIT, help="train,val,test fractions")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0, help="seed of the split order")

    p = command("train", "train a model on the train split, selecting by validation MAE")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--input-size", dest="input_size", type=int, default=None,
                   help="network input side; defaults to the dataset image size")
    _add_dataclass_options(p, NetworkConfig, _NET_SKIP)
    _add_dataclass_options(p, TrainConfig, _TRAIN_SKIP)
    _peak_options(p)

    p = command("predict", "detect objects with a trained checkpoint")
    p.add_argument("--model", type=Path, required=True, help="checkpoint (.pkc with sibling .cfg)")
    p.add_argument("--out", type=Path, required=True, help="detections CSV")
    p.add_argument("--data", type=Path, default=None, help="dataset directory (instead of image files)")
    p.add_argument("--split", dest="subset", default="all", help="dataset split to run on, or 'all'")
    p.add_argument("--maps", type=Path, default=None, help="directory for final confidence maps (.npy)")
    p.add_argument("images", nargs="*", type=Path, help="P6 images")
    p.add_argument("--tau", type=float, default=PeakParams().tau, help="peak threshold")
    p.add_argument("--delta", type=float, default=PeakParams().delta, help="minimum distance between kept peaks")

    p = command("evaluate", "score a checkpoint or a detections CSV against annotations")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path, help="checkpoint (.pkc with sibling .cfg)")
    src.add_argument("--detections", type=Path, help="detections CSV from predict")
    p.add_argument("--split", dest="subset", default="test", help="dataset split to score, or 'all'")
    p.add_argument("--stride", type=int, default=STRIDE, help="map stride, used with --detections")
    p.add_argument("--density-bounds", dest="density_bounds", type=_ints, default=None,
                   help="LOW,MEDIUM upper counts; terciles of the scored set when omitted")
    p.add_argument("--out", type=Path, default=None, help="report CSV")
    _peak_options(p)

    p = command("render", "draw a confidence map and/or detections as a P6 overlay")
    p.add_argument("--out", type=Path, required=True, help="output P6 image")
    p.add_argument("--image", type=Path, default=None, help="P6 base image")
    p.add_argument("--map", type=Path, default=None, help="confidence map (.npy), drawn as grayscale")
    p.add_argument("--detections", type=Path, default=None, help="detections CSV")
    p.add_argument("--image-id", dest="image_id", default=None, help="row filter for --detections")
    p.add_argument("--stride", type=int, default=STRIDE, help="map-to-image scale for --map")
    p.add_argument("--circle", type=float, default=0.0, help="also draw circles of this radius (image px)")
    return parser


def _read_config(path: Path) -> dict:
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{n}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _config_path(argv) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((tok for tok in argv if tok in COMMANDS), None)
    path = _config_path(argv)
    if command is not None and path is not None:
        values = _read_config(path)
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise CliError(f"{path}: unknown keys {', '.join(unknown)}")
        for key, value in values.items():
            # string defaults pass through each option's type converter
            actions[key].default = value
            actions[key].required = False
    return parser.parse_args(argv)


# -- commands -------------------------------------------------------------------

def _subset(samples, name):
    if name == "all":
        return list(samples)
    if name not in SPLITS:
        raise CliError(f"unknown split {name!r}; use one of {', '.join(SPLITS)} or 'all'")
    return [s for s in samples if s.split == name]


def cmd_synth(args) -> None:
    count = args.count if len(args.count) == 2 else args.count * 2
    if len(count) != 2 or len(args.radius) != 2:
        raise CliError("--count takes N or MIN,MAX and --radius takes MIN,MAX")
    spec = SynthSpec(n_samples=args.n, image_size=args.size, count_range=count, radius_range=args.radius,
                     placement=args.placement, grid_cell=args.grid_cell, jitter=args.jitter,
                     min_separation=args.min_separation, seed=args.seed)
    samples = split(synthesize(spec), args.split, args.split_seed)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_tile(args) -> None:
    raster = read_ppm(args.raster)
    records = load_annotations(args.annotations)
    if len(records) != 1:
        raise CliError(f"{args.annotations}: expected one record for the raster, found {len(records)}")
    pts = records[0].points
    if (pts.width, pts.height) != (raster.shape[1], raster.shape[0]):
        raise CliError(f"annotation size {pts.width}x{pts.height} does not match raster "
                       f"{raster.shape[1]}x{raster.shape[0]}")
    tiles = tag_density(tile(raster, pts, args.patch, args.overlap, args.prefix))
    tiles = split(tiles, args.split, args.split_seed)
    write_dataset(args.out, tiles)
    print(f"wrote {len(tiles)} tiles to {args.out}")


def _train_config(args) -> TrainConfig:
    return TrainConfig(**{f.name: getattr(args, f.name) for f in fields(TrainConfig)})


def cmd_train(args) -> None:
    samples = read_dataset(args.data)
    if not samples:
        raise CliError(f"{args.data}: empty dataset")
    size = args.input_size or samples[0].image.shape[0]
    net = NetworkConfig(input_size=size, **{f.name: getattr(args, f.name) for f in fields(NetworkConfig)
                                            if f.name not in _NET_SKIP})
    cfg = _train_config(args)
    model, trainlog = train(Model(net, seed=cfg.seed), samples, cfg, run_dir=args.out)
    print(f"best epoch {trainlog.best_epoch}; checkpoint {args.out / 'best.pkc'}")
    test = _subset(samples, "test")
    if test:
        report = evaluate(model, test, cfg)
        atomic_write(args.out / "test_report.csv", report_csv(report))
        print(report_table(report, _header(cfg.tau, cfg.delta, cfg.match_radius, "test")), end="")


def _load_images(args) -> list[tuple[str, np.ndarray]]:
    items = []
    if args.data is not None:
        items += [(s.image_id, s.image) for s in _subset(read_dataset(args.data), args.subset)]
    items += [(p.stem, read_ppm(p)) for p in args.images]
    if not items:
        raise CliError("no images given: pass P6 files or --data")
    return items


def cmd_predict(args) -> None:
    model = load_model(args.model)
    params = PeakParams(args.tau, args.delta)
    items = _load_images(args)
    rows = []
    for image_id, image in items:
        if image.shape[:2] != (model.config.input_size,) * 2:
            raise CliError(f"{image_id}: image {image.shape[1]}x{image.shape[0]} does not match the "
                           f"model input size {model.config.input_size}")
        final = model(image_tensor(image))[-1].data[0, 0]
        rows.append((image_id, find_peaks(final, params, model.config.stride)))
        if args.maps is not None:
            args.maps.mkdir(parents=True, exist_ok=True)
            np.save(args.maps / f"{image_id}.npy", final)
    write_detections(args.out, rows)
    print(f"wrote {sum(len(d) for _, d in rows)} detections for {len(rows)} images to {args.out}")


def _header(tau, delta, radius, subset) -> list[str]:
    return [f"tau={tau} delta={delta} match_radius={radius} (map px) split={subset}"]


def cmd_evaluate(args) -> None:
    samples = _subset(read_dataset(args.data), args.subset)
    if not samples:
        raise CliError(f"no samples in split {args.subset!r}")
    bounds = args.density_bounds
    if bounds is not None and len(bounds) != 2:
        raise CliError("--density-bounds takes LOW,MEDIUM")
    if args.model is not None:
        model = load_model(args.model)
        cfg = TrainConfig(tau=args.tau, delta=args.delta, match_radius=args.match_radius)
        report = evaluate(model, samples, cfg, bounds)
    else:
        dets = read_detections(args.detections)
        radius = args.match_radius * args.stride
        results = [match_points(s.points.points, dets.get(s.image_id, np.zeros((0, 2))), radius, s.image_id)
                   for s in samples]
        report = build_report(results, bounds)
    if args.out is not None:
        atomic_write(args.out, report_csv(report))
    print(report_table(report, _header(args.tau, args.delta, args.match_radius, args.subset)), end="")


RED = np.array([255, 0, 0], dtype=np.uint8)
YELLOW = np.array([255, 255, 0], dtype=np.uint8)


def _draw_cross(img, x, y):
    h, w = img.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)):
        if 0 <= cx + dx < w and 0 <= cy + dy < h:
            img[cy + dy, cx + dx] = RED


def _draw_circle(img, x, y, r):
    h, w = img.shape[:2]
    steps = max(16, int(2 * np.pi * r * 2))
    t = np.linspace(0, 2 * np.pi, steps, endpoint=False)
    xs = np.rint(x + r * np.cos(t)).astype(int)
    ys = np.rint(y + r * np.sin(t)).astype(int)
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[ys[keep], xs[keep]] = YELLOW


def map_layer(grid: np.ndarray, stride: int) -> np.ndarray:
    """Grayscale (h*s, w*s, 3) uint8 rendering of a [0, 1] confidence map."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or np.any(grid < 0) or np.any(grid > 1):
        raise CliError("confidence map must be a 2D array with values in [0, 1]")
    g = np.rint(grid * 255).astype(np.uint8)
    g = np.repeat(np.repeat(g, stride, axis=0), stride, axis=1)
    return np.repeat(g[..., None], 3, axis=2)


def cmd_render(args) -> None:
    if args.image is None and args.map is None:
        raise CliError("render needs --image and/or --map")
    base = read_ppm(args.image) if args.image is not None else None
    if args.map is not None:
        layer = map_layer(np.load(args.map), args.stride)
        if base is not None and base.shape != layer.shape:
            raise CliError(f"map layer {layer.shape[1]}x{layer.shape[0]} does not match image "
                           f"{base.shape[1]}x{base.shape[0]}")
        base = layer
    img = base.copy()
    if args.detections is not None:
        table = read_detections(args.detections)
        if args.image_id is None and len(table) > 1:
            raise CliError("detections cover several images; choose one with --image-id")
        key = args.image_id if args.image_id is not None else next(iter(table), None)
        for x, y in table.get(key, np.zeros((0, 2))):
            if args.circle > 0:
                _draw_circle(img, x, y, args.circle)
            _draw_cross(img, x, y)
    write_ppm(args.out, img)
    print(f"wrote {args.out}")


COMMANDS = {"synth": cmd_synth, "tile": cmd_tile, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "render": cmd_render}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (CliError, OSError) as exc:
        print(f"ppmcount: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"ppmcount: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
