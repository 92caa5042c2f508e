"""``growthcast`` command line: synth, segment, clean, tile, train, predict, evaluate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Errors are printed to stderr as one line, ``<ErrorClass>: <message>``.
The log level comes from the ``GROWTHCAST_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .convlstm import CheckpointError, load_checkpoint, predict, save_checkpoint
from .data import (DataError, Raster, load_mask, load_raster, save_mask, save_raster, stitch, tile,
                   write_raw)
from .masks import clean_mask
from .metrics import report_csv, report_table
from .pipeline import LabelSelectionError, compare, date_tilesets, fit, segment_raster
from .segnet import save_label_map
from .synth import generate_series, growth_stats
from .tensor import NumericError, ShapeError

log = logging.getLogger("growthcast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--urban-label", type=int, dest="urban_label")
    p.add_argument("--reference", metavar="PATH")
    p.add_argument("--threshold", type=float)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="growthcast", description="Urban growth prediction from mask time series.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    specs = {
        "synth": ("write a synthetic mask/render series", []),
        "segment": ("segment an image into an urban mask", [("input", {})]),
        "clean": ("remove noise from a binary mask", [("input", {})]),
        "tile": ("cut a raster into tiles", [("input", {})]),
        "train": ("train the ConvLSTM on masks of consecutive dates", [("masks", {"nargs": "+"})]),
        "predict": ("predict the next-date mask", [("checkpoint", {}), ("input", {})]),
        "evaluate": ("score a prediction, plus the persistence baseline when PREVIOUS is given",
                     [("truth", {}), ("prediction", {}), ("previous", {"nargs": "?"})]),
    }
    for name, (help_, positionals) in specs.items():
        p = sub.add_parser(name, help=help_)
        for arg, kw in positionals:
            p.add_argument(arg, **kw)
        _common(p)
    return parser


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: cannot create output directory ({exc.strerror})") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"{out}: output directory is not writable")
    return out


def _stem(path) -> str:
    return Path(path).name.split(".")[0]


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _outdir(cfg)
    masks, renders = generate_series(cfg.growth())
    for t, (m, r) in enumerate(zip(masks, renders), 1):
        save_mask(m, out / f"mask_{t}.png")
        save_raster(r, out / f"render_{t}.png")
    st = growth_stats(masks)
    with open(out / "growth_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "urban_fraction", "changed", "frontier", "step_rate"])
        w.writerow([1, f"{st.fractions[0]:.6f}", "", "", ""])
        for t in range(1, len(masks)):
            w.writerow([t + 1, f"{st.fractions[t]:.6f}", st.changed[t - 1], st.frontier_sizes[t - 1],
                        f"{st.step_rates[t - 1]:.6f}"])
    log.info("wrote %d dates to %s", len(masks), out)


def cmd_segment(args, cfg: RunConfig) -> None:
    raster = load_raster(args.input)
    reference = load_mask(cfg.reference) if cfg.reference else None
    out = _outdir(cfg)
    stem = _stem(args.input)
    try:
        res = segment_raster(raster, cfg.seg(), cfg.block_size, cfg.seed, reference, cfg.urban_label,
                             cfg.min_area, cfg.morph_radius, cfg.connectivity)
    except LabelSelectionError as exc:
        if exc.labels is not None:
            save_label_map(exc.labels, out / f"{stem}_labels.png")
        raise
    save_label_map(res.labels, out / f"{stem}_labels.png")
    save_mask(res.mask, out / f"{stem}_mask.png")
    log.info("%d blocks, urban labels %s", res.blocks, res.urban_labels)


def cmd_clean(args, cfg: RunConfig) -> None:
    mask = load_mask(args.input)
    out = _outdir(cfg)
    save_mask(clean_mask(mask, cfg.min_area, cfg.morph_radius, cfg.connectivity),
              out / f"{_stem(args.input)}_clean.png")


def cmd_tile(args, cfg: RunConfig) -> None:
    raster = load_raster(args.input)
    ts = tile(raster, cfg.tile_size)
    out = _outdir(cfg) / _stem(args.input)
    out.mkdir(exist_ok=True)
    ext = ".png" if raster.bit_depth == 8 else ".urtn"
    for j, t in enumerate(ts.tiles):
        save_raster(Raster(t), out / f"tile_{j:04d}{ext}")
    bottom, right = ts.pad
    (out / "grid.txt").write_text(
        f"tile_size = {ts.tile_size}\nrows = {ts.rows}\ncols = {ts.cols}\n"
        f"height = {ts.height}\nwidth = {ts.width}\npad_bottom = {bottom}\npad_right = {right}\n")


def cmd_train(args, cfg: RunConfig) -> None:
    masks = [load_mask(p) for p in args.masks]
    if len(masks) < 3:
        raise DataError(f"validation requires k=2, m=3 (got {len(masks)} dates)")
    n_tiles = len(date_tilesets(masks[:3], cfg.tile_size)[0])
    if cfg.batch_size > n_tiles:
        raise ConfigError(f"batch_size: {cfg.batch_size} exceeds the {n_tiles} training tiles")
    out = _outdir(cfg)
    model, train_log, _, _ = fit(masks[:3], cfg.tile_size, cfg.model(), cfg.train())
    save_checkpoint(model, out / "model.gckp")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"])
        for e in train_log.epochs:
            w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_accuracy:.6f}",
                        f"{e.val_loss:.6f}", f"{e.val_accuracy:.6f}"])
    (out / "run_config.txt").write_text(dump_config(cfg))
    log.info("best epoch %d of %d", train_log.best_epoch, len(train_log))


def cmd_predict(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.checkpoint)
    mask = load_mask(args.input)
    ts = tile(mask.astype(np.float32), cfg.tile_size)
    prob = predict(model, ts.array())
    if not np.all(np.isfinite(prob)):
        raise NumericError("prediction contains non-finite values")
    full = stitch(ts.replace(list(prob))).pixels
    out = _outdir(cfg)
    write_raw(out / "prediction.urtn", full)
    save_mask((full[0] > cfg.threshold).astype(np.uint8), out / "prediction.png")


def _load_prediction(path) -> np.ndarray:
    return load_raster(path).pixels[0].astype(np.float64)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    truth = load_mask(args.truth)
    pred = _load_prediction(args.prediction)
    prev = load_mask(args.previous) if args.previous else None
    for name, arr in (("prediction", pred), ("previous", prev)):
        if arr is not None and arr.shape != truth.shape:
            raise DataError(f"{name} {arr.shape} does not match truth {truth.shape}")
    t_tiles = tile(truth.astype(np.float64), cfg.tile_size).array()
    p_tiles = tile(pred, cfg.tile_size).array()
    x_tiles = tile(prev.astype(np.float64), cfg.tile_size).array() if prev is not None else None
    try:
        reports = compare(t_tiles, p_tiles, x_tiles, cfg.threshold)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _outdir(cfg)
    table = report_table(reports)
    (out / "report.csv").write_text(report_csv(reports))
    (out / "report.txt").write_text(table)
    sys.stdout.write(table)


COMMANDS = {"synth": cmd_synth, "segment": cmd_segment, "clean": cmd_clean, "tile": cmd_tile,
            "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate}

_CONFIG_ERRORS = (ConfigError, LabelSelectionError)
_DATA_ERRORS = (DataError, CheckpointError, ShapeError, OSError)
_NUMERIC_ERRORS = (NumericError, FloatingPointError)


def _setup_logging() -> None:
    level = os.environ.get("GROWTHCAST_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"GROWTHCAST_LOG: unknown log level {level!r}")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    sys.stderr.write(f"{type(exc).__name__}: {msg}\n")
    return code


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k) for k in ("seed", "out", "tile_size", "block_size",
                                                    "urban_label", "reference", "threshold", "epochs")}
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](args, cfg)
    except _CONFIG_ERRORS as exc:
        return _fail(exc, EXIT_CONFIG)
    except _DATA_ERRORS as exc:
        return _fail(exc, EXIT_DATA)
    except _NUMERIC_ERRORS as exc:
        return _fail(exc, EXIT_NUMERIC)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
