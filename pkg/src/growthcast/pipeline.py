"""End-to-end steps shared by the CLI and the experiment scripts."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .convlstm import ConvLstmModel, ModelConfig, TrainConfig, TrainLog, train_model
from .data import DataError, Dataset, Raster, TileSet, make_dataset, persistence_baseline, tile
from .masks import clean_mask
from .metrics import MetricReport, evaluate_tiles
from .segnet import SegConfig, label_histogram, select_urban_label, train_segmentation
from .tensor import RngStream

log = logging.getLogger(__name__)


class LabelSelectionError(ValueError):
    """No way to decide which segmentation label is urban; carries the label map."""

    def __init__(self, message: str, labels: np.ndarray | None = None):
        super().__init__(message)
        self.labels = labels


@dataclass
class SegmentationOutput:
    labels: np.ndarray  # block-local label ids, int32 [H, W]
    raw_mask: np.ndarray  # before cleanup
    mask: np.ndarray
    blocks: int
    urban_labels: list  # chosen id per block (None where the reference is empty)


def block_slices(height: int, width: int, block: int):
    """Row-major ``(rows, cols)`` slices covering the image; edge blocks are cropped."""
    for r0 in range(0, height, block):
        for c0 in range(0, width, block):
            yield slice(r0, min(r0 + block, height)), slice(c0, min(c0 + block, width))


def segment_raster(raster: Raster, cfg: SegConfig, block_size: int, seed: int,
                   reference: np.ndarray | None = None, urban_label: int | None = None,
                   min_area: int = 64, radius: int = 1, connectivity: int = 8) -> SegmentationOutput:
    """Segment block by block, pick the urban label, clean the mask.

    Label ids are only meaningful within a block.  With ``reference`` the
    urban label is chosen per block by IoU; otherwise ``urban_label`` is used
    for every block.  Each block gets its own child RNG stream so results do
    not depend on block processing order.
    """
    px = raster.pixels
    _, h, w = px.shape
    if reference is not None and reference.shape != (h, w):
        raise DataError(f"reference mask {reference.shape} does not match raster {(h, w)}")
    rng = RngStream(seed)
    labels = np.zeros((h, w), dtype=np.int32)
    raw = np.zeros((h, w), dtype=np.uint8)
    chosen = []
    slices = list(block_slices(h, w, block_size))
    for j, (rs, cs) in enumerate(slices):
        res = train_segmentation(px[:, rs, cs], cfg, rng.child(j))
        labels[rs, cs] = res.labels
        log.info("block %d/%d: %d labels after %d iterations", j + 1, len(slices),
                 np.unique(res.labels).size, res.iterations)
        if reference is not None:
            ref = reference[rs, cs]
            u = select_urban_label(res.labels, ref) if ref.any() else None
        elif urban_label is not None:
            u = urban_label
        else:
            u = None
        chosen.append(u)
        if u is not None:
            raw[rs, cs] = res.labels == u
    if reference is None and urban_label is None:
        hist = ", ".join(f"{k}:{v}" for k, v in label_histogram(labels).items())
        raise LabelSelectionError(
            f"urban label unknown; pass --urban-label N or --reference PATH (label histogram {hist})", labels)
    mask = clean_mask(raw, min_area, radius, connectivity)
    return SegmentationOutput(labels, raw, mask, len(slices), chosen)


def date_tilesets(masks, tile_size: int) -> list[TileSet]:
    sets = [tile(np.asarray(m, dtype=np.float32), tile_size) for m in masks]
    for i, ts in enumerate(sets[1:], 2):
        if not ts.same_grid(sets[0]):
            raise DataError(f"grid mismatch between date 1 and date {i}")
    return sets


def train_validation_sets(masks, tile_size: int) -> tuple[Dataset, Dataset]:
    """Train on date 1 -> 2 and validate on 2 -> 3."""
    if len(masks) < 3:
        raise DataError(f"validation requires k=2, m=3 (got {len(masks)} dates)")
    sets = date_tilesets(masks, tile_size)
    return make_dataset(sets, 1, 2, "train"), make_dataset(sets, 2, 3, "validate")


def fit(masks, tile_size: int, model_cfg: ModelConfig, train_cfg: TrainConfig):
    train, val = train_validation_sets(masks, tile_size)
    model = ConvLstmModel(model_cfg)
    train_log: TrainLog = train_model(model, train, train_cfg, val)
    return model, train_log, train, val


def compare(truth_tiles, pred_tiles, input_tiles, threshold: float = 0.5,
            ssim_window: int = 11) -> list[MetricReport]:
    """Model report and persistence report on the same tiles."""
    reports = [evaluate_tiles(truth_tiles, pred_tiles, threshold, "convlstm", ssim_window)]
    if input_tiles is not None:
        reports.append(evaluate_tiles(truth_tiles, persistence_baseline(input_tiles), threshold,
                                      "persistence", ssim_window))
    return reports
