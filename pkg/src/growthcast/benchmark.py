"""Synthetic end-to-end run: grow, render, segment, train, validate.

Everything is seeded, so two runs with the same config give identical numbers.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .convlstm import ModelConfig, TrainConfig, TrainLog, predict
from .metrics import MetricReport
from .pipeline import compare, fit, segment_raster
from .segnet import SegConfig
from .synth import GrowthConfig, generate_series

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    seg: SegConfig = field(default_factory=lambda: SegConfig(n_components=2, n_features=32, n_labels=32))
    seg_seed: int = 100  # date d is segmented with seed seg_seed + d
    min_area: int = 16
    tile_size: int = 64
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=2, filters=8))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=1, epochs_max=32))
    threshold: float = 0.5


@dataclass
class BenchmarkResult:
    truth_masks: list
    seg_masks: list
    seg_iou: list
    train_log: TrainLog
    reports: list[MetricReport]  # convlstm, persistence on the segmented date-3 tiles
    seconds: float

    @property
    def model(self) -> MetricReport:
        return self.reports[0]

    @property
    def persistence(self) -> MetricReport:
        return self.reports[1]

    @property
    def val_loss_drop(self) -> float:
        """Relative drop of validation cross-entropy from epoch 1 to the best epoch."""
        losses = self.train_log.column("val_loss")
        return 1.0 - min(losses) / losses[0]


def iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def run_benchmark(cfg: BenchmarkConfig | None = None) -> BenchmarkResult:
    cfg = cfg or BenchmarkConfig()
    start = time.perf_counter()
    truth, renders = generate_series(cfg.growth)
    block = max(cfg.growth.width, cfg.growth.height)
    seg = []
    for d, (render, ref) in enumerate(zip(renders, truth), 1):
        out = segment_raster(render, cfg.seg, block, cfg.seg_seed + d, reference=ref,
                             min_area=cfg.min_area)
        seg.append(out.mask)
        log.info("date %d: segmentation IoU %.4f", d, iou(out.mask, ref))
    model, train_log, _, val = fit(seg, cfg.tile_size, cfg.model, cfg.train)
    prob = predict(model, val.X)
    reports = compare(val.Y, prob, val.X, cfg.threshold)
    return BenchmarkResult(truth, seg, [iou(s, t) for s, t in zip(seg, truth)], train_log, reports,
                           time.perf_counter() - start)
