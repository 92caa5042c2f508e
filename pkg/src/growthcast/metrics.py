"""Prediction quality metrics and the per-tile evaluation report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CLASS_NAMES = ("urban", "non-urban")


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check(a, b)
    return float(np.mean((a - b) ** 2))


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b))


def psnr_from_mse(err: float, max_value: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    return psnr_from_mse(mse(a, b), max_value)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over every fully-contained window position
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    """Local SSIM for a single band, one value per valid window position."""
    a, b = _check(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim_map expects a 2D band, got {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean single-scale SSIM; ``[bands, H, W]`` inputs are averaged over bands."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    a = a.reshape((-1,) + a.shape[-2:])
    b = b.reshape((-1,) + b.shape[-2:])
    if np.array_equal(a, b):
        return 1.0
    vals = [ssim_map(x, y, window, sigma, k1, k2, data_range).mean() for x, y in zip(a, b)]
    return float(np.mean(vals))


# ----------------------------------------------------------------------------
# classification


@dataclass
class ConfusionMatrix:
    """2x2 counts, rows = truth, columns = prediction, order (urban, non-urban)."""

    counts: np.ndarray

    @classmethod
    def from_masks(cls, truth, pred) -> "ConfusionMatrix":
        t = np.asarray(truth) != 0
        p = np.asarray(pred) != 0
        if t.shape != p.shape:
            raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
        if t.size == 0:
            raise ValueError("cannot build a confusion matrix from zero pixels")
        counts = np.array([[np.sum(t & p), np.sum(t & ~p)],
                           [np.sum(~t & p), np.sum(~t & ~p)]], dtype=np.int64)
        return cls(counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    @property
    def kappa(self) -> float:
        """Cohen's kappa; 1.0 when chance agreement is already perfect."""
        n = self.total
        if n == 0:
            raise ValueError("empty confusion matrix")
        c = self.counts.astype(np.float64)
        p_o = np.trace(c) / n
        p_e = float(np.sum(c.sum(axis=1) * c.sum(axis=0))) / n ** 2
        if p_e == 1.0:
            return 1.0
        return float((p_o - p_e) / (1 - p_e))

    def normalized(self) -> np.ndarray:
        """Row-normalized matrix; a row with no truth pixels stays zero."""
        c = self.counts.astype(np.float64)
        rows = c.sum(axis=1, keepdims=True)
        return np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)


def confusion(truth, pred) -> ConfusionMatrix:
    return ConfusionMatrix.from_masks(truth, pred)


def binarize(x, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(x) > threshold).astype(np.uint8)


# ----------------------------------------------------------------------------
# report


@dataclass
class TileMetrics:
    mse: float
    rmse: float
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    tiles: list[TileMetrics]
    confusion: ConfusionMatrix
    name: str = "model"
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tiles)

    def mean(self, key: str) -> float:
        """Arithmetic mean over tiles of a per-tile metric."""
        return float(np.mean([getattr(t, key) for t in self.tiles]))

    @property
    def rmse_of_mean_mse(self) -> float:
        return math.sqrt(self.mean("mse"))

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy

    @property
    def kappa(self) -> float:
        return self.confusion.kappa

    def summary(self) -> dict:
        return {
            "ssim": self.mean("ssim"), "psnr": self.mean("psnr"), "rmse": self.mean("rmse"),
            "mse": self.mean("mse"), "rmse_of_mean_mse": self.rmse_of_mean_mse,
            "accuracy": self.accuracy, "kappa": self.kappa, "tiles": len(self.tiles),
        }


def evaluate_tiles(truth_tiles, pred_tiles, threshold: float = 0.5, name: str = "model",
                   ssim_window: int = 11) -> MetricReport:
    """Per-tile regression metrics on the raw predictions plus a pooled confusion matrix.

    PSNR/SSIM/MSE compare the continuous prediction against the truth; the
    confusion matrix uses predictions binarized at ``threshold``.
    """
    truth_tiles = np.asarray(truth_tiles, dtype=np.float64)
    pred_tiles = np.asarray(pred_tiles, dtype=np.float64)
    if truth_tiles.shape != pred_tiles.shape:
        raise ValueError(f"shape mismatch: {truth_tiles.shape} vs {pred_tiles.shape}")
    rows = []
    cm = None
    for t, p in zip(truth_tiles, pred_tiles):
        e = mse(t, p)
        rows.append(TileMetrics(e, math.sqrt(e), psnr_from_mse(e), ssim(t, p, window=ssim_window)))
        c = confusion(t >= 0.5, binarize(p, threshold))
        cm = c if cm is None else cm + c
    if cm is None:
        raise ValueError("no tiles to evaluate")
    return MetricReport(rows, cm, name=name)


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


def report_csv(reports: list[MetricReport]) -> str:
    """One row per (model, tile) plus two summary rows per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "tile", "mse", "rmse", "psnr", "ssim"])
    for r in reports:
        for j, t in enumerate(r.tiles):
            w.writerow([r.name, j, _fmt(t.mse), _fmt(t.rmse), _fmt(t.psnr), _fmt(t.ssim)])
        w.writerow([r.name, "mean", _fmt(r.mean("mse")), _fmt(r.mean("rmse")),
                    _fmt(r.mean("psnr")), _fmt(r.mean("ssim"))])
        w.writerow([r.name, "mean_mse_sqrt", _fmt(r.mean("mse")), _fmt(r.rmse_of_mean_mse), "", ""])
    return buf.getvalue()


def report_table(reports: list[MetricReport]) -> str:
    """Text summary: SSIM/PSNR/RMSE/MSE means, then accuracy, kappa and the
    row-normalized confusion matrix of each model."""
    width = max(12, *(len(r.name) for r in reports)) + 2
    lines = [f"{'':<{width}}{'SSIM':>10}{'PSNR':>10}{'RMSE':>10}{'MSE':>10}"]
    for r in reports:
        lines.append(f"{r.name:<{width}}" + "".join(
            f"{_fmt(r.mean(k)):>10}" for k in ("ssim", "psnr", "rmse", "mse")))
    lines.append("")
    for r in reports:
        lines.append(f"{r.name}: accuracy {100 * r.accuracy:.2f}%  kappa {r.kappa:.4f}")
        norm = r.confusion.normalized()
        corner = "truth \\ pred"
        lines.append(f"  {corner:<14}{CLASS_NAMES[0]:>11}{CLASS_NAMES[1]:>11}")
        for i, cname in enumerate(CLASS_NAMES):
            lines.append(f"  {cname:<14}{norm[i, 0]:>11.4f}{norm[i, 1]:>11.4f}")
    return "\n".join(lines) + "\n"
