"""Synthetic urban-growth time series for desk-scale experiments.

Urban blobs are seeded at an initial coverage and then grow only by accretion:
at each step a random share of the non-urban pixels touching the urban set is
converted.  Each date also gets a pseudo-satellite RGB render with textured
background and sensor noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Raster
from .tensor import RngStream

_CROSS = ndimage.generate_binary_structure(2, 1)

# band reflectances, roughly: bright concrete vs. sandy soil
URBAN_RGB = np.array([0.78, 0.76, 0.80])
SOIL_RGB = np.array([0.55, 0.42, 0.28])


@dataclass
class GrowthConfig:
    width: int = 128
    height: int = 128
    dates: int = 3
    seed: int = 42
    initial_fraction: float = 0.15
    growth_rate: float = 0.05
    noise: float = 0.05
    blob_radius: tuple[int, int] = (3, 9)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"width/height must be positive, got {self.width}x{self.height}")
        if self.dates < 2:
            raise ValueError(f"dates must be >= 2, got {self.dates}")
        if not 0 < self.initial_fraction < 1:
            raise ValueError(f"initial_fraction must be in (0, 1), got {self.initial_fraction}")
        if not 0 <= self.growth_rate <= 1:
            raise ValueError(f"growth_rate must be in [0, 1], got {self.growth_rate}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def frontier(mask: np.ndarray) -> np.ndarray:
    """Non-urban pixels 4-adjacent to the urban set."""
    m = mask.astype(bool)
    return ndimage.binary_dilation(m, structure=_CROSS) & ~m


def _seed_blobs(cfg: GrowthConfig, rng: RngStream) -> np.ndarray:
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    target = cfg.initial_fraction * h * w
    rmin, rmax = cfg.blob_radius
    while mask.sum() < target:
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        r = rng.integers(rmin, rmax + 1)
        # mildly elliptic blobs look less synthetic than discs
        a = r * rng.uniform(0.7, 1.3, ())
        mask |= ((yy - cy) / a) ** 2 + ((xx - cx) / r) ** 2 <= 1.0
    return mask


def _grow(mask: np.ndarray, rate: float, rng: RngStream) -> np.ndarray:
    idx = np.flatnonzero(frontier(mask))
    n = int(round(rate * idx.size))
    out = mask.copy()
    if n:
        out.ravel()[rng.choice(idx, n, replace=False)] = True
    return out


def _smooth_noise(shape, rng: RngStream, sigma: float) -> np.ndarray:
    z = ndimage.gaussian_filter(rng.normal(shape), sigma, mode="wrap")
    return z / (z.std() + 1e-12)


def render(mask: np.ndarray, rng: RngStream, noise: float = 0.05) -> Raster:
    """Pseudo-satellite RGB image of an urban mask."""
    h, w = mask.shape
    texture = 0.06 * _smooth_noise((h, w), rng, 4.0) + 0.03 * _smooth_noise((h, w), rng, 1.0)
    m = mask.astype(np.float64)[None]
    base = m * URBAN_RGB[:, None, None] + (1 - m) * SOIL_RGB[:, None, None]
    img = base + (1 - m) * texture[None] + rng.normal((3, h, w), noise)
    return Raster(np.clip(img, 0.0, 1.0).astype(np.float32), bit_depth=32)


def generate_series(cfg: GrowthConfig):
    """Returns ``(masks, renders)``: T uint8 masks and T RGB rasters."""
    cfg.validate()
    rng = RngStream(cfg.seed)
    mask = _seed_blobs(cfg, rng)
    masks = [mask]
    for _ in range(cfg.dates - 1):
        mask = _grow(mask, cfg.growth_rate, rng)
        masks.append(mask)
    renders = [render(m, rng.child(t), cfg.noise) for t, m in enumerate(masks)]
    return [m.astype(np.uint8) for m in masks], renders


@dataclass
class GrowthStats:
    fractions: list[float]
    changed: list[int]  # pixels newly urban at each step
    lost: list[int]  # pixels that stopped being urban (0 for accretion)
    frontier_sizes: list[int]

    @property
    def step_rates(self) -> list[float]:
        """Converted share of the frontier at each step."""
        return [c / f if f else 0.0 for c, f in zip(self.changed, self.frontier_sizes)]


def growth_stats(masks) -> GrowthStats:
    if len(masks) < 2:
        raise ValueError("growth_stats needs at least two masks")
    ms = [np.asarray(m).astype(bool) for m in masks]
    fractions = [float(m.mean()) for m in ms]
    changed = [int(np.sum(b & ~a)) for a, b in zip(ms, ms[1:])]
    lost = [int(np.sum(a & ~b)) for a, b in zip(ms, ms[1:])]
    fronts = [int(frontier(a).sum()) for a in ms[:-1]]
    return GrowthStats(fractions, changed, lost, fronts)


def stripe_image(size: int = 64, levels=(0.2, 0.5, 0.8), noise: float = 0.05, seed: int = 0,
                 bands: int = 3) -> np.ndarray:
    """Vertical gray stripes plus clipped Gaussian noise, ``[bands, size, size]`` float32.

    Returns the image; stripe ``s`` covers columns ``bounds[s]:bounds[s+1]`` of
    :func:`stripe_bounds`.
    """
    rng = RngStream(seed)
    img = np.zeros((bands, size, size))
    b = stripe_bounds(size, len(levels))
    for s, v in enumerate(levels):
        img[:, :, b[s]:b[s + 1]] = v
    return np.clip(img + rng.normal(img.shape, noise), 0.0, 1.0).astype(np.float32)


def stripe_bounds(size: int, n: int) -> list[int]:
    return [s * size // n for s in range(n)] + [size]
