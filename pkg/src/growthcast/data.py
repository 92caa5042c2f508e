"""Raster I/O, tiling/stitching and train/validation dataset assembly.

Rasters hold pixels as ``[bands, H, W]`` reals in [0, 1].  Two on-disk formats
are supported: 8-bit PNG (gray or RGB) and the raw ``URTN1`` tensor format::

    b"URTN1" | u32 rank | u32 dims[rank] | float32 data (row-major, little-endian)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

RAW_MAGIC = b"URTN1"


class DataError(ValueError):
    """Unreadable, malformed or inconsistent input data."""


@dataclass
class Raster:
    pixels: np.ndarray  # [bands, H, W] in [0, 1]
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3:
            raise DataError(f"raster pixels must be [bands, H, W], got {px.shape}")
        self.pixels = px

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


# ----------------------------------------------------------------------------
# raw tensor format


def write_raw(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:5] != RAW_MAGIC:
        raise DataError(f"{path}: not a URTN1 tensor file")
    try:
        (rank,) = struct.unpack_from("<I", buf, 5)
        dims = struct.unpack_from(f"<{rank}I", buf, 9)
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    offset = 9 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != 4 * count:
        raise DataError(f"{path}: expected {count} floats, found {(len(buf) - offset) // 4}")
    return np.frombuffer(buf, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


# ----------------------------------------------------------------------------
# rasters


def load_raster(path) -> Raster:
    """Load a PNG (8-bit gray/RGB, scaled by 1/255) or a URTN1 file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head == RAW_MAGIC:
        arr = read_raw(path)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or not np.all((arr >= 0) & (arr <= 1)):
            raise DataError(f"{path}: raw raster must be [bands, H, W] in [0, 1]")
        return Raster(arr, bit_depth=32)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode not in ("L", "RGB", "1"):
        raise DataError(f"{path}: unsupported image mode {img.mode!r} (need 8-bit gray or RGB)")
    arr = np.asarray(img.convert("L") if img.mode == "1" else img, dtype=np.float32) / 255.0
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return Raster(np.ascontiguousarray(arr), bit_depth=8)


def save_raster(raster: Raster, path) -> None:
    """Write a raster; ``.png`` quantizes to 8 bits, anything else is URTN1.

    Values outside [0, 1] are rejected, not clipped.
    """
    px = raster.pixels
    if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
        raise DataError(f"{path}: raster values outside [0, 1] "
                        f"(min {np.nanmin(px):.4g}, max {np.nanmax(px):.4g})")
    path = Path(path)
    if path.suffix.lower() == ".png":
        q = np.rint(px * 255.0).astype(np.uint8)
        if raster.bands == 1:
            Image.fromarray(q[0]).save(path)
        elif raster.bands == 3:
            Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0))).save(path)
        else:
            raise DataError(f"{path}: PNG needs 1 or 3 bands, raster has {raster.bands}")
    else:
        write_raw(path, px)


def load_mask(path) -> np.ndarray:
    """Load a binary mask (PNG 0/255 or URTN1) as a uint8 ``{0, 1}`` array."""
    r = load_raster(path)
    return (r.pixels[0] >= 0.5).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    save_raster(Raster(np.asarray(mask, dtype=np.float32)[None]), path)


# ----------------------------------------------------------------------------
# tiling


@dataclass
class TileSet:
    tiles: list  # row-major list of [bands, ts, ts] arrays; None marks a missing tile
    tile_size: int
    rows: int
    cols: int
    height: int
    width: int

    @property
    def pad(self) -> tuple[int, int]:
        """(bottom, right) zero padding added before cutting."""
        return self.rows * self.tile_size - self.height, self.cols * self.tile_size - self.width

    def __len__(self):
        return len(self.tiles)

    def array(self) -> np.ndarray:
        """Tiles stacked as ``[n, bands, ts, ts]``."""
        if any(t is None for t in self.tiles):
            raise DataError("tile set has missing tiles")
        return np.stack(self.tiles)

    def same_grid(self, other: "TileSet") -> bool:
        return (self.tile_size, self.rows, self.cols, self.height, self.width) == (
            other.tile_size, other.rows, other.cols, other.height, other.width)

    def replace(self, tiles) -> "TileSet":
        tiles = list(tiles)
        if len(tiles) != self.rows * self.cols:
            raise DataError(f"expected {self.rows * self.cols} tiles, got {len(tiles)}")
        return TileSet(tiles, self.tile_size, self.rows, self.cols, self.height, self.width)


def tile(raster: Raster | np.ndarray, tile_size: int = 256) -> TileSet:
    """Cut into non-overlapping row-major tiles, zero-padding right/bottom."""
    if tile_size < 8:
        raise ValueError(f"tile_size must be >= 8, got {tile_size}")
    px = raster.pixels if isinstance(raster, Raster) else np.asarray(raster)
    if px.ndim == 2:
        px = px[None]
    _, h, w = px.shape
    rows, cols = -(-h // tile_size), -(-w // tile_size)
    padded = np.pad(px, ((0, 0), (0, rows * tile_size - h), (0, cols * tile_size - w)))
    tiles = [padded[:, r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size].copy()
             for r in range(rows) for c in range(cols)]
    return TileSet(tiles, tile_size, rows, cols, h, w)


def stitch(ts: TileSet) -> Raster:
    """Reassemble a tile grid and crop the padding."""
    if len(ts.tiles) != ts.rows * ts.cols:
        raise DataError(f"grid needs {ts.rows * ts.cols} tiles, got {len(ts.tiles)}")
    missing = [j for j, t in enumerate(ts.tiles) if t is None]
    if missing:
        raise DataError(f"missing tile index {missing[0]}")
    s = ts.tile_size
    first = np.asarray(ts.tiles[0])
    bands = first.shape[0] if first.ndim == 3 else 1
    out = np.zeros((bands, ts.rows * s, ts.cols * s), dtype=first.dtype)
    for j, t in enumerate(ts.tiles):
        r, c = divmod(j, ts.cols)
        out[:, r * s:(r + 1) * s, c * s:(c + 1) * s] = t
    return Raster(out[:, :ts.height, :ts.width])


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    X: np.ndarray  # [n, bands, ts, ts]
    Y: np.ndarray
    role: str = "train"
    k: int = 1
    m: int = 2
    grid: TileSet | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.X) != len(self.Y):
            raise DataError(f"|X| = {len(self.X)} but |Y| = {len(self.Y)}")

    def __len__(self):
        return len(self.X)


def make_dataset(tilesets: Sequence[TileSet], k: int, m: int, role: str = "train") -> Dataset:
    """Pair tile j of date k (input) with tile j of date m (target); dates are 1-based."""
    n_dates = len(tilesets)
    if not (1 <= k <= n_dates and 1 <= m <= n_dates):
        raise DataError(f"dates k={k}, m={m} out of range for {n_dates} dates")
    src, dst = tilesets[k - 1], tilesets[m - 1]
    if not src.same_grid(dst):
        raise DataError(f"grid mismatch between date {k} and date {m}")
    return Dataset(src.array(), dst.array(), role=role, k=k, m=m, grid=src)


def persistence_baseline(tiles):
    """Predict that nothing changes."""
    return np.array(tiles, copy=True)


def write_manifest(path, entries) -> None:
    """``entries``: iterable of ``(role, x_path, y_path)``; written tab-separated."""
    with open(path, "w") as fh:
        for role, x, y in entries:
            fh.write(f"{role}\t{x}\t{y}\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 'role<TAB>x<TAB>y'")
        out.append((parts[0], parts[1], parts[2]))
    return out
