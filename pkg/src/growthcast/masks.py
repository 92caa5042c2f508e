"""Binary-mask cleanup: component labeling, small-blob removal, close/open."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Component:
    id: int
    area: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 8):
    """Label foreground components; returns ``(labeled, components)``.

    Background is 0 and ids run densely from 1 in raster order of each
    component's first pixel.
    """
    labeled, n = ndimage.label(np.asarray(mask) != 0, structure=_structure(connectivity))
    areas = np.bincount(labeled.ravel(), minlength=n + 1)
    comps = []
    for i, sl in enumerate(ndimage.find_objects(labeled), start=1):
        comps.append(Component(i, int(areas[i]), (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)))
    return labeled, comps


def remove_small_components(mask: np.ndarray, min_area: int = 64, connectivity: int = 8) -> np.ndarray:
    """Zero every component with fewer than ``min_area`` pixels."""
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    labeled, comps = connected_components(mask, connectivity)
    keep = np.zeros(len(comps) + 1, dtype=bool)
    for c in comps:
        keep[c.id] = c.area >= min_area
    return keep[labeled].astype(np.uint8)


def morph_close_open(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Closing then opening with a ``(2r+1)`` square element.

    Outside the image counts as background for dilation and foreground for
    erosion, so closing never removes pixels and opening never adds them.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    m = np.asarray(mask) != 0
    if radius == 0:
        return m.astype(np.uint8)
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)

    def dilate(a):
        return ndimage.binary_dilation(a, structure=se, border_value=0)

    def erode(a):
        return ndimage.binary_erosion(a, structure=se, border_value=1)

    closed = erode(dilate(m))
    opened = dilate(erode(closed))
    return opened.astype(np.uint8)


def clean_mask(mask: np.ndarray, min_area: int = 64, radius: int = 1, connectivity: int = 8) -> np.ndarray:
    """Default cleanup chain: close/open, then drop small components."""
    return remove_small_components(morph_close_open(mask, radius), min_area, connectivity)
