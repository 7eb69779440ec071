"""Rasterization primitives shared by the dataset code and the mock backend.

Everything uses one inclusion rule: a pixel belongs to a region iff its
center (col + 0.5, row + 0.5) lies strictly inside the continuous region.
For boxes with integer corners this fills exactly mask[y0:y1, x0:x1].
"""

from __future__ import annotations

import numpy as np
from matplotlib.path import Path


def rasterize_box(box: tuple[float, float, float, float], size: int) -> np.ndarray:
    """Binary (size, size) mask of an absolute-pixel box."""
    x0, y0, x1, y1 = box
    centers = np.arange(size) + 0.5
    cols = (centers > x0) & (centers < x1)
    rows = (centers > y0) & (centers < y1)
    return (rows[:, None] & cols[None, :]).astype(np.uint8)


def rasterize_polygon(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    """Binary mask of one polygon given as an (n, 2) array of (x, y) vertices."""
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 3:
        raise ValueError(f"polygon needs an (n>=3, 2) vertex array, got {coords.shape}")
    ys, xs = np.mgrid[0:height, 0:width]
    centers = np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])
    inside = Path(coords).contains_points(centers)
    return inside.reshape(height, width).astype(np.uint8)


def decode_rle(rle: dict) -> np.ndarray:
    """Decode COCO RLE (uncompressed count list or compressed string).

    Counts run column-major and start with the number of zeros.
    """
    height, width = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (bytes, str)):
        counts = _uncompress_rle_string(counts)
    total = int(sum(counts))
    if total != height * width:
        raise ValueError(f"RLE counts sum to {total}, expected {height * width}")
    values = np.zeros(len(counts), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, counts)
    return flat.reshape((width, height)).T.copy()


def _uncompress_rle_string(data: bytes | str) -> list[int]:
    # LEB128-style variable-length encoding with delta coding from the
    # second-previous count, as used by the COCO mask API.
    if isinstance(data, str):
        data = data.encode()
    counts: list[int] = []
    pos = 0
    while pos < len(data):
        value = 0
        shift = 0
        more = True
        while more:
            char = data[pos] - 48
            value |= (char & 0x1F) << shift
            more = bool(char & 0x20)
            pos += 1
            if not more and (char & 0x10):
                value |= -1 << (shift + 5)
            shift += 5
        if len(counts) > 2:
            value += counts[-2]
        counts.append(value)
    return counts
