"""Kernel density grids over 2-D samples, written as CSV or greyscale PNG."""
from __future__ import annotations

import csv
import struct
import zlib
from pathlib import Path
from typing import NamedTuple

import numpy as np

from cifvi import kernels

BANDWIDTH_FLOOR = 1e-3


class Grid(NamedTuple):
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    steps: int


def scott_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-axis n^(-1/(d+4)) * std, floored for degenerate axes."""
    n, d = samples.shape
    h = n ** (-1.0 / (d + 4)) * samples.std(axis=0, ddof=1)
    return np.maximum(h, BANDWIDTH_FLOOR)


def kde_density_grid(samples, grid: Grid, bandwidth=None):
    """Return ``(xs, ys, density)`` with ``density[i, j]`` at ``(xs[i], ys[j])``."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ValueError("expected an (n, 2) array of samples")
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    grid = Grid(*grid)
    xs = np.linspace(grid.xmin, grid.xmax, grid.steps)
    ys = np.linspace(grid.ymin, grid.ymax, grid.steps)
    hx, hy = scott_bandwidth(samples) if bandwidth is None else np.broadcast_to(bandwidth, (2,))
    return xs, ys, kernels.kde_grid(samples, xs, ys, float(hx), float(hy))


def write_grid_csv(path, xs, ys, density) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "y", "density"])
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                out.writerow([repr(float(x)), repr(float(y)), repr(float(density[i, j]))])


def to_grey(values: np.ndarray) -> np.ndarray:
    """Linear map min -> 0, max -> 255."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def encode_png(pixels: np.ndarray) -> bytes:
    """8-bit greyscale PNG from a (height, width) uint8 array."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width = pixels.shape
    rows = b"".join(b"\x00" + pixels[r].tobytes() for r in range(height))
    header = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header)
            + _chunk(b"IDAT", zlib.compress(rows, 9)) + _chunk(b"IEND", b""))


def write_grid_png(path, density: np.ndarray) -> None:
    # rows run top to bottom, so put large y first
    Path(path).write_bytes(encode_png(to_grey(density.T[::-1])))
