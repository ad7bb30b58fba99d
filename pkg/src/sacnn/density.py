"""Ground-truth density maps: one normalized Gaussian per annotated head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .tensor import tensor_sum

DEFAULT_SIGMA = 4.0


@dataclass(frozen=True)
class HeadPoint:
    x: float
    y: float


@dataclass
class GaussianKernel:
    sigma: float
    radius: int
    window: np.ndarray  # (2r+1, 2r+1), sums to 1


@dataclass
class DensityMap:
    grid: np.ndarray  # (1, 1, H, W)
    head_count: float

    @property
    def integral(self) -> float:
        return tensor_sum(self.grid)


def default_radius(sigma: float) -> int:
    return int(math.ceil(3 * sigma))


def make_kernel(sigma: float, radius: int | None = None) -> GaussianKernel:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = default_radius(sigma)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * sigma**2))
    return GaussianKernel(sigma, radius, w / w.sum())


def as_points(points: Iterable) -> list[HeadPoint]:
    return [p if isinstance(p, HeadPoint) else HeadPoint(float(p[0]), float(p[1])) for p in points]


def pixel_of(p: HeadPoint, H: int, W: int) -> tuple[int, int]:
    """(row, col) of the pixel nearest to a head; halves round up."""
    return min(int(math.floor(p.y + 0.5)), H - 1), min(int(math.floor(p.x + 0.5)), W - 1)


def render_density(points: Sequence, H: int, W: int, sigma: float = DEFAULT_SIGMA, radius: int | None = None) -> DensityMap:
    """Stamp a Gaussian at every head, renormalizing kernels clipped by the border.

    Each head contributes exactly one unit of mass, so the map integrates to
    the number of heads. Heads are stamped in sorted pixel order, which makes
    the result independent of the order of ``points``.
    """
    kernel = make_kernel(sigma, radius)
    r = kernel.radius
    pts = as_points(points)
    for i, p in enumerate(pts):
        if not (0 <= p.x < W and 0 <= p.y < H):
            raise DataError(f"head #{i} at ({p.x}, {p.y}) is outside the {W}x{H} image")
    grid = np.zeros((H, W))
    for row, col in sorted(pixel_of(p, H, W) for p in pts):
        top, bottom = max(row - r, 0), min(row + r + 1, H)
        left, right = max(col - r, 0), min(col + r + 1, W)
        patch = kernel.window[top - row + r : bottom - row + r, left - col + r : right - col + r]
        grid[top:bottom, left:right] += patch / patch.sum()
    return DensityMap(grid.reshape(1, 1, H, W), float(len(pts)))


def downsample_sum(dmap: DensityMap, factor: int = 8) -> DensityMap:
    """Block-sum reduction: every output cell holds the mass of a factor x factor block."""
    n, c, H, W = dmap.grid.shape
    if factor < 1 or H % factor or W % factor:
        raise ShapeError(f"{H}x{W} map is not divisible by factor {factor}")
    blocks = dmap.grid.reshape(n, c, H // factor, factor, W // factor, factor)
    return DensityMap(blocks.sum(axis=(3, 5)), dmap.head_count)


def write_pgm16(path: str | Path, grid: np.ndarray) -> float:
    """Write a density grid as a 16-bit PGM scaled so that max -> 65535.

    Returns the scale (map value = pixel / scale), which is also recorded in
    the header comment.
    """
    g = np.asarray(grid, dtype=np.float64).reshape(grid.shape[-2], grid.shape[-1])
    peak = float(g.max()) if g.size else 0.0
    scale = 65535.0 / peak if peak > 0 else 1.0
    pixels = np.clip(np.rint(g * scale), 0, 65535).astype(">u2")
    header = f"P5\n# scale {scale!r} (value = pixel / scale)\n{g.shape[1]} {g.shape[0]}\n65535\n"
    Path(path).write_bytes(header.encode("ascii") + pixels.tobytes())
    return scale
