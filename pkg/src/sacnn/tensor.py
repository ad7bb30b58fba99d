"""Dense 4-D float64 arrays (batch, channels, height, width) and their helpers.

Tensors are plain C-contiguous ``numpy.ndarray`` objects; the functions here
validate shapes and pin down the two things numpy leaves open: the random
generator and the summation order.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the only RNG used anywhere in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def check_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"tensor shape must have 4 extents, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape  # type: ignore[return-value]


def check_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(t, np.ndarray) or t.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got {getattr(t, 'shape', type(t))}")
    check_shape(t.shape)
    return t


def tensor_fill(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=DTYPE)


def tensor_randn(shape: Sequence[int], rng: np.random.Generator, stddev: float) -> np.ndarray:
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    return rng.standard_normal(check_shape(shape)) * stddev


def tensor_sum(t: np.ndarray) -> float:
    """Sum every element by a single left-to-right scan in row-major order.

    ``np.sum`` uses pairwise blocks whose layout depends on the array; a
    cumulative sum is a strict linear scan, so the result only depends on the
    values and their order.
    """
    flat = np.ascontiguousarray(t, dtype=DTYPE).reshape(-1)
    if flat.size == 0:
        return 0.0
    return float(np.cumsum(flat)[-1])


def offset(shape: Sequence[int], n: int, c: int, h: int, w: int) -> int:
    """Row-major buffer offset of element (n, c, h, w)."""
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def index(shape: Sequence[int], off: int) -> tuple[int, int, int, int]:
    _, C, H, W = shape
    off, w = divmod(off, W)
    off, h = divmod(off, H)
    n, c = divmod(off, C)
    return n, c, h, w
