"""Forward and backward passes for the layer kinds the network uses.

All layers work on float64 tensors of shape (n, c, h, w). Convolutions are
cross-correlations with "same" padding at stride 1; the deconvolution is a
non-overlapping 2x2 / stride-2 transposed convolution without bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import check_tensor


@dataclass
class ConvLayer:
    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 != 1:
            raise ShapeError(f"conv kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias must have shape ({self.weight.shape[0]},), got {self.bias.shape}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


@dataclass
class MaxPoolLayer:
    """2x2 max pooling. Stride 1 pads one row/column of -inf at the bottom/right."""

    stride: int = 2

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"maxpool stride must be 1 or 2, got {self.stride}")


@dataclass
class DeconvLayer:
    weight: np.ndarray  # (c_in, c_out, 2, 2)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (2, 2):
            raise ShapeError(f"deconv weight must be (c_in, c_out, 2, 2), got {self.weight.shape}")


@dataclass
class LayerGrads:
    grad_input: np.ndarray
    grad_weights: np.ndarray | None = None
    grad_bias: np.ndarray | None = None


@dataclass
class PoolContext:
    """Saved state of one maxpool forward call; required by its backward."""

    input_shape: tuple[int, int, int, int]
    stride: int
    argmax: np.ndarray  # flat offset into the input for every output element


# -- convolution ------------------------------------------------------------


def _windows(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    check_tensor(x, "conv input")
    if x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(f"conv expects {layer.weight.shape[1]} input channels, got {x.shape[1]}")
    win = _windows(x, layer.kernel, layer.padding)
    out = np.tensordot(win, layer.weight, axes=([1, 4, 5], [1, 2, 3]))  # (n, h, w, o)
    out += layer.bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_backward(x: np.ndarray, layer: ConvLayer, grad_output: np.ndarray) -> LayerGrads:
    expected = (x.shape[0], layer.weight.shape[0], x.shape[2], x.shape[3])
    if grad_output.shape != expected:
        raise ShapeError(f"conv grad_output must be {expected}, got {grad_output.shape}")
    k, p = layer.kernel, layer.padding
    win = _windows(x, k, p)
    grad_w = np.tensordot(grad_output, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_output.sum(axis=(0, 2, 3))
    # full correlation of grad_output with the flipped kernel
    gwin = _windows(grad_output, k, p)
    flipped = layer.weight[:, :, ::-1, ::-1]
    grad_x = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))
    return LayerGrads(np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), grad_w, grad_b)


# -- max pooling ------------------------------------------------------------


def maxpool_forward(x: np.ndarray, layer: MaxPoolLayer) -> tuple[np.ndarray, PoolContext]:
    check_tensor(x, "maxpool input")
    n, c, h, w = x.shape
    s = layer.stride
    if s == 2:
        if h % 2 or w % 2:
            raise ShapeError(f"stride-2 maxpool needs even spatial dims, got {h}x{w}")
        oh, ow = h // 2, w // 2
        win = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    else:
        oh, ow = h, w
        padded = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), constant_values=-np.inf)
        win = sliding_window_view(padded, (2, 2), axis=(2, 3))
    win = win.reshape(n, c, oh, ow, 4)
    # np.argmax returns the first maximum: row-major tie breaking
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * s + local // 2
    cols = np.arange(ow)[None, :] * s + local % 2
    plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
    argmax = plane[:, :, None, None] + rows * w + cols
    return np.ascontiguousarray(out), PoolContext((n, c, h, w), s, argmax)


def maxpool_backward(ctx: PoolContext, grad_output: np.ndarray) -> np.ndarray:
    if grad_output.shape != ctx.argmax.shape:
        raise ShapeError(f"maxpool grad_output must be {ctx.argmax.shape}, got {grad_output.shape}")
    size = int(np.prod(ctx.input_shape))
    grad = np.bincount(ctx.argmax.reshape(-1), weights=grad_output.reshape(-1), minlength=size)
    return grad.reshape(ctx.input_shape)


# -- deconvolution ----------------------------------------------------------


def deconv_forward(x: np.ndarray, layer: DeconvLayer) -> np.ndarray:
    check_tensor(x, "deconv input")
    if x.shape[1] != layer.weight.shape[0]:
        raise ShapeError(f"deconv expects {layer.weight.shape[0]} input channels, got {x.shape[1]}")
    n, _, h, w = x.shape
    c_out = layer.weight.shape[1]
    out = np.einsum("ncij,coab->noiajb", x, layer.weight)
    return out.reshape(n, c_out, 2 * h, 2 * w)


def deconv_backward(x: np.ndarray, layer: DeconvLayer, grad_output: np.ndarray) -> LayerGrads:
    n, _, h, w = x.shape
    c_out = layer.weight.shape[1]
    if grad_output.shape != (n, c_out, 2 * h, 2 * w):
        raise ShapeError(f"deconv grad_output must be {(n, c_out, 2 * h, 2 * w)}, got {grad_output.shape}")
    g = grad_output.reshape(n, c_out, h, 2, w, 2)
    grad_x = np.einsum("noiajb,coab->ncij", g, layer.weight)
    grad_w = np.einsum("ncij,noiajb->coab", x, g)
    return LayerGrads(grad_x, grad_w)


# -- pointwise and structural ----------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_output, 0.0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: n, h, w must match")
    return np.concatenate([a, b], axis=1)


def split_channels(t: np.ndarray, c_a: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < c_a < t.shape[1]:
        raise ShapeError(f"split point {c_a} outside (0, {t.shape[1]})")
    return np.ascontiguousarray(t[:, :c_a]), np.ascontiguousarray(t[:, c_a:])


# -- gradient checking ------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst elementwise |a - n| / max(|a| + |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric)
    return float(np.max(diff / np.maximum(np.abs(analytic) + np.abs(numeric), floor)))


def check_gradients(
    forward: Callable[[], np.ndarray],
    analytic: Sequence[np.ndarray],
    arrays: Sequence[np.ndarray],
    probe: np.ndarray,
    eps: float = 1e-5,
    indices: Sequence[np.ndarray | None] | None = None,
) -> float:
    """Compare analytic gradients of ``<probe, forward()>`` to central differences.

    ``arrays`` are perturbed in place (and restored); ``forward`` must read
    them. ``indices`` optionally restricts each array to a subset of flat
    positions.
    """
    worst = 0.0
    for k, (arr, grad) in enumerate(zip(arrays, analytic)):
        flat = arr.reshape(-1)
        assert np.shares_memory(flat, arr), "arrays must be contiguous to perturb in place"
        positions = range(flat.size) if indices is None or indices[k] is None else indices[k]
        positions = list(positions)
        numeric = np.empty(len(positions))
        for j, pos in enumerate(positions):
            old = flat[pos]
            flat[pos] = old + eps
            plus = float(np.sum(probe * forward()))
            flat[pos] = old - eps
            minus = float(np.sum(probe * forward()))
            flat[pos] = old
            numeric[j] = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(grad.reshape(-1)[positions], numeric))
    return worst


def grad_check(layer, x: np.ndarray, eps: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between a layer's backward pass and central differences.

    ``layer`` is a ConvLayer, DeconvLayer, MaxPoolLayer or the string "relu".
    Every input element and every parameter is checked.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, dtype=np.float64, copy=True)
    if isinstance(layer, ConvLayer):
        out = conv_forward(x, layer)
        probe = rng.standard_normal(out.shape)
        g = conv_backward(x, layer, probe)
        return check_gradients(
            lambda: conv_forward(x, layer),
            [g.grad_input, g.grad_weights, g.grad_bias],
            [x, layer.weight, layer.bias],
            probe,
            eps,
        )
    if isinstance(layer, DeconvLayer):
        out = deconv_forward(x, layer)
        probe = rng.standard_normal(out.shape)
        g = deconv_backward(x, layer, probe)
        return check_gradients(
            lambda: deconv_forward(x, layer), [g.grad_input, g.grad_weights], [x, layer.weight], probe, eps
        )
    if isinstance(layer, MaxPoolLayer):
        out, ctx = maxpool_forward(x, layer)
        probe = rng.standard_normal(out.shape)
        return check_gradients(
            lambda: maxpool_forward(x, layer)[0], [maxpool_backward(ctx, probe)], [x], probe, eps
        )
    if layer == "relu":
        probe = rng.standard_normal(x.shape)
        return check_gradients(lambda: relu_forward(x), [relu_backward(x, probe)], [x], probe, eps)
    raise TypeError(f"no gradient check for {layer!r}")
