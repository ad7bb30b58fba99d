"""Finite-difference gradient checks for every layer kind and for whole models."""
from __future__ import annotations

import contextlib
from unittest import mock

import numpy as np

from . import layers as L
from .model import ModelConfig, build_model
from .tensor import make_rng

LAYER_KINDS = ("conv3", "conv1", "maxpool(s1)", "maxpool(s2)", "deconv", "relu", "concat")
TOLERANCE = 1e-4


def _scaled(fn, factor):
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if isinstance(out, L.LayerGrads):
            return L.LayerGrads(*(None if g is None else g * factor for g in (out.grad_input, out.grad_weights, out.grad_bias)))
        if isinstance(out, tuple):
            return tuple(o * factor for o in out)
        return out * factor

    return wrapper


@contextlib.contextmanager
def corrupted_backward(kind: str | None, factor: float = 1.01):
    """Negative-control hook: scale one backward pass by ``factor``.

    ``kind`` is a layer kind name ("conv", "maxpool", "deconv", "relu",
    "concat") or None for no corruption.
    """
    targets = {
        "conv": "conv_backward",
        "maxpool": "maxpool_backward",
        "deconv": "deconv_backward",
        "relu": "relu_backward",
        "concat": "split_channels",
    }
    if kind is None:
        yield
        return
    name = targets[kind]
    with mock.patch.object(L, name, _scaled(getattr(L, name), factor)):
        yield


def check_layer_kind(kind: str, rng: np.random.Generator, eps: float = 1e-5) -> float:
    if kind == "conv3":
        layer = L.ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
        return L.grad_check(layer, rng.standard_normal((1, 2, 5, 5)), eps, rng)
    if kind == "conv1":
        layer = L.ConvLayer(rng.standard_normal((3, 2, 1, 1)), rng.standard_normal(3))
        return L.grad_check(layer, rng.standard_normal((1, 2, 5, 5)), eps, rng)
    if kind == "maxpool(s1)":
        # a permutation keeps values distinct and at least 1 apart, far beyond eps
        x = rng.permutation(25).astype(np.float64).reshape(1, 1, 5, 5)
        return L.grad_check(L.MaxPoolLayer(1), x, eps, rng)
    if kind == "maxpool(s2)":
        x = rng.permutation(72).astype(np.float64).reshape(1, 2, 6, 6)
        return L.grad_check(L.MaxPoolLayer(2), x, eps, rng)
    if kind == "deconv":
        layer = L.DeconvLayer(rng.standard_normal((2, 3, 2, 2)))
        return L.grad_check(layer, rng.standard_normal((1, 2, 3, 3)), eps, rng)
    if kind == "relu":
        x = rng.standard_normal((1, 2, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        return L.grad_check("relu", x, eps, rng)
    if kind == "concat":
        a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
        probe = rng.standard_normal((1, 5, 3, 3))
        ga, gb = L.split_channels(probe, 2)
        return L.check_gradients(lambda: L.concat_channels(a, b), [ga, gb], [a, b], probe, eps)
    raise ValueError(f"unknown layer kind {kind!r}")


def check_model(
    variant: str,
    preset: str = "tiny",
    seed: int = 0,
    size: int = 16,
    per_param: int = 20,
    eps: float = 1e-5,
) -> float:
    """Worst relative error of full-model parameter gradients.

    The objective is ``<probe, density> + c * count`` for random ``probe`` and
    ``c``. Weights are He-initialized and biases randomized so ReLU inputs sit
    well away from zero; every bias and ``per_param`` random entries of each
    weight tensor are checked.
    """
    rng = make_rng(seed)
    graph = build_model(ModelConfig.preset(variant, preset, init="he"), rng)
    for name, p in graph.params.items():
        if name.endswith(".bias"):
            p[:] = rng.uniform(-0.1, 0.1, p.shape)
    head = graph.params["p_conv.weight"]
    head[:] = np.abs(rng.standard_normal(head.shape)) * np.sqrt(2.0 / head.shape[1])
    graph.params["p_conv.bias"][:] = 0.1
    image = rng.uniform(size=(1, 1, size, size))
    pred = graph.forward(image)
    if not np.all(pred.density.grid > 0):
        raise RuntimeError(f"{variant}: density output has dead cells; the check would be vacuous")
    probe = rng.standard_normal(pred.density.grid.shape)
    c = float(rng.standard_normal())
    grads = graph.backward(probe, c)
    total = probe + c

    def objective():
        return graph.forward(image).density.grid

    worst = 0.0
    for name, p in graph.params.items():
        idx = None
        if not name.endswith(".bias") and p.size > per_param:
            idx = rng.choice(p.size, size=per_param, replace=False)
        worst = max(worst, L.check_gradients(objective, [grads[name]], [p], total, eps, [idx]))
    return worst


def run_all(variants, preset: str = "tiny", seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    """Layer-wise errors keyed by kind plus ``model:<variant>`` entries."""
    results: dict[str, float] = {}
    with corrupted_backward(corrupt):
        rng = make_rng(seed)
        for kind in LAYER_KINDS:
            results[kind] = check_layer_kind(kind, rng)
        for variant in variants:
            results[f"model:{variant}"] = check_model(variant, preset, seed)
    return results
