"""The counting network: single-scale, two-scale and scale-adaptive variants.

A model is a flat list of nodes executed in order. Each node reads one or two
earlier outputs by name, so the skip connections that feed the concatenations
are plain name references. Backward walks the same list in reverse and adds
gradients into every input, which takes care of fan-out.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .density import DensityMap
from .errors import ConfigError, DataError, ShapeError
from .tensor import check_tensor, tensor_sum

VARIANTS = ("single-scale", "two-scale", "scale-adaptive")
PRESETS = {
    "full": (64, 128, 256, 512, 512, 512),
    "tiny": (4, 8, 16, 32, 32, 32),
}
OUTPUT_STRIDE = 8


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "scale-adaptive"
    # conv blocks 1-5 then conv6_1
    widths: tuple[int, ...] = PRESETS["full"]
    init_std: float = 0.01
    # "gaussian": every weight ~ N(0, init_std^2); "he": 3x3 convs use sqrt(2 / fan_in)
    init: str = "gaussian"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.widths) != 6 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"widths must be 6 positive integers, got {self.widths}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if self.init not in ("gaussian", "he"):
            raise ConfigError(f"init must be 'gaussian' or 'he', got {self.init!r}")

    @classmethod
    def preset(cls, variant: str = "scale-adaptive", preset: str = "full", **kw) -> "ModelConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
        return cls(variant, PRESETS[preset], **kw)

    @property
    def input_multiple(self) -> int:
        return 16 if self.variant == "scale-adaptive" else 8

    def digest(self) -> bytes:
        """SHA-256 of the architecture (variant and widths); initialization is excluded."""
        text = json.dumps({"variant": self.variant, "widths": [int(w) for w in self.widths]}, sort_keys=True)
        return hashlib.sha256(text.encode()).digest()


@dataclass
class Node:
    name: str
    kind: str  # conv | pool | concat | deconv
    inputs: tuple[str, ...]
    stride: int = 1
    relu: bool = False


@dataclass
class Prediction:
    density: DensityMap  # (1, 1, H/8, W/8)
    count: float


def _plan(cfg: ModelConfig) -> list[tuple[Node, int, int]]:
    """Execution plan as (node, c_in, c_out) triples."""
    w1, w2, w3, w4, w5, w6 = (int(w) for w in cfg.widths)
    plan: list[tuple[Node, int, int]] = []
    prev, ch = "image", 1

    def conv(name: str, c_out: int, src: str | None = None, c_in: int | None = None):
        nonlocal prev, ch
        plan.append((Node(name, "conv", (src or prev,), relu=True), c_in or ch, c_out))
        prev, ch = name, c_out

    def pool(name: str, stride: int):
        nonlocal prev
        plan.append((Node(name, "pool", (prev,), stride=stride), ch, ch))
        prev = name

    conv("conv1_1", w1)
    conv("conv1_2", w1)
    pool("pool1", 2)
    conv("conv2_1", w2)
    conv("conv2_2", w2)
    pool("pool2", 2)
    for i in (1, 2, 3):
        conv(f"conv3_{i}", w3)
    pool("pool3", 2)
    conv("conv4_1", w4)
    conv("conv4_2", w4)
    if cfg.variant == "single-scale":
        head_src, head_ch = "conv4_2", w4
    else:
        conv("conv4_3", w4)
        pool("pool4", 1 if cfg.variant == "two-scale" else 2)
        for i in (1, 2, 3):
            conv(f"conv5_{i}", w5)
        if cfg.variant == "two-scale":
            plan.append((Node("concat1", "concat", ("conv4_3", "conv5_3")), w4 + w5, w4 + w5))
            head_src, head_ch = "concat1", w4 + w5
        else:
            pool("pool5", 1)
            conv("conv6_1", w6)
            plan.append((Node("concat1", "concat", ("conv5_3", "conv6_1")), w5 + w6, w5 + w6))
            plan.append((Node("deconv", "deconv", ("concat1",)), w5 + w6, w4))
            plan.append((Node("concat2", "concat", ("deconv", "conv4_3")), 2 * w4, 2 * w4))
            head_src, head_ch = "concat2", 2 * w4
    # ReLU on the 1x1 projection keeps the density non-negative
    plan.append((Node("p_conv", "conv", (head_src,), relu=True), head_ch, 1))
    return plan


class ModelGraph:
    """Parameters, execution plan and the activation cache of one network."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], nodes: list[Node]):
        self.config = config
        self.params = params
        self.nodes = nodes
        self._cache: dict | None = None

    def layer(self, node: Node):
        if node.kind == "conv":
            return L.ConvLayer(self.params[f"{node.name}.weight"], self.params[f"{node.name}.bias"])
        if node.kind == "deconv":
            return L.DeconvLayer(self.params[f"{node.name}.weight"])
        if node.kind == "pool":
            return L.MaxPoolLayer(node.stride)
        raise ValueError(f"node {node.name} has no layer object")

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.kind] = counts.get(node.kind, 0) + 1
        return counts

    def forward(self, image: np.ndarray) -> Prediction:
        check_tensor(image, "image")
        n, c, H, W = image.shape
        m = self.config.input_multiple
        if n != 1 or c != 1:
            raise ShapeError(f"model input must be (1, 1, H, W), got {image.shape}")
        if H % m or W % m:
            raise ShapeError(f"{H}x{W} input is not divisible by {m}; crop it with crop_to_multiple(image, {m})")
        acts = {"image": np.asarray(image, dtype=np.float64)}
        saved: dict[str, object] = {}
        for node in self.nodes:
            x = acts[node.inputs[0]]
            if node.kind == "conv":
                z = L.conv_forward(x, self.layer(node))
                saved[node.name] = z
                out = L.relu_forward(z) if node.relu else z
            elif node.kind == "pool":
                out, saved[node.name] = L.maxpool_forward(x, self.layer(node))
            elif node.kind == "concat":
                out = L.concat_channels(x, acts[node.inputs[1]])
            else:
                out = L.deconv_forward(x, self.layer(node))
            acts[node.name] = out
        self._cache = {"acts": acts, "saved": saved}
        density = acts[self.nodes[-1].name]
        return Prediction(DensityMap(density, tensor_sum(density)), tensor_sum(density))

    @property
    def activations(self) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("no forward pass has been run")
        return self._cache["acts"]

    def backward(self, grad_density: np.ndarray | None = None, grad_count: float = 0.0) -> dict[str, np.ndarray]:
        """Gradients of ``<grad_density, density> + grad_count * count`` for every parameter."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, saved = self._cache["acts"], self._cache["saved"]
        out_name = self.nodes[-1].name
        g = np.zeros_like(acts[out_name]) if grad_density is None else np.array(grad_density, dtype=np.float64)
        if g.shape != acts[out_name].shape:
            raise ShapeError(f"grad_density must be {acts[out_name].shape}, got {g.shape}")
        # count is the plain sum of the density grid
        g = g + grad_count
        grads_act: dict[str, np.ndarray] = {out_name: g}
        grads: dict[str, np.ndarray] = {}

        def accumulate(name: str, value: np.ndarray):
            if name in grads_act:
                grads_act[name] = grads_act[name] + value
            else:
                grads_act[name] = value

        for node in reversed(self.nodes):
            g = grads_act.pop(node.name)
            src = node.inputs[0]
            if node.kind == "conv":
                z = saved[node.name]
                if node.relu:
                    g = L.relu_backward(z, g)
                lg = L.conv_backward(acts[src], self.layer(node), g)
                grads[f"{node.name}.weight"] = lg.grad_weights
                grads[f"{node.name}.bias"] = lg.grad_bias
                accumulate(src, lg.grad_input)
            elif node.kind == "pool":
                accumulate(src, L.maxpool_backward(saved[node.name], g))
            elif node.kind == "concat":
                ga, gb = L.split_channels(g, acts[src].shape[1])
                accumulate(src, ga)
                accumulate(node.inputs[1], gb)
            else:
                lg = L.deconv_backward(acts[src], self.layer(node), g)
                grads[f"{node.name}.weight"] = lg.grad_weights
                accumulate(src, lg.grad_input)
        return grads


def build_model(config: ModelConfig, rng: np.random.Generator) -> ModelGraph:
    """Gaussian-initialized weights, zero biases; the deconv starts as a mean-spreading 2x2 kernel.

    The 1x1 projection takes the absolute value of its Gaussian draw.
    """
    params: dict[str, np.ndarray] = {}
    nodes = []
    for node, c_in, c_out in _plan(config):
        nodes.append(node)
        if node.kind == "conv":
            k = 1 if node.name == "p_conv" else 3
            std = np.sqrt(2.0 / (c_in * k * k)) if config.init == "he" and k == 3 else config.init_std
            w = rng.standard_normal((c_out, c_in, k, k)) * std
            if node.name == "p_conv":
                # its inputs are ReLU outputs; non-negative weights keep the output ReLU live at init
                w = np.abs(w)
            params[f"{node.name}.weight"] = w
            params[f"{node.name}.bias"] = np.zeros(c_out)
        elif node.kind == "deconv":
            params[f"{node.name}.weight"] = np.full((c_in, c_out, 2, 2), 0.25 / c_in)
    return ModelGraph(config, params, nodes)


def center_crop_box(H: int, W: int, m: int) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the largest centered crop with dims divisible by m."""
    if H < m or W < m:
        raise DataError(f"{H}x{W} image is smaller than the required multiple {m}")
    h, w = H - H % m, W - W % m
    return (H - h) // 2, (W - w) // 2, h, w


def crop_to_multiple(image: np.ndarray, m: int = 16) -> np.ndarray:
    top, left, h, w = center_crop_box(image.shape[-2], image.shape[-1], m)
    return np.ascontiguousarray(image[..., top : top + h, left : left + w])
