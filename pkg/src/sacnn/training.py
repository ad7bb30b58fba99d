"""Losses, SGD with momentum, patch augmentation and the two-phase training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data_io import AnnotatedImage, Dataset
from .density import DEFAULT_SIGMA, DensityMap, downsample_sum, render_density
from .errors import ConfigError, DataError, ShapeError, TrainingDiverged
from .model import OUTPUT_STRIDE, ModelConfig, ModelGraph, Prediction, build_model, center_crop_box
from .tensor import make_rng, tensor_sum

log = logging.getLogger(__name__)

COUNT_LOSSES = ("none", "relative", "absolute")


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-6
    lr_end: float = 1e-8
    lr_milestones: tuple[int, ...] = (100, 200)
    momentum: float = 0.9
    batch: int = 1
    epochs: int = 250
    density_weight: float = 1.0
    count_weight: float = 0.1
    count_loss: str = "relative"
    # phase 1 ends when the mean density loss over the last `convergence_window`
    # epochs improves on the window before it by less than `convergence_threshold`
    # (relative), or after `phase1_max_epochs` epochs; a None threshold leaves only the cap
    convergence_window: int = 5
    convergence_threshold: float | None = 0.01
    phase1_max_epochs: int | None = None
    augment: bool = True
    patches_per_image: int = 9
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.density_weight < 0 or self.count_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.count_loss not in COUNT_LOSSES:
            raise ConfigError(f"count_loss must be one of {COUNT_LOSSES}, got {self.count_loss!r}")
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ConfigError("learning rates must be non-negative")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError(f"lr_milestones must be sorted, got {self.lr_milestones}")
        if self.epochs < 0 or self.convergence_window < 1:
            raise ConfigError("epochs must be >= 0 and convergence_window >= 1")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


# -- losses -----------------------------------------------------------------


def density_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Squared L2 distance summed over pixels, averaged over the batch axis."""
    p = pred.grid if isinstance(pred, DensityMap) else np.asarray(pred, dtype=np.float64)
    g = gt.grid if isinstance(gt, DensityMap) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    n = p.shape[0]
    diff = p - g
    return tensor_sum(diff * diff) / n, 2.0 * diff / n


def _counts(pred_count, gt_count) -> tuple[np.ndarray, np.ndarray, bool]:
    f = np.atleast_1d(np.asarray(pred_count, dtype=np.float64))
    y = np.atleast_1d(np.asarray(gt_count, dtype=np.float64))
    if f.shape != y.shape:
        raise ShapeError(f"{f.shape[0]} predicted counts vs {y.shape[0]} ground-truth counts")
    return f, y, np.ndim(pred_count) == 0


def relative_count_loss(pred_count, gt_count):
    """Mean of ((F - Y) / (Y + 1))^2 and its derivative with respect to each F."""
    f, y, scalar = _counts(pred_count, gt_count)
    if np.any(y < 0):
        raise DataError(f"ground-truth counts must be non-negative, got {y.min()}")
    n = f.size
    r = (f - y) / (y + 1)
    loss = float(np.mean(r * r))
    grad = 2 * (f - y) / (y + 1) ** 2 / n
    return loss, float(grad[0]) if scalar else grad


def absolute_count_loss(pred_count, gt_count):
    f, y, scalar = _counts(pred_count, gt_count)
    d = f - y
    grad = 2 * d / f.size
    return float(np.mean(d * d)), float(grad[0]) if scalar else grad


@dataclass
class LossTerms:
    total: float
    density: float
    count: float
    grad_density: np.ndarray
    grad_count: float


def joint_loss(pred: Prediction, gt: DensityMap, cfg: TrainConfig, phase: int = 2) -> LossTerms:
    """density_weight * L_D + count_weight * L_Y; phase 1 drops the count term.

    The count term is still evaluated in phase 1 (for logging) but does not
    contribute to the total or the gradients.
    """
    ld, gd = density_loss(pred.density, gt)
    gt_count = tensor_sum(gt.grid)
    kind = "relative" if cfg.count_loss == "none" else cfg.count_loss
    fn = relative_count_loss if kind == "relative" else absolute_count_loss
    ly, gy = fn(pred.count, gt_count)
    wy = cfg.count_weight if (phase == 2 and cfg.count_loss != "none") else 0.0
    wd = cfg.density_weight
    return LossTerms(wd * ld + wy * ly, ld, ly, wd * gd, wy * gy)


# -- optimizer --------------------------------------------------------------


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """Heavy-ball momentum in place: v <- momentum * v - lr * g; p <- p + v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        if momentum:
            v *= momentum
            v -= lr * g
        else:
            v[...] = -lr * g
        p += v


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return max(cfg.lr_start / 10**passed, cfg.lr_end) if passed else cfg.lr_start


# -- augmentation -----------------------------------------------------------


def crop_record(record: AnnotatedImage, top: int, left: int, h: int, w: int, new_id: str | None = None) -> AnnotatedImage:
    """Crop image and annotations; heads whose centers fall outside are dropped."""
    image = np.ascontiguousarray(record.image[:, :, top : top + h, left : left + w])
    heads = [
        (p.x - left, p.y - top)
        for p in record.heads
        if 0 <= p.x - left < w and 0 <= p.y - top < h
    ]
    return AnnotatedImage(new_id or record.id, image, heads)


def crop_patches(record: AnnotatedImage, rng: np.random.Generator, n: int = 9, multiple: int = 16) -> list[AnnotatedImage]:
    """``n`` quarter-area patches at uniform random offsets, trimmed to multiples of ``multiple``."""
    H, W = record.shape
    if H < 2 * multiple or W < 2 * multiple:
        raise DataError(f"{record.id}: {W}x{H} image is too small for {multiple}-aligned quarter patches")
    qh, qw = H // 2, W // 2
    ph, pw = qh - qh % multiple, qw - qw % multiple
    patches = []
    for k in range(n):
        top = int(rng.integers(0, H - qh + 1))
        left = int(rng.integers(0, W - qw + 1))
        patches.append(crop_record(record, top, left, ph, pw, f"{record.id}#p{k}"))
    return patches


# -- training loop ----------------------------------------------------------


@dataclass
class Sample:
    id: str
    image: np.ndarray
    gt: DensityMap  # at output resolution


def make_sample(record: AnnotatedImage, multiple: int, sigma: float) -> Sample:
    H, W = record.shape
    top, left, h, w = center_crop_box(H, W, multiple)
    if (h, w) != (H, W):
        record = crop_record(record, top, left, h, w)
    gt = downsample_sum(render_density(record.heads, h, w, sigma), OUTPUT_STRIDE)
    return Sample(record.id, record.image, gt)


@dataclass
class HistoryRow:
    epoch: int
    iteration: int
    phase: int
    density_loss: float
    count_loss: float
    joint: float
    lr: float


@dataclass
class TrainResult:
    model: ModelGraph
    history: list[HistoryRow] = field(default_factory=list)
    switch_epoch: int | None = None  # first epoch of phase 2, if reached
    phase1_params: dict[str, np.ndarray] | None = None


def _converged(epoch_losses: Sequence[float], window: int, threshold: float | None) -> bool:
    if threshold is None or len(epoch_losses) < 2 * window:
        return False
    current = float(np.mean(epoch_losses[-window:]))
    previous = float(np.mean(epoch_losses[-2 * window : -window]))
    if previous <= 0:
        return True
    return (previous - current) / previous < threshold


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    model: ModelGraph | None = None,
    on_epoch_end: Callable[[int, ModelGraph], None] | None = None,
) -> TrainResult:
    """Two-phase training: density loss until convergence, then the joint loss.

    Everything random (initialization, patch offsets, sample order) is drawn
    from generators seeded by ``train_cfg.seed``, so a run is reproducible
    bit for bit.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    cfg = train_cfg
    init_rng, aug_rng, order_rng = (make_rng(int(s)) for s in np.random.SeedSequence(cfg.seed).generate_state(3))
    if model is None:
        model = build_model(model_cfg, init_rng)
    m = model.config.input_multiple
    records = list(dataset)
    if cfg.augment:
        records = [p for rec in records for p in crop_patches(rec, aug_rng, cfg.patches_per_image, 16)]
    samples = [make_sample(rec, m, cfg.sigma) for rec in records]

    result = TrainResult(model)
    velocity: dict[str, np.ndarray] = {}
    phase, iteration = 1, 0
    epoch_density: list[float] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        losses = []
        for idx in order_rng.permutation(len(samples)):
            s = samples[idx]
            pred = model.forward(s.image)
            terms = joint_loss(pred, s.gt, cfg, phase)
            if not math.isfinite(terms.total):
                raise TrainingDiverged(iteration, f"loss is {terms.total} on sample {s.id} (epoch {epoch}, phase {phase})")
            grads = model.backward(terms.grad_density, terms.grad_count)
            sgd_step(model.params, grads, velocity, lr, cfg.momentum)
            result.history.append(HistoryRow(epoch, iteration, phase, terms.density, terms.count, terms.total, lr))
            losses.append(terms.density)
            iteration += 1
        epoch_density.append(float(np.mean(losses)))
        log.info("epoch %d phase %d L_D %.6g lr %g", epoch, phase, epoch_density[-1], lr)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
        if phase == 1:
            capped = cfg.phase1_max_epochs is not None and epoch + 1 >= cfg.phase1_max_epochs
            if capped or _converged(epoch_density, cfg.convergence_window, cfg.convergence_threshold):
                phase = 2
                result.switch_epoch = epoch + 1
                result.phase1_params = {k: v.copy() for k, v in model.params.items()}
                log.info("switching to joint loss after epoch %d", epoch)
    return result


def write_loss_csv(path: str | Path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "iteration", "phase", "L_D", "L_Y", "joint", "lr"])
        for r in history:
            w.writerow([r.epoch, r.iteration, r.phase, repr(r.density_loss), repr(r.count_loss), repr(r.joint), repr(r.lr)])
