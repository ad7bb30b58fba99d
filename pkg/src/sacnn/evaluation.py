"""Count metrics (MAE and root-mean-square error) and dataset evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .data_io import AnnotatedImage, Dataset
from .errors import ConfigError, DataError
from .model import ModelGraph, center_crop_box
from .tensor import make_rng
from .training import crop_record

Predictor = Union[ModelGraph, Callable[[AnnotatedImage], float]]


@dataclass
class EvalRecord:
    id: str
    predicted: float
    actual: int
    abs_error: float
    # pixels removed by the center crop (rows, cols) and heads lost with them
    crop: tuple[int, int] = (0, 0)
    dropped_heads: int = 0


@dataclass
class EvalReport:
    records: list[EvalRecord]
    mae: float
    mse: float
    n: int = field(init=False)

    def __post_init__(self):
        self.n = len(self.records)

    def summary(self) -> dict:
        return {"n": self.n, "mae": self.mae, "mse": self.mse}


def compute_metrics(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """(MAE, MSE) over (predicted, actual) pairs. MSE is the root of the mean squared error."""
    if len(pairs) == 0:
        raise DataError("cannot compute metrics over an empty list")
    err = np.array([float(f) - float(y) for f, y in pairs])
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def predict_count(predictor: Predictor, record: AnnotatedImage) -> float:
    if isinstance(predictor, ModelGraph):
        return predictor.forward(record.image).count
    return float(predictor(record))


def evaluate(predictor: Predictor, dataset: Dataset, multiple: int | None = None) -> EvalReport:
    """Count every image after center-cropping it to an admissible size.

    ``predictor`` is a model or any callable mapping a (cropped) record to a
    count. The ground truth is the number of annotated heads left after the
    crop.
    """
    if multiple is None:
        multiple = predictor.config.input_multiple if isinstance(predictor, ModelGraph) else 16
    records = []
    for rec in dataset:
        H, W = rec.shape
        top, left, h, w = center_crop_box(H, W, multiple)
        cropped = crop_record(rec, top, left, h, w) if (h, w) != (H, W) else rec
        f = predict_count(predictor, cropped)
        y = cropped.count
        records.append(EvalRecord(rec.id, f, y, abs(f - y), (H - h, W - w), rec.count - y))
    mae, mse = compute_metrics([(r.predicted, r.actual) for r in records])
    return EvalReport(records, mae, mse)


def kfold_split(n_items: int | Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition as (train indices, test indices) pairs, both sorted."""
    n = len(n_items) if isinstance(n_items, Dataset) else int(n_items)
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if k > n:
        raise ConfigError(f"cannot split {n} items into {k} folds")
    perm = make_rng(seed).permutation(n)
    folds = [np.sort(f) for f in np.array_split(perm, k)]
    return [(np.sort(np.concatenate(folds[:i] + folds[i + 1 :])), test) for i, test in enumerate(folds)]


def write_report(report: EvalReport, csv_path: str | Path, json_path: str | Path | None = None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "F", "Y", "abs_error", "crop_rows", "crop_cols", "dropped_heads"])
        for r in report.records:
            w.writerow([r.id, repr(r.predicted), r.actual, repr(r.abs_error), r.crop[0], r.crop[1], r.dropped_heads])
        fh.write(f"# n={report.n} MAE={report.mae!r} MSE={report.mse!r}\n")
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report.summary(), indent=2) + "\n")


def report_dict(report: EvalReport) -> dict:
    return {"summary": report.summary(), "records": [asdict(r) for r in report.records]}
