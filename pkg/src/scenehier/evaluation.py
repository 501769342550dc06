"""Dense label-map prediction and the per-pixel / per-class metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import UNLABELED, ClassCatalog, DataError, LabeledImage
from .ingestion import extract_patch
from .network import CLASS_SPACE, Model, class_scores, forward

EVAL_BATCH = 256


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; unlabeled pixels are
    counted separately and never enter the metrics."""

    counts: np.ndarray
    ignored: int = 0

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError("confusion matrix must be square")
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DataError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def predict_label_map(model: Model, img: LabeledImage, stride: int = 4) -> np.ndarray:
    """Classify patches on a stride grid and spread each label to the
    pixels nearest that grid center. Stride 1 classifies every pixel."""
    if model.train_steps == 0:
        raise DataError("refusing to predict with a model that never trained")
    if model.aggregation_W is None and model.head_label_space != CLASS_SPACE:
        raise DataError("model predicts subclasses and has no aggregation to classes")
    if stride < 1:
        raise DataError("stride must be >= 1")

    h, w = img.height, img.width
    off = stride // 2
    rows = np.arange(off, h, stride)
    cols = np.arange(off, w, stride)
    if rows.size == 0:
        rows = np.array([h // 2])
    if cols.size == 0:
        cols = np.array([w // 2])
    centers = [(int(r), int(c)) for r in rows for c in cols]

    mean = img.channel_mean
    predicted = np.empty(len(centers), dtype=np.int32)
    for start in range(0, len(centers), EVAL_BATCH):
        chunk = centers[start : start + EVAL_BATCH]
        x = np.stack([
            extract_patch(img, c, model.input_size, mean).pixels for c in chunk
        ])
        logits = forward(model, x)
        if model.aggregation_W is not None:
            logits = class_scores(model, logits)
        predicted[start : start + len(chunk)] = np.argmax(logits, axis=1)

    grid = predicted.reshape(rows.size, cols.size)
    ri = np.clip(np.rint((np.arange(h) - rows[0]) / stride).astype(np.int64), 0, rows.size - 1)
    ci = np.clip(np.rint((np.arange(w) - cols[0]) / stride).astype(np.int64), 0, cols.size - 1)
    return grid[np.ix_(ri, ci)].astype(np.int32)


def confusion_from_maps(truth: np.ndarray, predicted: np.ndarray, n_classes: int) -> ConfusionMatrix:
    if truth.shape != predicted.shape:
        raise DataError(f"shape mismatch: truth {truth.shape} vs predicted {predicted.shape}")
    labeled = truth != UNLABELED
    ignored = int(truth.size - np.count_nonzero(labeled))
    t = truth[labeled].astype(np.int64)
    p = predicted[labeled].astype(np.int64)
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes), ignored)


def accuracy(conf: ConfusionMatrix, divide_by_all_classes: bool = False) -> tuple[float, float]:
    """(per-pixel, per-class) accuracy.

    Per-pixel is the correctly labeled fraction of all counted pixels.
    Per-class averages the per-class recalls; classes absent from the
    ground truth are skipped unless divide_by_all_classes is set, in which
    case the sum is divided by the full class count.
    """
    totals = conf.counts.sum(axis=1)
    grand = int(totals.sum())
    if grand == 0:
        raise DataError("confusion matrix counted no pixels")
    per_pixel = float(np.trace(conf.counts) / grand)
    present = totals > 0
    recalls = np.diag(conf.counts)[present] / totals[present]
    denom = conf.n_classes if divide_by_all_classes else int(present.sum())
    per_class = float(recalls.sum() / denom)
    return per_pixel, per_class


def per_class_delta(conf_a: ConfusionMatrix, conf_b: ConfusionMatrix) -> list[tuple[int, float]]:
    """Per-class recall of b minus a, for classes present in both."""
    if conf_a.n_classes != conf_b.n_classes:
        raise DataError("confusion matrices cover different class catalogs")
    ta = conf_a.counts.sum(axis=1)
    tb = conf_b.counts.sum(axis=1)
    out = []
    for j in range(conf_a.n_classes):
        if ta[j] > 0 and tb[j] > 0:
            ra = conf_a.counts[j, j] / ta[j]
            rb = conf_b.counts[j, j] / tb[j]
            out.append((j, float(rb - ra)))
    return out


# ---------------------------------------------------------------------------
# Delimited outputs
# ---------------------------------------------------------------------------

def write_metrics_csv(path: Path, per_pixel: float, per_class: float, ignored: int) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["per_pixel", repr(per_pixel)])
        writer.writerow(["per_class", repr(per_class)])
        writer.writerow(["ignored_pixels", ignored])


def write_confusion_csv(path: Path, conf: ConfusionMatrix, catalog: ClassCatalog) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\predicted", *catalog.names])
        for j, name in enumerate(catalog.names):
            writer.writerow([name, *conf.counts[j].tolist()])


def write_delta_csv(path: Path, deltas: list[tuple[int, float]], catalog: ClassCatalog) -> None:
    """Deltas sorted by improvement, largest first; ties keep class order."""
    ordered = sorted(deltas, key=lambda item: (-item[1], item[0]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "delta"])
        for j, delta in ordered:
            writer.writerow([j, catalog.names[j], repr(delta)])
