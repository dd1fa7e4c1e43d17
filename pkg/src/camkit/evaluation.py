"""Scoring attention maps against binary ground-truth masks, and CSV export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from camkit.errors import DimensionError, MaskError, MetricError

CSV_HEADER = ("input_id", "layer", "backend", "class_id", "metric", "score")
DEFAULT_METRIC = "mass_in_mask"
DEFAULT_THRESHOLD = 0.5


def binarize(values, threshold):
    return np.asarray(values) >= threshold


def iou(values, mask, threshold=DEFAULT_THRESHOLD):
    pred = binarize(values, threshold)
    mask = mask.astype(bool)
    union = np.count_nonzero(pred | mask)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & mask) / union


def dice(values, mask, threshold=DEFAULT_THRESHOLD):
    pred = binarize(values, threshold)
    mask = mask.astype(bool)
    total = np.count_nonzero(pred) + np.count_nonzero(mask)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(pred & mask) / total


def pointing_game(values, mask, threshold=None):
    peak = np.unravel_index(np.argmax(values), values.shape)
    return 1.0 if mask[peak] else 0.0


def mass_in_mask(values, mask, threshold=None):
    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    if total == 0:
        return 0.0
    return float((values * mask).sum() / total)


METRICS = {
    "iou": iou,
    "dice": dice,
    "pointing_game": pointing_game,
    "mass_in_mask": mass_in_mask,
}
THRESHOLDED = ("iou", "dice")


def parse_metric(name, threshold=DEFAULT_THRESHOLD):
    """Split ``"iou@0.3"`` style names into ``("iou", 0.3)``; validates both parts."""
    base, _, suffix = name.partition("@")
    if base not in METRICS:
        raise MetricError(f"unknown metric {name!r}; available: {', '.join(METRICS)}")
    if suffix:
        if base not in THRESHOLDED:
            raise MetricError(f"metric {base!r} takes no threshold")
        try:
            threshold = float(suffix)
        except ValueError:
            raise MetricError(f"bad threshold in metric name {name!r}") from None
    if base in THRESHOLDED and not 0.0 <= threshold <= 1.0:
        raise MetricError(f"threshold {threshold} outside [0, 1]")
    return base, threshold


def metric_label(name, threshold=DEFAULT_THRESHOLD):
    base, threshold = parse_metric(name, threshold)
    return f"{base}@{threshold:g}" if base in THRESHOLDED else base


def check_mask(mask, name="mask"):
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError(f"{name} is not binary (values must be exactly 0 or 1)")
    return mask.astype(bool)


def evaluate(attention, mask, metric=DEFAULT_METRIC, threshold=DEFAULT_THRESHOLD) -> float:
    """Score one map (an ``AttentionMap`` or array) against a binary mask."""
    values = np.asarray(getattr(attention, "values", attention), dtype=np.float64)
    base, threshold = parse_metric(metric, threshold)
    mask = check_mask(mask)
    # accept both (1, *spatial) and (*spatial) layouts
    if values.shape != mask.shape:
        if values.shape[1:] == mask.shape and values.shape[0] == 1:
            values = values[0]
        elif mask.shape[1:] == values.shape and mask.shape[0] == 1:
            mask = mask[0]
        else:
            raise DimensionError(f"map shape {values.shape} != mask shape {mask.shape}")
    return float(METRICS[base](values, mask, threshold))


@dataclass(frozen=True)
class EvaluationRecord:
    input_id: str
    layer: str
    backend: str
    class_id: int
    metric: str
    score: float


class Evaluator:
    """Accumulates evaluation records and writes them out with :meth:`dump`."""

    def __init__(self, metric=DEFAULT_METRIC, threshold=DEFAULT_THRESHOLD):
        parse_metric(metric, threshold)
        self.metric = metric
        self.threshold = threshold
        self.records = []

    def add(self, input_id, attention, mask):
        score = evaluate(attention, mask, self.metric, self.threshold)
        record = EvaluationRecord(
            input_id,
            attention.layer,
            attention.backend,
            int(attention.class_id),
            metric_label(self.metric, self.threshold),
            score,
        )
        self.records.append(record)
        return record

    def dump(self, path):
        dump(self.records, path)


def dump(records, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in records:
                writer.writerow(
                    [r.input_id, r.layer, r.backend, r.class_id, r.metric, f"{r.score:.6f}"]
                )
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write evaluation table {path}: {exc.strerror}") from exc


def load_records(path):
    """Parse a table written by :func:`dump` back into records."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [
            EvaluationRecord(row[0], row[1], row[2], int(row[3]), row[4], float(row[5]))
            for row in reader
        ]
