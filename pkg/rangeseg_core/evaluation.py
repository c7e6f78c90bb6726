"""
evaluation.py

Confusion accumulation, IoU metrics and the per-stage timing bench. Reports
are CSV files written and read back with pandas.
"""

import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .console import setup_logger
from .errors import ConfigError, EmptyInputError, FormatError

# --- CONFIGURATION ---
MEAN_ROW = "mean"
END_TO_END = "end_to_end"
BENCH_COLUMNS = ["stage", "median_ms", "p95_ms"]

logger = setup_logger(__name__)


class ConfusionMatrix:
    """Rows are ground truth, columns predictions; ignore_id points are skipped."""

    def __init__(self, num_classes, ignore_id=None):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self):
        return int(self.matrix.sum())

    def accumulate(self, truth, pred):
        truth = _values(truth)
        pred = _values(pred)
        if truth.shape != pred.shape:
            raise FormatError(f"truth has {truth.size} labels, prediction has {pred.size}")
        keep = truth != self.ignore_id if self.ignore_id is not None else np.ones(truth.shape, dtype=bool)
        truth, pred = truth[keep], pred[keep]
        for name, values in (("truth", truth), ("prediction", pred)):
            if values.size and (values.min() < 0 or values.max() >= self.num_classes):
                raise FormatError(f"{name} label outside [0, {self.num_classes})")
        np.add.at(self.matrix, (truth, pred), 1)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise FormatError(f"cannot merge {other.num_classes}-class matrix into {self.num_classes}-class matrix")
        self.matrix += other.matrix
        return self

    def __add__(self, other):
        out = ConfusionMatrix(self.num_classes, self.ignore_id)
        out.matrix = self.matrix.copy()
        return out.merge(other)


def _values(labels):
    return np.asarray(labels.labels if hasattr(labels, "labels") else labels, dtype=np.int64).reshape(-1)


def accumulate(cm, truth, pred):
    return cm.accumulate(truth, pred)


def class_counts(cm):
    """-> (tp, fp, fn) per class."""
    tp = np.diag(cm.matrix).astype(np.float64)
    fp = cm.matrix.sum(axis=0) - tp
    fn = cm.matrix.sum(axis=1) - tp
    return tp, fp, fn


def miou(cm):
    """Per-class IoU (NaN where TP + FP + FN == 0) and the mean over the rest."""
    tp, fp, fn = class_counts(cm)
    denominator = tp + fp + fn
    present = denominator > 0
    if not present.any():
        raise EmptyInputError("no class has any ground truth or prediction")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denominator[present]
    return iou, float(iou[present].mean())


def pixel_accuracy(cm):
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    return float(np.trace(cm.matrix) / cm.total)


def write_eval_report(cm, path, class_names=None):
    iou, mean = miou(cm)
    tp, fp, fn = class_counts(cm)
    names = list(class_names) if class_names else [str(c) for c in range(cm.num_classes)]
    frame = pd.DataFrame({
        "class_id": np.arange(cm.num_classes),
        "class_name": names,
        "tp": tp.astype(np.int64),
        "fp": fp.astype(np.int64),
        "fn": fn.astype(np.int64),
        "iou": iou,
    })
    summary = pd.DataFrame([{"class_id": -1, "class_name": MEAN_ROW, "tp": int(tp.sum()),
                             "fp": int(fp.sum()), "fn": int(fn.sum()), "iou": mean}])
    pd.concat([frame, summary], ignore_index=True).to_csv(path, index=False)
    return path


def read_eval_report(path):
    """-> (per-class DataFrame, mIoU)."""
    frame = pd.read_csv(path)
    summary = frame[frame["class_name"] == MEAN_ROW]
    if summary.empty:
        raise FormatError("evaluation report has no mean row", path=path)
    return frame[frame["class_name"] != MEAN_ROW].reset_index(drop=True), float(summary["iou"].iloc[0])


@dataclass
class BenchReport:
    table: pd.DataFrame         # stage, median_ms, p95_ms; last row is end_to_end
    scans: int

    @property
    def scans_per_second(self):
        median = float(self.table.loc[self.table["stage"] == END_TO_END, "median_ms"].iloc[0])
        return 1000.0 / median if median > 0 else float("inf")

    def stage(self, name):
        row = self.table[self.table["stage"] == name]
        if row.empty:
            raise KeyError(name)
        return float(row["median_ms"].iloc[0]), float(row["p95_ms"].iloc[0])


def bench(stages, inputs, warmup=1, clock=time.perf_counter):
    """Time an ordered list of (name, fn) stages over `inputs`.

    Each fn receives the previous stage's output (the first gets the input).
    The first `warmup` inputs are run but not measured.
    """
    inputs = list(inputs)
    if len(inputs) <= warmup:
        raise ConfigError(f"bench needs more than {warmup} inputs (warm-up), got {len(inputs)}")
    samples = {name: [] for name, _ in stages}
    samples[END_TO_END] = []
    for i, item in enumerate(inputs):
        start = clock()
        state = item
        for name, fn in stages:
            t0 = clock()
            state = fn(state)
            samples[name].append(clock() - t0)
        total = clock() - start
        samples[END_TO_END].append(total)
        if i < warmup:
            for values in samples.values():
                values.pop()
    rows = [{"stage": name, "median_ms": 1000.0 * float(np.median(values)),
             "p95_ms": 1000.0 * float(np.percentile(values, 95))}
            for name, values in samples.items()]
    report = BenchReport(pd.DataFrame(rows, columns=BENCH_COLUMNS), len(inputs) - warmup)
    logger.info("%.1f scans/s over %d scans", report.scans_per_second, report.scans, extra={"tag": "BENCH"})
    return report


def write_bench_report(report, path):
    report.table.to_csv(path, index=False)
    return path


def read_bench_report(path, scans=0):
    table = pd.read_csv(path)
    if list(table.columns) != BENCH_COLUMNS or END_TO_END not in set(table["stage"]):
        raise FormatError(f"bench report must have columns {BENCH_COLUMNS} and an {END_TO_END} row", path=path)
    return BenchReport(table, scans)
