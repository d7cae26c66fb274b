"""Test-set metrics and reports.

Per-class "success rate" is recall: the diagonal of the confusion matrix
over its row sum. Cross-fold aggregation pools confusion counts and loss
over all test predictions (never a mean of per-fold means), so unequal
test-set sizes cannot skew the totals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import model, nn
from .cache import PreprocessedCache
from .dataset import CLASS_NAMES, Manifest, NUM_CLASSES
from .errors import FormatError

REPORT_HEADER = "#ethnipipe-report v1"
TABLE_COLUMNS = (*CLASS_NAMES, "Total Success rate", "Total Loss")


def confusion_matrix(
    true_labels: Sequence[int], predicted: Sequence[int], num_classes: int = NUM_CLASSES
) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    true_labels = np.asarray(true_labels, dtype=np.intp)
    predicted = np.asarray(predicted, dtype=np.intp)
    if true_labels.shape != predicted.shape:
        raise ValueError("true and predicted label arrays differ in length")
    for name, arr in (("true", true_labels), ("predicted", predicted)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels fall outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted), 1)
    return counts


def metrics_from_confusion(counts: np.ndarray) -> tuple[tuple[float, ...], float]:
    """(per-class recall, total accuracy). Classes absent from the set
    (empty rows) report 0.0 rather than dividing by zero."""
    counts = np.asarray(counts)
    row_sums = counts.sum(axis=1)
    diag = np.diag(counts).astype(np.float64)
    per_class = np.where(row_sums > 0, diag / np.maximum(row_sums, 1), 0.0)
    total = float(diag.sum() / counts.sum()) if counts.sum() else 0.0
    return tuple(float(v) for v in per_class), total


@dataclass(eq=False)
class FoldReport:
    fold_index: int
    per_class_accuracy: tuple[float, ...]
    total_accuracy: float
    mean_loss: float
    confusion: np.ndarray

    @classmethod
    def from_confusion(cls, fold_index: int, confusion: np.ndarray, mean_loss: float):
        per_class, total = metrics_from_confusion(confusion)
        return cls(
            fold_index=fold_index,
            per_class_accuracy=per_class,
            total_accuracy=total,
            mean_loss=mean_loss,
            confusion=np.asarray(confusion, dtype=np.int64),
        )

    @property
    def sample_count(self) -> int:
        return int(self.confusion.sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FoldReport)
            and self.fold_index == other.fold_index
            and self.per_class_accuracy == other.per_class_accuracy
            and self.total_accuracy == other.total_accuracy
            and self.mean_loss == other.mean_loss
            and np.array_equal(self.confusion, other.confusion)
        )


@dataclass(eq=False)
class CrossValReport:
    folds: tuple[FoldReport, ...]
    per_class_accuracy: tuple[float, ...]
    total_accuracy: float
    mean_loss: float
    confusion: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CrossValReport)
            and self.folds == tuple(other.folds)
            and self.per_class_accuracy == other.per_class_accuracy
            and self.total_accuracy == other.total_accuracy
            and self.mean_loss == other.mean_loss
            and np.array_equal(self.confusion, other.confusion)
        )


def evaluate(
    state: model.ModelState,
    test_ids: Sequence[str],
    manifest: Manifest,
    cache: PreprocessedCache,
    fold_index: int = 0,
    batch_size: int = 64,
) -> FoldReport:
    """Run the model over a fold's test ids and tabulate metrics.

    Augmented records are refused: noisy duplicates exist only to balance
    training and must never inflate test scores.
    """
    if not test_ids:
        raise ValueError("test id list is empty")
    records = [manifest.get(rid) for rid in test_ids]
    for rec in records:
        if rec.is_augmented:
            raise ValueError(f"augmented record {rec.id!r} in test set (leakage)")

    true_labels: list[int] = []
    predicted: list[int] = []
    loss_sum = 0.0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = np.stack([cache.get(rec.id) for rec in chunk]).astype(state.dtype)
        labels = np.array([int(rec.label) for rec in chunk], dtype=np.intp)
        probs = model.forward(state, batch, mode="eval")
        loss_sum += nn.cross_entropy(probs, labels) * len(chunk)
        true_labels.extend(int(l) for l in labels)
        predicted.extend(int(p) for p in probs.argmax(axis=1))

    counts = confusion_matrix(true_labels, predicted)
    return FoldReport.from_confusion(fold_index, counts, loss_sum / len(records))


def aggregate(folds: Sequence[FoldReport]) -> CrossValReport:
    """Pool fold confusion counts and losses into one report."""
    if not folds:
        raise ValueError("aggregate needs at least one fold report")
    pooled = np.sum([f.confusion for f in folds], axis=0)
    per_class, total = metrics_from_confusion(pooled)
    weights = np.array([f.sample_count for f in folds], dtype=np.float64)
    losses = np.array([f.mean_loss for f in folds])
    mean_loss = float((losses * weights).sum() / weights.sum())
    return CrossValReport(
        folds=tuple(folds),
        per_class_accuracy=per_class,
        total_accuracy=total,
        mean_loss=mean_loss,
        confusion=pooled,
    )


def summary_row(report: CrossValReport) -> str:
    """The aggregate metrics in the documented one-line form, e.g.
    ``99.02% | 99.76% | 99.18% | 96.72% | 99.18% | 0.03518``."""
    cells = [f"{acc * 100:.2f}%" for acc in report.per_class_accuracy]
    cells.append(f"{report.total_accuracy * 100:.2f}%")
    cells.append(f"{report.mean_loss:.5f}")
    return " | ".join(cells)


def render_report(report: CrossValReport, format: str = "table") -> str:
    if format == "table":
        lines = []
        for fold in report.folds:
            accs = ", ".join(
                f"{name}={acc * 100:.2f}%"
                for name, acc in zip(CLASS_NAMES, fold.per_class_accuracy)
            )
            lines.append(
                f"fold {fold.fold_index}: {accs}, "
                f"total={fold.total_accuracy * 100:.2f}%, loss={fold.mean_loss:.5f}"
            )
        lines.append("")
        lines.append(" | ".join(TABLE_COLUMNS))
        lines.append(summary_row(report))
        return "\n".join(lines) + "\n"
    if format == "structured":
        lines = [REPORT_HEADER, f"n_folds\t{len(report.folds)}"]
        for fold in report.folds:
            lines.append(f"fold\t{fold.fold_index}")
            lines.append("confusion\t" + ",".join(str(int(v)) for v in fold.confusion.reshape(-1)))
            lines.append(f"mean_loss\t{fold.mean_loss!r}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def parse_report(text: str) -> CrossValReport:
    """Inverse of render_report(format='structured')."""
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise FormatError(f"missing report header {REPORT_HEADER!r}")
    folds: list[FoldReport] = []
    expected: int | None = None
    fold_index: int | None = None
    confusion: np.ndarray | None = None
    for line in lines[1:]:
        if not line:
            continue
        key, _, value = line.partition("\t")
        if key == "n_folds":
            expected = int(value)
        elif key == "fold":
            fold_index = int(value)
        elif key == "confusion":
            cells = [int(v) for v in value.split(",")]
            side = int(round(len(cells) ** 0.5))
            if side * side != len(cells):
                raise FormatError(f"confusion matrix has {len(cells)} cells, not square")
            confusion = np.array(cells, dtype=np.int64).reshape(side, side)
        elif key == "mean_loss":
            if fold_index is None or confusion is None:
                raise FormatError("mean_loss before fold/confusion lines")
            folds.append(FoldReport.from_confusion(fold_index, confusion, float(value)))
            fold_index, confusion = None, None
        else:
            raise FormatError(f"unknown report key {key!r}")
    if expected is None:
        raise FormatError("report lacks an n_folds line")
    if len(folds) != expected:
        raise FormatError(f"report declares {expected} folds but contains {len(folds)}")
    return aggregate(folds)


# ---------------------------------------------------------------------------
# Inference latency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    samples_ms: tuple[float, ...]


def summarize_latencies(samples_ms: Sequence[float]) -> LatencyStats:
    arr = np.asarray(samples_ms, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no latency samples")
    return LatencyStats(
        mean_ms=float(arr.mean()),
        p50_ms=float(np.percentile(arr, 50)),
        p95_ms=float(np.percentile(arr, 95)),
        samples_ms=tuple(float(v) for v in arr),
    )


def benchmark_latency(
    state: model.ModelState,
    images: np.ndarray,
    repetitions: int,
    warmup: int = 0,
    forward_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> LatencyStats:
    """Single-image forward latency over already-preprocessed tensors.

    Runs warmup + repetitions forwards, cycling through `images`; only the
    last `repetitions` timings are recorded. Timings cover the cached-tensor
    -> probabilities forward alone (no disk or preprocessing).
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a (N, H, W, C) image stack, got {images.shape}")
    if forward_fn is None:
        forward_fn = lambda batch: model.forward(state, batch, mode="eval")  # noqa: E731

    samples: list[float] = []
    for i in range(warmup + repetitions):
        batch = images[i % images.shape[0]][None].astype(state.dtype)
        started = time.perf_counter()
        forward_fn(batch)
        elapsed_ms = (time.perf_counter() - started) * 1e3
        if i >= warmup:
            samples.append(elapsed_ms)
    return summarize_latencies(samples)
