"""Accuracy metrics, confusion matrices, and disambiguation forensics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .datasets import PartialSample, Sample
from .errors import ValidationError
from .objectives import top_candidates
from .store import ConfidenceStore


@dataclass
class Metrics:
    accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray  # rows = true, columns = predicted
    support: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "confusion": [[int(v) for v in row] for row in self.confusion],
            "support": [int(v) for v in self.support],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "Metrics":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            accuracy=float(d["accuracy"]),
            mean_class_accuracy=float(d["mean_class_accuracy"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            support=np.asarray(d["support"], dtype=np.int64),
        )


def metrics_from_pairs(truths, predictions, num_classes: int) -> Metrics:
    truths = np.asarray(truths, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if truths.shape != predictions.shape:
        raise ValidationError("truths and predictions must have matching length")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truths, predictions), 1)
    support = confusion.sum(axis=1)
    accuracy = float(np.trace(confusion) / max(1, confusion.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    mean_class = float(np.nanmean(per_class))
    return Metrics(accuracy, mean_class, confusion, support)


def predict_labels(model, samples: list[Sample], batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions for a list of samples."""
    dtype = next(model.parameters()).dtype
    preds = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            images = torch.as_tensor(
                np.stack([s.image for s in chunk]), dtype=dtype
            )
            logits = model(images)
            preds.append(logits.argmax(dim=-1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, samples: list[Sample], batch_size: int = 64) -> Metrics:
    """Confusion-matrix metrics over labeled samples (prediction = argmax prob)."""
    if any(s.true_label is None for s in samples):
        raise ValidationError("evaluate requires every sample to carry a true label")
    if not samples:
        raise ValidationError("evaluate requires a non-empty sample list")
    preds = predict_labels(model, samples, batch_size)
    truths = [s.true_label for s in samples]
    return metrics_from_pairs(truths, preds, model.decoder_config.num_classes)


@dataclass
class EpochSnapshot:
    epoch: int
    confidences: np.ndarray  # (n, K), rows in store id order
    phi: np.ndarray | None = None  # (n, K) sigmoid responses, same order


@dataclass
class DisambiguationReport:
    top2_coverage: float
    confidence_correctness: float
    collapse_fraction: float
    trajectory: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "top2_coverage": self.top2_coverage,
            "confidence_correctness": self.confidence_correctness,
            "collapse_fraction": self.collapse_fraction,
            "trajectory": self.trajectory,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="ascii")


def _ratio_correct(confidences: np.ndarray, truths: np.ndarray) -> float:
    return float((confidences.argmax(axis=1) == truths).mean())


def _top2_coverage(
    confidences: np.ndarray, phi: np.ndarray, truths: np.ndarray, ambiguous: np.ndarray
) -> float:
    if not ambiguous.any():
        return 1.0  # vacuous: nothing was ambiguous to begin with
    top2 = top_candidates(phi[ambiguous] * confidences[ambiguous], k=2)
    return float((top2 == truths[ambiguous, None]).any(axis=1).mean())


def disambiguation_report(
    store: ConfidenceStore,
    partials: list[PartialSample],
    phi: np.ndarray,
    history: list[EpochSnapshot] | None = None,
) -> DisambiguationReport:
    """Disambiguation quality against known ground truth.

    ``phi`` holds the final sigmoid responses for every training sample, rows
    in store id order. ``history`` adds a per-epoch trajectory from snapshots.
    """
    if len(partials) != len(store):
        raise ValidationError("partials and store size differ")
    by_id = {p.sample.id: p for p in partials}
    ids = store.ids
    if set(by_id) != set(ids):
        raise ValidationError("partials and store ids differ")
    truths_list = [by_id[i].sample.true_label for i in ids]
    if any(t is None for t in truths_list):
        raise ValidationError("disambiguation_report requires ground-truth labels")
    truths = np.asarray(truths_list, dtype=np.int64)
    ambiguous = np.asarray([by_id[i].candidate_count >= 2 for i in ids], dtype=bool)

    phi = np.asarray(phi, dtype=np.float64)
    table = store.snapshot()
    if phi.shape != table.shape:
        raise ValidationError(f"phi shape {phi.shape} does not match store {table.shape}")

    trajectory = []
    for snap in history or []:
        if snap.confidences.shape != table.shape:
            raise ValidationError(
                f"snapshot at epoch {snap.epoch}: shape {snap.confidences.shape} "
                f"does not match store {table.shape}"
            )
        row = {
            "epoch": int(snap.epoch),
            "collapse_fraction": float(
                (np.count_nonzero(snap.confidences, axis=1) == 1).mean()
            ),
            "confidence_correctness": _ratio_correct(snap.confidences, truths),
        }
        if snap.phi is not None:
            row["top2_coverage"] = _top2_coverage(snap.confidences, snap.phi, truths, ambiguous)
        trajectory.append(row)

    return DisambiguationReport(
        top2_coverage=_top2_coverage(table, phi, truths, ambiguous),
        confidence_correctness=_ratio_correct(table, truths),
        collapse_fraction=store.collapse_stats().fraction_one_hot,
        trajectory=trajectory,
    )


def collapse_only_report(store: ConfidenceStore) -> dict:
    """Degraded report when no ground truth is available."""
    stats = store.collapse_stats()
    return {
        "collapse_fraction": stats.fraction_one_hot,
        "mean_entropy": stats.mean_entropy,
    }


def export_confusion_plot(metrics: Metrics, path: str | Path) -> Path:
    """Row-normalized heatmap with per-cell percentages; raw counts go to a CSV
    next to the image. Output bytes are deterministic for a fixed renderer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    confusion = metrics.confusion
    k = confusion.shape[0]
    row_sums = np.maximum(confusion.sum(axis=1, keepdims=True), 1)
    percent = 100.0 * confusion / row_sums

    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * k, 0.8 + 0.6 * k))
    ax.imshow(percent, cmap="Blues", vmin=0.0, vmax=100.0)
    for i in range(k):
        for j in range(k):
            ax.text(
                j, i, f"{percent[i, j]:.1f}", ha="center", va="center",
                fontsize=7, color="black" if percent[i, j] < 60 else "white",
            )
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f)
        writer.writerow([f"pred_{j}" for j in range(k)])
        for row in confusion:
            writer.writerow([int(v) for v in row])
    return path
