"""Per-sample confidence vectors for the training set.

The store owns every sample's simplex vector over the K classes, keyed by
sample id, and enforces two invariants on every write: entries sum to 1
within 1e-6, and the support stays inside the sample's candidate set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import PartialSample
from .errors import StoreLookupError, ValidationError

SIMPLEX_ATOL = 1e-6


def init_confidence(candidates: np.ndarray) -> np.ndarray:
    """Uniform confidence over the candidate set: C = Y / |Y|."""
    y = np.asarray(candidates, dtype=np.float64)
    total = y.sum()
    if total < 1:
        raise ValidationError("cannot initialize confidence from an empty candidate set")
    return y / total


@dataclass
class CollapseStats:
    fraction_one_hot: float
    mean_entropy: float


class ConfidenceStore:
    """Confidence table over all training samples, single-writer semantics."""

    def __init__(self, ids, candidate_sets, num_classes: int):
        self.num_classes = int(num_classes)
        self._ids = [int(i) for i in ids]
        if len(set(self._ids)) != len(self._ids):
            raise ValidationError("duplicate sample ids in store")
        self._row_of = {i: r for r, i in enumerate(self._ids)}
        self._candidates = np.asarray(candidate_sets, dtype=np.int8)
        if self._candidates.shape != (len(self._ids), self.num_classes):
            raise ValidationError(
                f"candidate matrix shape {self._candidates.shape} does not match "
                f"({len(self._ids)}, {self.num_classes})"
            )
        if (self._candidates.sum(axis=1) < 1).any():
            raise ValidationError("every sample needs at least one candidate")
        self._table = self._candidates / self._candidates.sum(axis=1, keepdims=True)

    @classmethod
    def from_partial_samples(cls, partials: list[PartialSample], num_classes: int):
        return cls(
            ids=[p.sample.id for p in partials],
            candidate_sets=[p.candidates for p in partials],
            num_classes=num_classes,
        )

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    def candidates_for(self, ids) -> np.ndarray:
        return self._candidates[self._rows(ids)].copy()

    def _rows(self, ids) -> np.ndarray:
        rows = []
        for i in ids:
            r = self._row_of.get(int(i))
            if r is None:
                raise StoreLookupError(f"unknown sample id {int(i)}")
            rows.append(r)
        return np.asarray(rows, dtype=np.int64)

    def get_batch(self, ids) -> np.ndarray:
        """Confidence rows in the order of ``ids``; copies, so callers can't mutate."""
        if len(ids) == 0:
            return np.zeros((0, self.num_classes))
        return self._table[self._rows(ids)].copy()

    def set_batch(self, ids, new_vectors: np.ndarray) -> None:
        """Replace the addressed rows; rejects the whole batch if any row is invalid."""
        new_vectors = np.asarray(new_vectors, dtype=np.float64)
        if new_vectors.shape != (len(ids), self.num_classes):
            raise ValidationError(
                f"expected vectors of shape ({len(ids)}, {self.num_classes}), "
                f"got {new_vectors.shape}"
            )
        rows = self._rows(ids)
        problems = []
        for pos, (i, row, vec) in enumerate(zip(ids, rows, new_vectors)):
            if (vec < -1e-12).any():
                problems.append(f"row {pos} (id {int(i)}): negative entries")
            elif abs(vec.sum() - 1.0) > SIMPLEX_ATOL:
                problems.append(f"row {pos} (id {int(i)}): sums to {vec.sum():.8f}")
            elif (vec[self._candidates[row] == 0] > 1e-12).any():
                problems.append(f"row {pos} (id {int(i)}): mass outside candidate set")
        if problems:
            raise ValidationError("rejected batch update: " + "; ".join(problems))
        self._table[rows] = np.clip(new_vectors, 0.0, None)

    def validate(self) -> None:
        """Re-check both store invariants over every entry."""
        sums = self._table.sum(axis=1)
        if np.abs(sums - 1.0).max() > SIMPLEX_ATOL or (self._table < -1e-12).any():
            raise ValidationError("store contains a non-simplex confidence vector")
        if ((self._table > 1e-12) & (self._candidates == 0)).any():
            raise ValidationError("store contains confidence mass outside a candidate set")

    def collapse_stats(self) -> CollapseStats:
        if len(self._ids) == 0:
            raise ValidationError("collapse_stats on an empty store")
        one_hot = (np.count_nonzero(self._table, axis=1) == 1).mean()
        p = self._table
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(p > 0, -p * np.log(p), 0.0).sum(axis=1)
        return CollapseStats(fraction_one_hot=float(one_hot), mean_entropy=float(ent.mean()))

    def snapshot(self) -> np.ndarray:
        """Copy of the full table, rows in store id order."""
        return self._table.copy()

    # -- on-disk snapshots (JSON-lines {"id": int, "confidence": [...]}) --

    def save_snapshot(self, path: str | Path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for i, row in zip(self._ids, self._table):
                f.write(json.dumps({"id": i, "confidence": [float(v) for v in row]}) + "\n")

    def load_snapshot(self, path: str | Path) -> None:
        table = np.empty_like(self._table)
        seen = np.zeros(len(self._ids), dtype=bool)
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                r = self._row_of.get(int(row["id"]))
                if r is None:
                    raise StoreLookupError(f"snapshot refers to unknown id {row['id']}")
                table[r] = np.asarray(row["confidence"], dtype=np.float64)
                seen[r] = True
        if not seen.all():
            raise ValidationError(f"snapshot misses {int((~seen).sum())} store entries")
        old = self._table
        self._table = table
        try:
            self.validate()
        except ValidationError:
            self._table = old
            raise
