"""Evaluation metrics and per-round records."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ContractViolation
from .model import ModelParams, predict_proba

CSV_COLUMNS = (
    "round", "test_accuracy", "lp_mean", "lr_mean", "acc_min", "acc_max", "acc_std",
    "clean_set_mean_size", "empty_clean_flags", "degenerate_gmm_count",
)


def label_precision(selected, data: Dataset) -> float | None:
    """Share of selected examples whose observed label is correct; None for an empty selection."""
    idx = np.asarray(selected, dtype=np.int64)
    if idx.size == 0:
        return None
    return float(np.mean(data.observed_labels[idx] == data.true_labels[idx]))


def label_recall(selected, data: Dataset) -> float | None:
    """Share of correctly-labelled examples that were selected; None if the client has none."""
    clean = data.clean_mask()
    total = int(clean.sum())
    if total == 0:
        return None
    idx = np.unique(np.asarray(selected, dtype=np.int64))
    return float(clean[idx].sum() / total)


def test_accuracy(model: ModelParams, test_set: Dataset) -> float:
    """Argmax agreement with the *true* labels."""
    if len(test_set) == 0:
        raise ContractViolation("empty test set")
    pred = predict_proba(model, test_set.features).argmax(axis=1)
    return float(np.mean(pred == test_set.true_labels))


def accuracy_spread(per_client_accuracy) -> tuple[float, float, float]:
    """``(min, max, population std)`` of per-client accuracies."""
    a = np.sort(np.asarray(per_client_accuracy, dtype=np.float64))
    if a.size < 2:
        raise ContractViolation("spread needs at least two clients")
    std = 0.0 if a[0] == a[-1] else float(a.std())
    return float(a[0]), float(a[-1]), std


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    per_client_accuracy: list[float]
    participants: list[int]
    clean_set_sizes: list[int]
    label_precision: list[float | None] = field(default_factory=list)
    label_recall: list[float | None] = field(default_factory=list)
    empty_clean_flags: int = 0
    degenerate_gmm_count: int = 0
    selection_active: bool = False

    @property
    def lp_mean(self) -> float | None:
        return _mean_or_none(self.label_precision) if self.selection_active else None

    @property
    def lr_mean(self) -> float | None:
        return _mean_or_none(self.label_recall) if self.selection_active else None

    def row(self) -> dict:
        if len(self.per_client_accuracy) >= 2:
            lo, hi, std = accuracy_spread(self.per_client_accuracy)
        elif self.per_client_accuracy:
            lo = hi = float(self.per_client_accuracy[0])
            std = 0.0
        else:
            lo = hi = std = None
        return {
            "round": self.round,
            "test_accuracy": self.test_accuracy,
            "lp_mean": self.lp_mean,
            "lr_mean": self.lr_mean,
            "acc_min": lo,
            "acc_max": hi,
            "acc_std": std,
            "clean_set_mean_size": float(np.mean(self.clean_set_sizes)) if self.clean_set_sizes else None,
            "empty_clean_flags": self.empty_clean_flags,
            "degenerate_gmm_count": self.degenerate_gmm_count,
        }


def format_value(v) -> str:
    """Shortest round-trip text for floats; empty string for an absent value."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, rounds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in rounds:
            row = m.row()
            w.writerow([format_value(row[c]) for c in CSV_COLUMNS])


def write_json(path, rounds) -> None:
    with open(path, "w") as fh:
        json.dump([m.row() for m in rounds], fh, indent=1)
        fh.write("\n")


def read_csv(path) -> list[dict]:
    """Inverse of :func:`write_csv` (absent values come back as None)."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                elif k in ("round", "empty_clean_flags", "degenerate_gmm_count"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out
