"""Confusion-matrix metrics and report tables.

Conventions for degenerate cases are fixed here: a class with no
predicted and no true examples contributes F1 = 0 to the macro average,
and Cohen's kappa is 0 when the expected agreement is exactly 1. All
arithmetic runs in float64 on integer counts.

Report files are comma-separated with a mandatory header row and
shortest round-trip float formatting, so identical inputs always produce
byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CurvePoint",
    "confusion_matrix",
    "accuracy",
    "macro_f1",
    "cohens_kappa",
    "emit_reports",
]


@dataclass(frozen=True)
class CurvePoint:
    """One sweep row: quality and cost of early exit at one threshold."""

    phi: float
    accuracy: float
    macro_f1: float
    kappa: float
    average_exit: float
    fractions: tuple[float, ...]


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """K x K counts, rows true class, columns predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and equal length, got {y_true.shape} and {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("cannot build a confusion matrix from zero examples")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels must be in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_cm(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be non-negative")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    return cm.astype(np.float64)


def accuracy(cm: np.ndarray) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean over classes of 2PR/(P+R), taking a class's F1 as
    0 whenever precision + recall is 0."""
    cm = _check_cm(cm)
    tp = np.diag(cm)
    pred_totals = cm.sum(axis=0)
    true_totals = cm.sum(axis=1)
    f1 = np.zeros(cm.shape[0])
    for k in range(cm.shape[0]):
        precision = tp[k] / pred_totals[k] if pred_totals[k] > 0 else 0.0
        recall = tp[k] / true_totals[k] if true_totals[k] > 0 else 0.0
        if precision + recall > 0:
            f1[k] = 2.0 * precision * recall / (precision + recall)
    return float(f1.mean())


def cohens_kappa(cm: np.ndarray) -> float:
    """(p_o - p_e) / (1 - p_e) with p_e from the marginals; 0 when the
    expected agreement p_e is exactly 1.

    Evaluated as (N tr - sum(r c)) / (N^2 - sum(r c)) on the raw counts:
    the terms stay integral, so there is a single rounding at the final
    division and small hand-checked cases come out exact."""
    cm = _check_cm(cm)
    total = cm.sum()
    expected = float((cm.sum(axis=1) * cm.sum(axis=0)).sum())
    denom = total * total - expected
    if denom == 0.0:
        return 0.0
    return float((np.trace(cm) * total - expected) / denom)


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_table(path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def emit_reports(
    sweep: list[CurvePoint],
    confidence: np.ndarray,
    out_dir,
    class_names: list[str] | None = None,
) -> list[str]:
    """Write the four report tables into out_dir and return their paths.

    fscore_vs_entropy.csv     phi -> macro F1
    avgexit_tradeoff.csv      phi -> average exit and quality metrics
    exit_fractions.csv        phi -> fraction of examples leaving per exit
    per_class_confidence.csv  exit -> mean max-softmax per true class
    """
    confidence = np.asarray(confidence)
    if confidence.ndim != 2:
        raise ValueError(f"confidence must be (E, K), got shape {confidence.shape}")
    n_exits, n_classes = confidence.shape
    if class_names is not None and len(class_names) != n_classes:
        raise ValueError(f"got {len(class_names)} class names for {n_classes} classes")
    names = list(class_names) if class_names is not None else [f"class_{k}" for k in range(n_classes)]
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def emit(filename, header, rows):
        path = os.path.join(out_dir, filename)
        _write_table(path, header, rows)
        paths.append(path)

    emit(
        "fscore_vs_entropy.csv",
        ["phi", "macro_f1"],
        [[_fmt(p.phi), _fmt(p.macro_f1)] for p in sweep],
    )
    emit(
        "avgexit_tradeoff.csv",
        ["phi", "average_exit", "macro_f1", "accuracy", "kappa"],
        [
            [_fmt(p.phi), _fmt(p.average_exit), _fmt(p.macro_f1), _fmt(p.accuracy), _fmt(p.kappa)]
            for p in sweep
        ],
    )
    sweep_exits = len(sweep[0].fractions) if sweep else n_exits
    emit(
        "exit_fractions.csv",
        ["phi"] + [f"exit_{e}" for e in range(1, sweep_exits + 1)],
        [[_fmt(p.phi)] + [_fmt(v) for v in p.fractions] for p in sweep],
    )
    emit(
        "per_class_confidence.csv",
        ["exit"] + names,
        [[str(e + 1)] + [_fmt(v) for v in confidence[e]] for e in range(n_exits)],
    )
    return paths
