"""Entropy-gated early-exit inference.

An example walks the exits in depth order and leaves at the first one
whose normalized prediction entropy falls strictly below the threshold
phi; if none does, it leaves at the last exit. Entropy is normalized by
ln(K) so phi lives on a [0, 1] scale regardless of the class count:
phi = 0 can never fire early (entropy is non-negative) and reproduces a
plain last-exit model, phi = 1 fires at the first exit unless its
prediction is exactly uniform.

`infer_early_exit` evaluates the network lazily, running only the blocks
it needs. The batch/sweep paths precompute an all-exit probability cache
per example over the identical code path, so cached and lazy decisions
match bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import MultiExitNet
from .ops import softmax
from . import metrics

__all__ = [
    "ExitPolicy",
    "InferenceTrace",
    "ExitStats",
    "normalized_entropy",
    "infer_early_exit",
    "all_exit_probs",
    "exit_entropies",
    "choose_exits",
    "per_class_confidence",
    "batch_stats",
    "sweep_from_cache",
    "sweep_thresholds",
]


@dataclass(frozen=True)
class ExitPolicy:
    phi: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi must be in [0, 1], got {self.phi}")


@dataclass
class InferenceTrace:
    entropies: list[float]
    chosen_exit: int
    predicted_label: int
    confidence: float


@dataclass
class ExitStats:
    fractions: np.ndarray
    average_exit: float
    per_class_confidence: np.ndarray


def normalized_entropy(probs: np.ndarray) -> float | np.ndarray:
    """Shannon entropy over the last axis divided by ln(K), with
    0 * ln(0) taken as 0. Scalar for a single distribution."""
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[-1]
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("probabilities must sum to 1")
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1) / np.log(k)
    return float(h) if h.ndim == 0 else h


def infer_early_exit(net: MultiExitNet, x, policy: ExitPolicy) -> InferenceTrace:
    """Algorithm: walk exits 1..E; return at the first with entropy < phi,
    else at exit E. Blocks beyond the chosen exit are never computed."""
    entropies: list[float] = []
    gen = net.iter_exit_logits(x, training=False)
    probs = None
    chosen = net.num_exits
    for e, logits in enumerate(gen, start=1):
        # float64 softmax, matching all_exit_probs so lazy and cached
        # decisions are identical to the last bit
        probs = softmax(logits.data.astype(np.float64))
        ent = normalized_entropy(probs)
        entropies.append(ent)
        if ent < policy.phi:
            chosen = e
            gen.close()
            break
    return InferenceTrace(
        entropies=entropies,
        chosen_exit=chosen,
        predicted_label=int(np.argmax(probs)),
        confidence=float(np.max(probs)),
    )


def all_exit_probs(net: MultiExitNet, windows: np.ndarray) -> np.ndarray:
    """Per-example softmax outputs of every exit, shape (N, E, K).

    Examples run one at a time through the same generator that the lazy
    path uses, so every downstream consumer sees identical numbers.
    """
    windows = np.asarray(windows)
    if windows.ndim != 3:
        raise ValueError(f"expected (N, C, L) windows, got shape {windows.shape}")
    n = windows.shape[0]
    probs = np.empty((n, net.num_exits, net.config.num_classes), dtype=np.float64)
    for i in range(n):
        for e, logits in enumerate(net.iter_exit_logits(windows[i], training=False)):
            probs[i, e] = softmax(logits.data.astype(np.float64))
    return probs


def exit_entropies(probs: np.ndarray) -> np.ndarray:
    """Normalized entropy per (example, exit) from an all_exit_probs cache."""
    return normalized_entropy(probs)


def choose_exits(entropies: np.ndarray, phi: float) -> np.ndarray:
    """1-based chosen exit per example: first entropy strictly below phi,
    else the last exit."""
    fired = entropies < phi
    n_exits = entropies.shape[1]
    return np.where(fired.any(axis=1), fired.argmax(axis=1) + 1, n_exits)


def per_class_confidence(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Mean max-softmax score at each exit, grouped by true class: shape
    (E, K). Classes absent from `labels` get 0."""
    conf = probs.max(axis=2)  # (N, E)
    out = np.zeros((probs.shape[1], num_classes))
    for k in range(num_classes):
        mask = labels == k
        if mask.any():
            out[:, k] = conf[mask].mean(axis=0)
    return out


def batch_stats(net: MultiExitNet, dataset, policy: ExitPolicy):
    """Early-exit statistics for one threshold.

    Returns (ExitStats, traces, predictions). Decisions are derived from
    the all-exit cache; they match per-example lazy inference exactly
    because both run the same computation.
    """
    probs = all_exit_probs(net, dataset.windows)
    ent = exit_entropies(probs)
    chosen = choose_exits(ent, policy.phi)
    n, n_exits, _ = probs.shape
    chosen_probs = probs[np.arange(n), chosen - 1]
    predictions = chosen_probs.argmax(axis=1)
    traces = [
        InferenceTrace(
            entropies=[float(v) for v in ent[i, : chosen[i]]],
            chosen_exit=int(chosen[i]),
            predicted_label=int(predictions[i]),
            confidence=float(chosen_probs[i].max()),
        )
        for i in range(n)
    ]
    stats = ExitStats(
        fractions=np.bincount(chosen, minlength=n_exits + 1)[1:] / n,
        average_exit=float(chosen.mean()),
        per_class_confidence=per_class_confidence(probs, dataset.labels, net.config.num_classes),
    )
    return stats, traces, predictions


def _clean_grid(phi_grid) -> list[float]:
    grid = sorted({float(p) for p in phi_grid})
    if not grid:
        raise ValueError("phi grid is empty")
    for p in grid:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"phi values must be in [0, 1], got {p}")
    return grid


def sweep_from_cache(probs: np.ndarray, entropies: np.ndarray, labels: np.ndarray, phi_grid) -> list[metrics.CurvePoint]:
    """One CurvePoint per unique phi, ascending, from a prob cache."""
    n, n_exits, k = probs.shape
    points = []
    for phi in _clean_grid(phi_grid):
        chosen = choose_exits(entropies, phi)
        preds = probs[np.arange(n), chosen - 1].argmax(axis=1)
        cm = metrics.confusion_matrix(labels, preds, k)
        points.append(
            metrics.CurvePoint(
                phi=phi,
                accuracy=metrics.accuracy(cm),
                macro_f1=metrics.macro_f1(cm),
                kappa=metrics.cohens_kappa(cm),
                average_exit=float(chosen.mean()),
                fractions=tuple(np.bincount(chosen, minlength=n_exits + 1)[1:] / n),
            )
        )
    return points


def sweep_thresholds(net: MultiExitNet, dataset, phi_grid) -> list[metrics.CurvePoint]:
    """Early-exit quality/cost trade-off over a threshold grid."""
    probs = all_exit_probs(net, dataset.windows)
    return sweep_from_cache(probs, exit_entropies(probs), dataset.labels, phi_grid)
