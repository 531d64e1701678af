"""Training objectives for multi-exit networks.

The full objective averages over exits a per-exit sum of a task term
(cross entropy on clean inputs against true labels) and an auxiliary
term: a confidence-gated consistency loss between clean and perturbed
predictions in the default mode, or a temperature-scaled distillation
loss in the distillation baseline. The clean branch never receives
gradients from auxiliary terms: pseudo-labels, gates, and teacher
distributions are computed on detached values.

Gate targets can come from the same exit (pseudo), from the last exit
(teacher), or from the true labels (original). The confidence threshold
kappa follows a cosine schedule from kappa_min to kappa_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ops import cross_entropy_with_logits, softmax
from .tensor import Tensor

__all__ = [
    "LossConfig",
    "ExitLossBreakdown",
    "kappa_schedule",
    "one_hot",
    "task_loss",
    "consistency_loss",
    "distillation_loss",
    "total_loss",
    "MODES",
    "LABEL_SOURCES",
]

MODES = ("cet", "exit_wise", "augment_only", "distill")
LABEL_SOURCES = ("pseudo", "teacher", "original")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    kappa_min: float = 0.5
    kappa_max: float = 0.9
    label_source: str = "pseudo"
    tau: float = 2.0
    mode: str = "cet"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.kappa_min <= self.kappa_max < 1.0:
            raise ValueError(
                f"need 0 < kappa_min <= kappa_max < 1, got {self.kappa_min} and {self.kappa_max}"
            )
        if self.tau < 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"label_source must be one of {LABEL_SOURCES}, got {self.label_source!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class ExitLossBreakdown:
    """Per-exit loss terms plus the aggregated scalar that training
    backpropagates. Tensor fields stay on the tape; float views are for
    logging."""

    task: list[Tensor]
    consistency: list[Tensor]
    l2: Tensor
    total: Tensor
    retained_fraction: list[float]
    kappa: float

    @property
    def task_values(self) -> list[float]:
        return [float(t.data) for t in self.task]

    @property
    def consistency_values(self) -> list[float]:
        return [float(t.data) for t in self.consistency]

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    @property
    def l2_value(self) -> float:
        return float(self.l2.data)


def kappa_schedule(step: int, total_steps: int, kappa_min: float = 0.5, kappa_max: float = 0.9) -> float:
    """Cosine ramp of the confidence threshold.

    kappa(t) = kappa_max - (kappa_max - kappa_min) * (1 + cos(pi t/T)) / 2,
    non-decreasing, with the endpoints returned exactly.
    """
    if total_steps < 0:
        raise ValueError(f"total_steps must be >= 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step must be in [0, {total_steps}], got {step}")
    if total_steps == 0 or step == total_steps:
        return kappa_max
    if step == 0:
        return kappa_min
    frac = (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
    return kappa_max - (kappa_max - kappa_min) * frac


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must be in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def task_loss(clean_logits: list[Tensor], labels: np.ndarray) -> list[Tensor]:
    """Per-exit mean cross entropy of clean predictions vs true labels."""
    losses = []
    for logits in clean_logits:
        targets = one_hot(labels, logits.shape[-1], dtype=logits.data.dtype)
        losses.append(cross_entropy_with_logits(logits, targets))
    return losses


def _zero_like_loss(logits: Tensor) -> Tensor:
    return Tensor(np.asarray(0.0, dtype=logits.data.dtype))


def consistency_loss(
    clean_logits: list[Tensor],
    perturbed_logits: list[Tensor],
    kappa: float,
    label_source: str = "pseudo",
    true_labels: np.ndarray | None = None,
) -> tuple[list[Tensor], list[float]]:
    """Confidence-gated cross entropy from clean-branch labels to
    perturbed-branch predictions.

    Per exit: the label and its gate (max clean softmax >= kappa) come
    from the same exit (pseudo), from the last exit (teacher), or the
    label is the true one with the gate always open (original). The sum
    is divided by the full batch size, not the retained count. Gradients
    flow only through perturbed_logits; clean outputs are read as
    constants.

    Returns (per-exit losses, per-exit retained fractions).
    """
    if label_source not in LABEL_SOURCES:
        raise ValueError(f"label_source must be one of {LABEL_SOURCES}, got {label_source!r}")
    if len(clean_logits) != len(perturbed_logits):
        raise ValueError(
            f"clean and perturbed exits differ: {len(clean_logits)} vs {len(perturbed_logits)}"
        )
    if label_source == "original" and true_labels is None:
        raise ValueError("label_source 'original' needs true_labels")

    losses: list[Tensor] = []
    retained: list[float] = []
    last_probs = softmax(clean_logits[-1].data) if label_source == "teacher" else None
    for e, pert in enumerate(perturbed_logits):
        k = pert.shape[-1]
        dtype = pert.data.dtype
        if label_source == "original":
            targets = one_hot(true_labels, k, dtype=dtype)
            gate = np.ones(pert.shape[0], dtype=dtype)
        else:
            probs = softmax(clean_logits[e].data) if label_source == "pseudo" else last_probs
            labels = np.argmax(probs, axis=1)
            targets = one_hot(labels, k, dtype=dtype)
            gate = (probs.max(axis=1) >= kappa).astype(dtype)
        retained.append(float(gate.mean()))
        if not gate.any():
            losses.append(_zero_like_loss(pert))
            continue
        losses.append(cross_entropy_with_logits(pert, targets, weights=gate))
    return losses, retained


def distillation_loss(student_logits: Tensor, teacher_logits, tau: float = 2.0) -> Tensor:
    """Temperature-scaled cross entropy from a frozen teacher:
    -tau^2 sum_k softmax(teacher/tau)_k log softmax(student/tau)_k,
    averaged over the batch. The teacher is read as a constant."""
    if tau < 1.0:
        raise ValueError(f"tau must be >= 1, got {tau}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    soft_targets = softmax(teacher / tau)
    scaled_student = student_logits * (1.0 / tau)
    return cross_entropy_with_logits(scaled_student, soft_targets) * (tau * tau)


def total_loss(
    clean_logits: list[Tensor],
    perturbed_logits: list[Tensor] | None,
    labels: np.ndarray,
    config: LossConfig,
    l2: Tensor | None = None,
    kappa: float | None = None,
) -> ExitLossBreakdown:
    """Assemble the aggregated training objective for the chosen mode.

    cet:          task + lambda * consistency, per exit
    exit_wise:    task only (perturbed branch unused)
    augment_only: task averaged over the union of clean and perturbed
                  examples, both against true labels
    distill:      task + lambda * distillation from the last exit, which
                  itself receives only its task term
    All modes add the network's L2 penalty to the exit average.
    """
    if config.mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {config.mode!r}")
    n_exits = len(clean_logits)
    if n_exits == 0:
        raise ValueError("need at least one exit")
    if config.mode in ("cet", "augment_only") and perturbed_logits is None:
        raise ValueError(f"mode {config.mode!r} needs perturbed logits")
    dtype = clean_logits[0].data.dtype
    if l2 is None:
        l2 = Tensor(np.asarray(0.0, dtype=dtype))
    if kappa is None:
        kappa = config.kappa_min

    task = task_loss(clean_logits, labels)
    zeros = [_zero_like_loss(z) for z in clean_logits]
    retained = [0.0] * n_exits

    if config.mode == "cet":
        cons, retained = consistency_loss(
            clean_logits, perturbed_logits, kappa, config.label_source, true_labels=labels
        )
        combined = [t + c * config.lam for t, c in zip(task, cons)]
    elif config.mode == "exit_wise":
        cons = zeros
        combined = task
    elif config.mode == "augment_only":
        pert_task = task_loss(perturbed_logits, labels)
        cons = zeros
        task = [(t + p) * 0.5 for t, p in zip(task, pert_task)]
        combined = task
    else:  # distill
        cons = [
            distillation_loss(clean_logits[e], clean_logits[-1].detach(), config.tau)
            if e < n_exits - 1
            else _zero_like_loss(clean_logits[e])
            for e in range(n_exits)
        ]
        combined = [t + c * config.lam for t, c in zip(task, cons)]

    acc = combined[0]
    for term in combined[1:]:
        acc = acc + term
    total = acc * (1.0 / n_exits) + l2
    return ExitLossBreakdown(
        task=task,
        consistency=cons,
        l2=l2,
        total=total,
        retained_fraction=retained,
        kappa=kappa,
    )
