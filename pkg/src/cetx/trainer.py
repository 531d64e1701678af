"""Mini-batch training loop with paired clean/perturbed batches.

Every step draws a batch, builds perturbed partners for it when the mode
needs them, runs one clean and (if needed) one perturbed forward pass in
training mode, assembles the aggregated objective, backpropagates, and
applies a bias-corrected Adam update. The confidence threshold kappa is
refreshed once per epoch from its cosine schedule.

Randomness is fully keyed: batch order by (seed, epoch), dropout by
(seed, epoch, step, branch), perturbations by (seed, epoch, example
index). Two runs with one config and seed therefore produce bit-identical
parameter trajectories and reports, and a run whose auxiliary loss is
inert (gate closed) matches the plain exit-wise run step for step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import WindowedDataset
from .model import ModelConfig, MultiExitNet, build_network, save_checkpoint
from .objectives import ExitLossBreakdown, LossConfig, kappa_schedule, total_loss
from .perturb import PerturbationConfig, random_perturb
from .tensor import Tape, backward
from . import earlyexit, metrics

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "train",
    "evaluate",
    "EvalBundle",
    "TrainReport",
    "EpochRecord",
    "TrainingError",
]

# Stream tags disambiguate the trainer's seed keys from the per-example
# perturbation keys [seed, epoch, index]; indexes stay far below 2**33.
_TAG_SHUFFLE = 2**33
_TAG_DROPOUT = 2**33 + 1


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    eval_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")


class AdamState:
    """First/second moment buffers and step count for one network."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, net: MultiExitNet):
        self.m = {name: np.zeros_like(p.data) for name, p in net.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in net.params.items()}
        self.t = 0


def adam_step(net: MultiExitNet, state: AdamState, learning_rate: float) -> None:
    """One bias-corrected Adam update from the gradients currently stored
    on the parameters; gradients are zeroed afterwards."""
    state.t += 1
    c1 = 1.0 - AdamState.beta1 ** state.t
    c2 = 1.0 - AdamState.beta2 ** state.t
    for name, p in net.params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= AdamState.beta1
        m += (1.0 - AdamState.beta1) * g
        v *= AdamState.beta2
        v += (1.0 - AdamState.beta2) * (g * g)
        p.value.data = p.value.data - learning_rate * (m / c1) / (np.sqrt(v / c2) + AdamState.eps)
        p.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    kappa: float
    total: float
    task: list[float]
    consistency: list[float]
    retained: list[float]
    train_accuracy: list[float] | None = None
    val_accuracy: list[float] | None = None


@dataclass
class TrainReport:
    rows: list[EpochRecord] = field(default_factory=list)

    def to_table(self) -> str:
        """Comma-separated table, one row per epoch, byte-stable."""
        if not self.rows:
            return ""
        n_exits = len(self.rows[0].task)
        cols = ["epoch", "kappa", "total_loss"]
        for group in ("task", "consistency", "retained", "train_acc", "val_acc"):
            cols += [f"{group}_exit{e}" for e in range(1, n_exits + 1)]
        lines = [",".join(cols)]
        for r in self.rows:
            cells = [str(r.epoch), _fmt(r.kappa), _fmt(r.total)]
            cells += [_fmt(v) for v in r.task]
            cells += [_fmt(v) for v in r.consistency]
            cells += [_fmt(v) for v in r.retained]
            for vals in (r.train_accuracy, r.val_accuracy):
                cells += [_fmt(v) for v in vals] if vals is not None else [""] * n_exits
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_table())


def _fmt(v: float) -> str:
    return repr(float(v))


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, _TAG_SHUFFLE])))


def _dropout_rng(seed: int, epoch: int, step: int, branch: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, epoch, _TAG_DROPOUT, step, branch]))
    )


def _check_dataset(dataset: WindowedDataset, model_config: ModelConfig, what: str) -> None:
    n, c, length = dataset.windows.shape
    if n == 0:
        raise ValueError(f"{what} dataset is empty")
    if c != model_config.channels_in or length != model_config.length_in:
        raise ValueError(
            f"{what} windows are ({c}, {length}), model expects "
            f"({model_config.channels_in}, {model_config.length_in})"
        )
    if dataset.labels.max() >= model_config.num_classes:
        raise ValueError(
            f"{what} labels reach {int(dataset.labels.max())}, model has {model_config.num_classes} classes"
        )


def train(
    dataset: WindowedDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_dataset: WindowedDataset | None = None,
    checkpoint_path=None,
    kappa_fn=None,
) -> tuple[MultiExitNet, TrainReport]:
    """Train a fresh network on `dataset` and return it with the per-epoch
    report. `kappa_fn(epoch) -> kappa` overrides the cosine schedule (used
    to probe gate behavior); the default schedule runs over T = epochs-1
    so the final epoch trains at exactly kappa_max.
    """
    cfg = train_config
    _check_dataset(dataset, model_config, "train")
    if val_dataset is not None:
        _check_dataset(val_dataset, model_config, "validation")
    needs_perturb = cfg.loss.mode in ("cet", "augment_only")
    if needs_perturb and "mask" in cfg.perturb.enabled:
        if cfg.perturb.mask_length >= model_config.length_in:
            raise ValueError(
                f"mask_length {cfg.perturb.mask_length} must be below window length {model_config.length_in}"
            )

    net = build_network(model_config)
    adam = AdamState(net)
    report = TrainReport()
    n = dataset.windows.shape[0]
    n_exits = net.num_exits
    windows = np.ascontiguousarray(dataset.windows, dtype=net.dtype)
    labels = dataset.labels

    for epoch in range(cfg.epochs):
        if kappa_fn is not None:
            kappa = float(kappa_fn(epoch))
        else:
            kappa = kappa_schedule(epoch, cfg.epochs - 1, cfg.loss.kappa_min, cfg.loss.kappa_max)
        order = _shuffle_rng(cfg.seed, epoch).permutation(n)
        sums = {
            "total": 0.0,
            "task": np.zeros(n_exits),
            "cons": np.zeros(n_exits),
            "retained": np.zeros(n_exits),
        }
        n_steps = 0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            xb = windows[idx]
            yb = labels[idx]
            xp = None
            if needs_perturb:
                xp = random_perturb(xb, cfg.perturb, seed=cfg.seed, epoch=epoch, indices=idx)
            with Tape():
                clean_logits = net.forward_all_exits(
                    xb, training=True, rng=_dropout_rng(cfg.seed, epoch, step, 0)
                )
                pert_logits = None
                if needs_perturb:
                    pert_logits = net.forward_all_exits(
                        xp, training=True, rng=_dropout_rng(cfg.seed, epoch, step, 1)
                    )
                bd = total_loss(clean_logits, pert_logits, yb, cfg.loss, net.l2_penalty(), kappa)
                backward(bd.total)
            adam_step(net, adam, cfg.learning_rate)
            sums["total"] += bd.total_value
            sums["task"] += bd.task_values
            sums["cons"] += bd.consistency_values
            sums["retained"] += bd.retained_fraction
            n_steps += 1

        record = EpochRecord(
            epoch=epoch,
            kappa=kappa,
            total=sums["total"] / n_steps,
            task=list(sums["task"] / n_steps),
            consistency=list(sums["cons"] / n_steps),
            retained=list(sums["retained"] / n_steps),
        )
        last = epoch == cfg.epochs - 1
        if last or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0):
            record.train_accuracy = per_exit_accuracy(net, windows, labels, cfg.batch_size)
            if val_dataset is not None:
                record.val_accuracy = per_exit_accuracy(
                    net, val_dataset.windows, val_dataset.labels, cfg.batch_size
                )
        report.rows.append(record)

    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path, class_names=dataset.meta.class_names)
    return net, report


def per_exit_accuracy(net: MultiExitNet, windows: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> list[float]:
    """Plain argmax accuracy of every exit, batched, inference mode."""
    n = windows.shape[0]
    correct = np.zeros(net.num_exits, dtype=np.int64)
    for lo in range(0, n, batch_size):
        xb = windows[lo : lo + batch_size]
        yb = labels[lo : lo + batch_size]
        for e, logits in enumerate(net.forward_all_exits(xb, training=False)):
            correct[e] += int((logits.data.argmax(axis=1) == yb).sum())
    return [c / n for c in correct.tolist()]


@dataclass
class EvalBundle:
    """Everything evaluate() derives from one all-exit probability cache."""

    per_exit: list[dict]
    sweep: list[metrics.CurvePoint]
    confidence: np.ndarray
    probs: np.ndarray
    entropies: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None


def evaluate(net: MultiExitNet, dataset: WindowedDataset, phi_grid) -> EvalBundle:
    """Per-exit metrics plus an early-exit sweep over phi_grid.

    All numbers derive from one per-example all-exit probability cache, so
    the phi = 0 sweep row and the plain last-exit row are the same
    computation, not merely close.
    """
    _check_dataset(dataset, net.config, "eval")
    probs = earlyexit.all_exit_probs(net, dataset.windows)
    ent = earlyexit.exit_entropies(probs)
    labels = dataset.labels
    k = net.config.num_classes

    per_exit = []
    for e in range(net.num_exits):
        preds = probs[:, e, :].argmax(axis=1)
        cm = metrics.confusion_matrix(labels, preds, k)
        per_exit.append(
            {
                "exit": e + 1,
                "accuracy": metrics.accuracy(cm),
                "macro_f1": metrics.macro_f1(cm),
                "kappa": metrics.cohens_kappa(cm),
            }
        )

    sweep = earlyexit.sweep_from_cache(probs, ent, labels, phi_grid)
    confidence = earlyexit.per_class_confidence(probs, labels, k)
    return EvalBundle(
        per_exit=per_exit,
        sweep=sweep,
        confidence=confidence,
        probs=probs,
        entropies=ent,
        labels=labels,
        class_names=dataset.meta.class_names,
    )
