"""Scikit-learn style facade over the training and inference pipeline.

ConsistentExitClassifier wraps dataset assembly, consistency training, and
entropy-gated prediction behind fit/predict/predict_proba so the model can
sit in sklearn pipelines and model-selection utilities. Inputs are windowed
signals shaped (n_windows, channels, length); this is deliberately not a
2-D tabular estimator and it skips sklearn's tabular input checks.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import earlyexit
from .data import DatasetMeta, WindowedDataset, apply_channel_means, channel_means
from .model import BlockSpec, ExitHeadSpec, ModelConfig
from .objectives import LossConfig
from .perturb import KINDS, PerturbationConfig
from .trainer import TrainConfig, train

__all__ = ["ConsistentExitClassifier"]

_DEFAULT_FILTERS = (8, 16, 24, 32, 64)


class ConsistentExitClassifier(BaseEstimator, ClassifierMixin):
    """Multi-exit 1-D CNN classifier trained with perturbation consistency.

    Parameters mirror the library config surface. `exit_threshold` is the
    normalized-entropy gate used at prediction time: 0 disables early exit
    (every window runs to the last exit), larger values trade accuracy for
    earlier exits. `random_state` seeds initialization, shuffling, dropout,
    and perturbation draws, making fit/predict fully deterministic.

    Fitted attributes: classes_, net_, report_, channel_means_, config_.
    """

    def __init__(
        self,
        epochs: int = 100,
        batch_size: int = 32,
        learning_rate: float = 3e-4,
        mode: str = "cet",
        lam: float = 0.5,
        kappa_min: float = 0.5,
        kappa_max: float = 0.9,
        label_source: str = "pseudo",
        tau: float = 2.0,
        exit_threshold: float = 0.0,
        filters: tuple = _DEFAULT_FILTERS,
        kernel: int = 4,
        pool: int = 4,
        hidden_units: int = 32,
        dropout: float = 0.1,
        l2_rate: float = 1e-4,
        perturbations: tuple = KINDS,
        additive_sigma: float = 0.2,
        multiplicative_sigma: float = 0.2,
        warp_sigma: float = 0.3,
        warp_knots: int = 4,
        mask_length: int = 100,
        normalize: bool = True,
        random_state: int = 0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mode = mode
        self.lam = lam
        self.kappa_min = kappa_min
        self.kappa_max = kappa_max
        self.label_source = label_source
        self.tau = tau
        self.exit_threshold = exit_threshold
        self.filters = filters
        self.kernel = kernel
        self.pool = pool
        self.hidden_units = hidden_units
        self.dropout = dropout
        self.l2_rate = l2_rate
        self.perturbations = perturbations
        self.additive_sigma = additive_sigma
        self.multiplicative_sigma = multiplicative_sigma
        self.warp_sigma = warp_sigma
        self.warp_knots = warp_knots
        self.mask_length = mask_length
        self.normalize = normalize
        self.random_state = random_state

    # -- fitting -------------------------------------------------------------

    def _validate_windows(self, X, fitted_shape=None) -> np.ndarray:
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float32))
        if X.ndim != 3:
            raise ValueError(f"X must be 3-D (n_windows, channels, length), got shape {X.shape}")
        if X.shape[0] == 0:
            raise ValueError("X is empty")
        if fitted_shape is not None and X.shape[1:] != fitted_shape:
            raise ValueError(
                f"X windows are shaped {X.shape[1:]}, the model was fit on {fitted_shape}"
            )
        return X

    def fit(self, X, y, groups=None):
        """Fit on windows X of shape (n_windows, channels, length).

        y holds one label per window; any hashable, orderable label values
        work and are recorded in classes_. `groups` is stored alongside the
        windows (a provenance id per window) but does not affect fitting.
        """
        X = self._validate_windows(X)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"y must be 1-D with {X.shape[0]} entries, got shape {y.shape}")
        self.classes_ = np.unique(y)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least 2 classes to fit")
        y_idx = np.searchsorted(self.classes_, y).astype(np.int64)
        if groups is None:
            groups = np.zeros(X.shape[0], dtype=np.int64)
        else:
            groups = np.asarray(groups, dtype=np.int64)
            if groups.shape != (X.shape[0],):
                raise ValueError(f"groups must be 1-D with {X.shape[0]} entries")

        n, channels, length = X.shape
        meta = DatasetMeta(
            num_classes=int(self.classes_.shape[0]),
            channels=channels,
            window_length=length,
            class_names=[str(c) for c in self.classes_],
        )
        dataset = WindowedDataset(X, y_idx, groups, meta)
        if self.normalize:
            self.channel_means_ = channel_means(dataset)
            dataset = apply_channel_means(dataset, self.channel_means_)
        else:
            self.channel_means_ = None

        filters = tuple(int(f) for f in self.filters)
        if not filters:
            raise ValueError("filters must name at least one block")
        # dropout lands on every second block, matching the stock layout
        blocks = tuple(
            BlockSpec(
                filters=f,
                kernel=self.kernel,
                pool=self.pool,
                dropout_rate=self.dropout if i % 2 == 1 else 0.0,
            )
            for i, f in enumerate(filters)
        )
        self.config_ = ModelConfig(
            channels_in=channels,
            length_in=length,
            num_classes=meta.num_classes,
            blocks=blocks,
            head=ExitHeadSpec(hidden_units=self.hidden_units, num_classes=meta.num_classes),
            l2_rate=self.l2_rate,
            seed=self.random_state,
        )
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            loss=LossConfig(
                lam=self.lam,
                kappa_min=self.kappa_min,
                kappa_max=self.kappa_max,
                label_source=self.label_source,
                tau=self.tau,
                mode=self.mode,
            ),
            perturb=PerturbationConfig(
                additive_sigma=self.additive_sigma,
                multiplicative_sigma=self.multiplicative_sigma,
                warp_sigma=self.warp_sigma,
                warp_knots=self.warp_knots,
                mask_length=self.mask_length,
                enabled=tuple(self.perturbations),
            ),
        )
        self.net_, self.report_ = train(dataset, self.config_, train_cfg)
        return self

    # -- prediction ----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                "this ConsistentExitClassifier is not fitted yet; call fit first"
            )

    def _exit_probs(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Per-window class probabilities at the gated exit, plus the
        1-based exit index each window stopped at."""
        self._check_fitted()
        policy = earlyexit.ExitPolicy(phi=self.exit_threshold)
        shape = (self.config_.channels_in, self.config_.length_in)
        X = self._validate_windows(X, fitted_shape=shape)
        if self.channel_means_ is not None:
            X = X - self.channel_means_.astype(np.float32).reshape(1, -1, 1)
        probs = earlyexit.all_exit_probs(self.net_, X)
        ent = earlyexit.exit_entropies(probs)
        chosen = earlyexit.choose_exits(ent, policy.phi)
        gated = probs[np.arange(probs.shape[0]), chosen - 1]
        return gated, chosen

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities from whichever exit the entropy gate picks,
        columns ordered as classes_."""
        gated, _ = self._exit_probs(X)
        return gated

    def predict(self, X) -> np.ndarray:
        gated, _ = self._exit_probs(X)
        return self.classes_[gated.argmax(axis=1)]

    def predict_exits(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Predictions plus the 1-based exit each window stopped at."""
        gated, chosen = self._exit_probs(X)
        return self.classes_[gated.argmax(axis=1)], chosen
