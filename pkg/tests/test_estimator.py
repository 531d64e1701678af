"""Sklearn-facade behavior: fit/predict contracts, params, exit gating."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cetx.data import generate_synthetic
from cetx.estimator import ConsistentExitClassifier

NAMES = np.array(["sit", "stand", "walk"])

EST_KW = dict(
    epochs=30,
    batch_size=8,
    learning_rate=3e-3,
    mode="exit_wise",
    filters=(4, 6),
    hidden_units=8,
    dropout=0.0,
    mask_length=8,
    random_state=0,
)


@pytest.fixture(scope="module")
def windows():
    ds = generate_synthetic(
        num_classes=3, channels=2, length=32, per_class=8, groups=4,
        noise_std=0.05, seed=7,
    )
    return ds.windows, NAMES[ds.labels], ds.groups


@pytest.fixture(scope="module")
def fitted(windows):
    X, y, groups = windows
    return ConsistentExitClassifier(**EST_KW).fit(X, y, groups=groups)


class TestFit:
    def test_returns_self_with_fitted_attributes(self, windows):
        X, y, groups = windows
        est = ConsistentExitClassifier(**EST_KW)
        assert est.fit(X, y, groups=groups) is est
        for attr in ("classes_", "net_", "report_", "channel_means_", "config_"):
            assert hasattr(est, attr)
        assert est.channel_means_.shape == (2,)
        assert len(est.report_.rows) == EST_KW["epochs"]

    def test_classes_sorted_unique(self, fitted):
        assert list(fitted.classes_) == ["sit", "stand", "walk"]

    def test_integer_labels(self, windows):
        X, y, _ = windows
        y_int = np.searchsorted(NAMES, y) + 10
        est = ConsistentExitClassifier(**EST_KW).fit(X, y_int)
        assert list(est.classes_) == [10, 11, 12]
        preds = est.predict(X[:5])
        assert set(preds) <= {10, 11, 12}

    def test_normalize_off(self, windows):
        X, y, _ = windows
        est = ConsistentExitClassifier(**{**EST_KW, "epochs": 2, "normalize": False})
        est.fit(X, y)
        assert est.channel_means_ is None
        assert est.predict(X).shape == (len(X),)


class TestFitValidation:
    def test_rejects_2d_input(self, windows):
        X, y, _ = windows
        with pytest.raises(ValueError, match="3-D"):
            ConsistentExitClassifier(**EST_KW).fit(X[:, 0, :], y)

    def test_rejects_empty(self, windows):
        X, y, _ = windows
        with pytest.raises(ValueError, match="empty"):
            ConsistentExitClassifier(**EST_KW).fit(X[:0], y[:0])

    def test_rejects_label_length_mismatch(self, windows):
        X, y, _ = windows
        with pytest.raises(ValueError, match="y must be 1-D"):
            ConsistentExitClassifier(**EST_KW).fit(X, y[:-1])

    def test_rejects_single_class(self, windows):
        X, y, _ = windows
        with pytest.raises(ValueError, match="at least 2 classes"):
            ConsistentExitClassifier(**EST_KW).fit(X, np.full(len(X), "sit"))

    def test_rejects_bad_groups_shape(self, windows):
        X, y, _ = windows
        with pytest.raises(ValueError, match="groups"):
            ConsistentExitClassifier(**EST_KW).fit(X, y, groups=np.zeros(3))

    def test_rejects_empty_filters(self, windows):
        X, y, _ = windows
        with pytest.raises(ValueError, match="filters"):
            ConsistentExitClassifier(**{**EST_KW, "filters": ()}).fit(X, y)


class TestPredict:
    def test_learns_training_set(self, fitted, windows):
        X, y, _ = windows
        assert fitted.score(X, y) >= 0.9

    def test_predict_proba_simplex(self, fitted, windows):
        X, _, _ = windows
        proba = fitted.predict_proba(X)
        assert proba.shape == (len(X), 3)
        assert np.all(proba >= 0.0)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)

    def test_predict_matches_proba_argmax(self, fitted, windows):
        X, _, _ = windows
        preds = fitted.predict(X)
        proba = fitted.predict_proba(X)
        np.testing.assert_array_equal(preds, fitted.classes_[proba.argmax(axis=1)])

    def test_predictions_drawn_from_classes(self, fitted, windows):
        X, _, _ = windows
        assert set(fitted.predict(X)) <= set(fitted.classes_)

    def test_not_fitted_error(self, windows):
        X, _, _ = windows
        est = ConsistentExitClassifier(**EST_KW)
        with pytest.raises(NotFittedError, match="fit"):
            est.predict(X)
        with pytest.raises(NotFittedError):
            est.predict_proba(X)

    def test_rejects_wrong_window_shape(self, fitted, windows):
        X, _, _ = windows
        with pytest.raises(ValueError, match="was fit on"):
            fitted.predict(X[:, :, :16])
        with pytest.raises(ValueError, match="was fit on"):
            fitted.predict(X[:, :1, :])


class TestExitThreshold:
    def test_zero_threshold_runs_to_last_exit(self, fitted, windows):
        X, _, _ = windows
        est = clone(fitted).__class__(**{**EST_KW, "exit_threshold": 0.0})
        # reuse the fitted network instead of retraining
        est.__dict__.update({k: v for k, v in fitted.__dict__.items() if k.endswith("_")})
        est.exit_threshold = 0.0
        _, chosen = est.predict_exits(X)
        assert np.all(chosen == len(fitted.config_.blocks))

    def test_average_exit_monotone_in_threshold(self, fitted, windows):
        X, _, _ = windows
        averages = []
        for phi in (0.0, 0.3, 0.6, 0.9, 1.0):
            fitted.set_params(exit_threshold=phi)
            _, chosen = fitted.predict_exits(X)
            averages.append(chosen.mean())
        fitted.set_params(exit_threshold=0.0)
        assert averages[0] == len(fitted.config_.blocks)
        for earlier, later in zip(averages, averages[1:]):
            assert later <= earlier + 1e-12
        # a loose gate must actually fire early on a confident net
        assert averages[-1] < averages[0]

    def test_gated_proba_comes_from_chosen_exit(self, fitted, windows):
        X, _, _ = windows
        fitted.set_params(exit_threshold=0.7)
        preds, chosen = fitted.predict_exits(X)
        proba = fitted.predict_proba(X)
        fitted.set_params(exit_threshold=0.0)
        assert chosen.min() >= 1
        np.testing.assert_array_equal(preds, fitted.classes_[proba.argmax(axis=1)])


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = ConsistentExitClassifier(**EST_KW)
        params = est.get_params()
        assert params["epochs"] == 30
        assert params["mode"] == "exit_wise"
        est2 = ConsistentExitClassifier().set_params(**params)
        assert est2.get_params() == params

    def test_set_params_updates_single_key(self):
        est = ConsistentExitClassifier(**EST_KW)
        est.set_params(epochs=3, exit_threshold=0.25)
        assert est.epochs == 3
        assert est.exit_threshold == 0.25

    def test_clone_drops_fitted_state(self, fitted):
        fresh = clone(fitted)
        assert fresh.get_params() == fitted.get_params()
        assert not hasattr(fresh, "net_")

    def test_deterministic_under_random_state(self, windows):
        X, y, _ = windows
        a = ConsistentExitClassifier(**{**EST_KW, "epochs": 6}).fit(X, y)
        b = ConsistentExitClassifier(**{**EST_KW, "epochs": 6}).fit(X, y)
        np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))

    def test_random_state_changes_fit(self, windows):
        X, y, _ = windows
        a = ConsistentExitClassifier(**{**EST_KW, "epochs": 6}).fit(X, y)
        c = ConsistentExitClassifier(**{**EST_KW, "epochs": 6, "random_state": 1}).fit(X, y)
        assert not np.array_equal(a.predict_proba(X), c.predict_proba(X))
