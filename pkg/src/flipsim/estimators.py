"""scikit-learn style wrappers around the trainers and the thermometer binarizer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .netsim import Thermometer, evaluate_sweep, predict_logits
from .trainer import TrainConfig, train_lut, train_mlp


class ThermometerEncoder(TransformerMixin, BaseEstimator):
    """Per-feature thermometer bits at uniform or quantile thresholds."""

    def __init__(self, n_thresholds=4, method="quantile"):
        self.n_thresholds = n_thresholds
        self.method = method

    def fit(self, X, y=None):
        X = check_array(X)
        if self.method == "quantile":
            self.thermometer_ = Thermometer.quantile(X, self.n_thresholds)
        elif self.method == "uniform":
            self.thermometer_ = Thermometer.uniform(X, self.n_thresholds)
        else:
            raise ValueError(f"unknown threshold method {self.method!r}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "thermometer_")
        return self.thermometer_.encode(check_array(X))


class _BitClassifier(ClassifierMixin, BaseEstimator):
    """Shared predict/score plumbing; subclasses build ``network_``."""

    def _encode_targets(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        return X, encoded

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return self.network_.forward(check_array(X))

    def predict(self, X):
        idx = predict_logits(self.decision_function(X))
        # rows whose logits are not finite fall back to the first class
        return self.classes_[np.where(idx < 0, 0, idx)]

    def corrupted_accuracy(self, X, y, p_grid, trials=100, seed=0, scope=None):
        """Mean accuracy after random bit flips, one value per BER in ``p_grid``."""
        check_is_fitted(self, "network_")
        X, y = check_X_y(X, y)
        codes = np.searchsorted(self.classes_, y)
        reports = evaluate_sweep(self.network_, (X, codes), p_grid, trials, seed, scope)
        return np.array([r.mean_accuracy for r in reports])


class BitMLPClassifier(_BitClassifier):
    """Dense classifier trained in float64 and stored in ``target`` format."""

    def __init__(self, width=32, depth=2, activation="relu", tau=1.0, epochs=60,
                 learning_rate=0.01, target="fp32", sparsity=0.0, batch_size=32,
                 momentum=0.9, random_state=0):
        self.width = width
        self.depth = depth
        self.activation = activation
        self.tau = tau
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.target = target
        self.sparsity = sparsity
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y):
        X, codes = self._encode_targets(X, y)
        config = TrainConfig(width=self.width, depth=self.depth, activation=self.activation,
                             tau=self.tau, epochs=self.epochs, learning_rate=self.learning_rate,
                             seed=int(self.random_state or 0), target=self.target,
                             sparsity=self.sparsity, batch_size=self.batch_size,
                             momentum=self.momentum)
        if config.target == "lut":
            raise ValueError("use LutClassifier for LUT networks")
        self.network_ = train_mlp((X, codes), config)
        return self


class LutClassifier(_BitClassifier):
    """Layered LUT network with a popcount head, trained by greedy bit flips."""

    def __init__(self, layers=((128, 6), (128, 4)), n_thresholds=16, passes=6,
                 fill="linear", random_state=0):
        self.layers = layers
        self.n_thresholds = n_thresholds
        self.passes = passes
        self.fill = fill
        self.random_state = random_state

    def fit(self, X, y):
        X, codes = self._encode_targets(X, y)
        self.network_ = train_lut((X, codes), self.layers, int(self.random_state or 0),
                                  self.passes, self.n_thresholds, fill=self.fill)
        return self
