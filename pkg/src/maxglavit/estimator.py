"""scikit-learn compatible classifier around a MaxViT-family model."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .dataio import InMemoryDataset
from .model import ModelConfig, build, preset
from .training import TrainConfig, train


class MaxGlaViTClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier taking ``X`` of shape ``[N, C, S, S]`` (normalised float pixels).

    ``preset`` names a model configuration; ``num_classes`` is taken from the
    labels seen in :meth:`fit`. Training follows :class:`TrainConfig`.
    """

    def __init__(self, preset="tiny-test", epochs=50, learning_rate=1e-3, lr_decay_factor=0.8,
                 lr_decay_every_epochs=10, batch_size=16, augment=True, seed=42, config=None):
        self.preset = preset
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every_epochs = lr_decay_every_epochs
        self.batch_size = batch_size
        self.augment = augment
        self.seed = seed
        self.config = config

    def _check_X(self, X, cfg: ModelConfig):
        X = np.asarray(X, dtype=np.float32)
        want = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if X.ndim != 4 or X.shape[1:] != want:
            raise ValueError(f"X must have shape [N, {want[0]}, {want[1]}, {want[2]}], got {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("X contains NaN or infinite values")
        return X

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self.config if self.config is not None else preset(self.preset)
        self.classes_ = unique_labels(y)
        cfg = dataclasses.replace(cfg, num_classes=len(self.classes_))
        X = self._check_X(X, cfg)
        y = np.searchsorted(self.classes_, np.asarray(y))
        if X_val is None:
            X_val, yv = X[:0], y[:0]
        else:
            X_val = self._check_X(X_val, cfg)
            yv = np.searchsorted(self.classes_, np.asarray(y_val))
        tcfg = TrainConfig(learning_rate=self.learning_rate, lr_decay_factor=self.lr_decay_factor,
                           lr_decay_every_epochs=self.lr_decay_every_epochs, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, augment=self.augment)
        self.model_ = build(cfg, seed=self.seed)
        self.history_ = train(self.model_, InMemoryDataset(X, y, X_val, yv), tcfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X, self.model_.config)
        out = [self.model_.predict_proba(X[i:i + 64]) for i in range(0, len(X), 64)]
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
