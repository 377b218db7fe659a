"""scikit-learn style wrapper around the encoder."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .metrics import two_way_identification
from .trainer import fit_network

_CONFIG_KEYS = {f.name for f in fields(TrainConfig)} - {"data", "out"}


class FPEDRegressor(BaseEstimator, RegressorMixin):
    """Assembled features ``X (n, L)`` -> ``[text | image]`` targets ``(n, 2D)``.

    Args:
        network_labels: per-position network label in 1..7, length ``L``.
            Defaults to seven equal contiguous segments.
        config: base :class:`TrainConfig`; keyword overrides go in ``params``.
        params: individual config fields, e.g. ``epochs=50`` or ``mode="uniform"``.

    ``score`` is the mean of the text and image two-way identification
    accuracies, so higher is better as scikit-learn expects.
    """

    def __init__(self, network_labels=None, epochs: int = 100, batch_size: int = 32, lr: float = 1e-3,
                 mode: str = "moe", seed: int = 0, params: dict | None = None):
        self.network_labels = network_labels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.mode = mode
        self.seed = seed
        self.params = params

    def _config(self, n_features: int) -> TrainConfig:
        extra = dict(self.params or {})
        unknown = set(extra) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, mode=self.mode,
                           seed=self.seed, n_features=n_features, **extra).validate()

    def fit(self, X, Y):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[1] % 2:
            raise ValueError("Y must be (n, 2D): text targets then image targets")
        labels = self.network_labels
        if labels is None:
            labels = np.repeat(np.arange(1, 8), np.diff(np.linspace(0, X.shape[1], 8).round().astype(int)))
        labels = np.asarray(labels)
        if len(labels) != X.shape[1]:
            raise ValueError(f"network_labels has {len(labels)} entries, X has {X.shape[1]} columns")
        d = Y.shape[1] // 2
        result = fit_network(self._config(X.shape[1]), X, labels, Y[:, :d], Y[:, d:])
        self.model_ = result.model
        self.history_ = result.monitor
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> dict:
        """Per-modality embeddings as a dict of ``(n, D)`` arrays."""
        check_is_fitted(self, "model_")
        return self.model_.predict(np.asarray(X, dtype=np.float64))

    def predict(self, X) -> np.ndarray:
        emb = self.transform(X)
        return np.hstack([emb["text"], emb["image"]])

    def score(self, X, Y, sample_weight=None) -> float:
        pred = self.predict(X)
        Y = np.asarray(Y, dtype=np.float64)
        d = Y.shape[1] // 2
        return 0.5 * (two_way_identification(pred[:, :d], Y[:, :d])
                      + two_way_identification(pred[:, d:], Y[:, d:]))
