"""scikit-learn style wrapper around the adapted patch forecaster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import preprocess as pp
from .data import PM25
from .model import ModelConfig, build, predict_normalized
from .train import TrainRun, fit_arrays


class PatchLoraForecaster(RegressorMixin, BaseEstimator):
    """Direct multi-horizon forecaster over lookback windows.

    ``X`` has shape [n, T, d] with the forecast target in column ``0``;
    ``y`` has shape [n, horizon] in the target's own units. The last
    ``validation_fraction`` of the (chronologically ordered) samples drives
    early stopping. Predictions come back in the target's units.
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=4, d_ff=128, dropout=0.2, patch_len=24, stride=4,
                 rank=32, alpha=32.0, init_std=0.02, use_lora=True, train_pos_base=True, causal_mask=True,
                 epochs=10, batch_size=16, lr=1e-4, patience=3, validation_fraction=0.1, seed=0,
                 backbone=None):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.patch_len = patch_len
        self.stride = stride
        self.rank = rank
        self.alpha = alpha
        self.init_std = init_std
        self.use_lora = use_lora
        self.train_pos_base = train_pos_base
        self.causal_mask = causal_mask
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.backbone = backbone

    def _check_X(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"X must have shape [n_samples, lookback, n_vars], got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        n, T, d = X.shape
        cfg = ModelConfig(
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
            dropout=self.dropout, lookback=T, patch_len=min(self.patch_len, T), stride=self.stride,
            n_vars=d, horizon=y.shape[1], rank=self.rank, alpha=self.alpha, init_std=self.init_std,
            use_lora=self.use_lora, train_pos_base=self.train_pos_base, causal_mask=self.causal_mask,
            seed=self.seed,
        )
        n_val = int(round(self.validation_fraction * n))
        if n_val >= n:
            raise ValueError("validation split would leave no training samples")
        cut = n - n_val
        self.bundle_ = build(cfg, backbone=self.backbone)
        run = TrainRun(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, patience=self.patience,
                       seed=self.seed)
        fit_arrays(self.bundle_, run, X[:cut], y[:cut], X[cut:] if n_val else None, y[cut:] if n_val else None)
        self.config_ = cfg
        self.history_ = run.history
        self.best_epoch_ = run.best_epoch
        self.n_features_in_ = d
        self.horizon_ = y.shape[1]
        return self

    def predict_normalized(self, X):
        check_is_fitted(self, "bundle_")
        X = self._check_X(X)
        if X.shape[1:] != (self.config_.lookback, self.n_features_in_):
            raise ValueError(f"X windows must be [{self.config_.lookback}, {self.n_features_in_}], got {X.shape[1:]}")
        return predict_normalized(self.bundle_, X)

    def predict(self, X):
        pred, stats = self.predict_normalized(X)
        return pp.denormalize_pm25(pred, stats.mu, stats.sigma, PM25)
