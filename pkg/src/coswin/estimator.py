"""scikit-learn style wrapper around the model and training loop."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentFlags, Dataset, channel_stats
from .exceptions import DataError
from .model import CoSwinModel, ModelConfig
from .tensor import no_grad
from .training import TrainConfig, train


class CoSwinClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier over [n, H, W, C] (or [n, H, W]) arrays in [0, 1].

    The image size and channel count are taken from ``X`` at fit time, so a
    single estimator works for MNIST-shaped and CIFAR-shaped data as long as
    ``window_size`` and ``patch_size`` tile the grid. Per-channel
    normalisation statistics are estimated from the training set.
    """

    def __init__(self, variant: str = "d", patch_size: int = 2, embed_dim: int = 48,
                 stage_depths: Sequence[int] = (2, 2, 2), num_heads: Sequence[int] = (2, 4, 8),
                 window_size: int = 4, mlp_ratio: float = 4.0, conv_expand_ratio: float = 1.10,
                 gamma_init: float = 0.1, drop_path_max: float = 0.1, epochs: int = 10,
                 batch_size: int = 64, base_lr: float = 1e-3, min_lr: float = 1e-5,
                 warmup_epochs: float = 1.0, weight_decay: float = 0.05,
                 grad_clip_norm: Optional[float] = 5.0, flip: bool = False, crop_pad: int = 0,
                 random_state: int = 0):
        self.variant = variant
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.stage_depths = stage_depths
        self.num_heads = num_heads
        self.window_size = window_size
        self.mlp_ratio = mlp_ratio
        self.conv_expand_ratio = conv_expand_ratio
        self.gamma_init = gamma_init
        self.drop_path_max = drop_path_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.flip = flip
        self.crop_pad = crop_pad
        self.random_state = random_state

    @staticmethod
    def _images(X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
        if X.ndim == 3:
            X = X[..., None]
        if X.ndim != 4:
            raise DataError(f"expected images [n, H, W] or [n, H, W, C], got shape {X.shape}")
        return X

    def _model_config(self, shape, n_classes: int) -> ModelConfig:
        return ModelConfig(
            image_size=shape[:2], in_channels=shape[2], patch_size=self.patch_size,
            embed_dim=self.embed_dim, stage_depths=list(self.stage_depths),
            num_heads=list(self.num_heads), window_size=self.window_size,
            mlp_ratio=self.mlp_ratio, conv_expand_ratio=self.conv_expand_ratio,
            gamma_init=self.gamma_init, drop_path_max=self.drop_path_max,
            num_classes=n_classes, variant=self.variant,
        ).validate()

    def fit(self, X, y):
        X = self._images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise DataError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        self.mean_, self.std_ = channel_stats(X)
        self.std_ = tuple(max(s, 1e-6) for s in self.std_)
        ds = Dataset(X, codes, "array", "train", len(self.classes_), self.mean_, self.std_,
                     flip_safe=self.flip)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                          min_lr=self.min_lr, warmup_epochs=self.warmup_epochs,
                          weight_decay=self.weight_decay, grad_clip_norm=self.grad_clip_norm,
                          seed=self.random_state)
        self.model_ = CoSwinModel(self._model_config(X.shape[1:], len(self.classes_)),
                                  seed=self.random_state)
        result = train(self.model_, ds, cfg, augment=AugmentFlags(self.flip, self.crop_pad))
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _logits(self, X, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._images(X)
        expected = (*self.model_.config.image_size, self.model_.config.in_channels)
        if X.shape[1:] != expected:
            raise DataError(f"images have shape {X.shape[1:]}, fitted on {expected}")
        mean = np.asarray(self.mean_, dtype=np.float32)
        std = np.asarray(self.std_, dtype=np.float32)
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                batch = (X[start:start + batch_size] - mean) / std
                out.append(self.model_(batch, train=False).data)
        return np.concatenate(out, axis=0)

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]


__all__ = ["CoSwinClassifier"]
