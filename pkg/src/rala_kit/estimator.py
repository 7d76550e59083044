"""scikit-learn style wrappers around the attention layer and the backbone."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import trainer
from ._validation import check_images, check_labels, check_tokens
from .analysis import TRACED, RankRecord
from .attention import AttentionConfig, init_mha_weights, multi_head_attention
from .backbone import model_forward, predict_proba as _predict_proba, preset as _preset
from .linalg import DimensionError, numerical_rank, rng


class RankAugmentedAttention(TransformerMixin, BaseEstimator):
    """Multi-head attention layer as a transformer over token matrices.

    ``fit`` only draws the projection weights (seeded by ``random_state``);
    ``transform`` maps ``(N, C)`` or ``(B, N, C)`` tokens to the same shape.

    Parameters
    ----------
    variant : {"rala", "linear_vanilla", "efficient", "softmax"}
    heads : int
        Number of heads; the token width must be divisible by it.
    kernel : {"elu1", "relu", "softmax_rows"}
    phi : {"linear_projection", "identity", "tanh"}
    kv_augment, out_augment, normalize : bool
    init_std : float
        Standard deviation of the truncated-normal projection weights.
    random_state : int
    """

    def __init__(
        self,
        variant="rala",
        heads=1,
        kernel="elu1",
        phi="linear_projection",
        kv_augment=True,
        out_augment=True,
        normalize=True,
        init_std=0.02,
        random_state=0,
    ):
        self.variant = variant
        self.heads = heads
        self.kernel = kernel
        self.phi = phi
        self.kv_augment = kv_augment
        self.out_augment = out_augment
        self.normalize = normalize
        self.init_std = init_std
        self.random_state = random_state

    def _config(self, width):
        if width % self.heads:
            raise DimensionError(f"{width} channels are not divisible by {self.heads} heads")
        return AttentionConfig(
            variant=self.variant, heads=self.heads, head_dim=width // self.heads, kernel=self.kernel,
            phi=self.phi, kv_augment=self.kv_augment, out_augment=self.out_augment, normalize=self.normalize,
        )

    def fit(self, X, y=None):
        X = check_tokens(X)
        self.n_features_in_ = X.shape[-1]
        self.config_ = self._config(self.n_features_in_)
        gen = rng(self.random_state, "estimator.attention")
        self.weights_ = init_mha_weights(self.config_, gen, self.init_std)
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_tokens(X)
        if X.shape[-1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[-1]} channels, fitted on {self.n_features_in_}")
        return multi_head_attention(X, self.config_, self.weights_)

    def rank_trace(self, X, rel_eps=1e-6, head=0):
        """Rank records of the attention intermediates of head ``head`` on ``X`` (N, C)."""
        check_is_fitted(self, "weights_")
        X = check_tokens(X)
        if X.ndim != 2:
            raise DimensionError("rank_trace expects a single (N, C) token matrix")
        captured = {}
        multi_head_attention(X, self.config_, self.weights_, capture=captured)
        return [
            RankRecord.from_report(0, numerical_rank(captured[name][head], rel_eps, name=name))
            for name in TRACED
            if name in captured
        ]


class RAVLTClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier on the rank-augmented linear attention backbone.

    ``X`` holds square RGB images ``(n, H, W, 3)`` whose side is a multiple
    of 32; the backbone is sized from ``preset`` with the number of classes
    and the resolution taken from the training data.
    """

    def __init__(
        self,
        preset="toy",
        epochs=200,
        batch_size=32,
        learning_rate=1e-3,
        weight_decay=0.05,
        warmup_epochs=5,
        target_accuracy=None,
        variant="rala",
        kernel="elu1",
        phi="linear_projection",
        kv_augment=True,
        out_augment=True,
        cpe_enabled=True,
        normalize=True,
        random_state=0,
    ):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.target_accuracy = target_accuracy
        self.variant = variant
        self.kernel = kernel
        self.phi = phi
        self.kv_augment = kv_augment
        self.out_augment = out_augment
        self.cpe_enabled = cpe_enabled
        self.normalize = normalize
        self.random_state = random_state

    def _model_overrides(self):
        return dict(variant=self.variant, kernel=self.kernel, phi=self.phi, kv_augment=self.kv_augment,
                    out_augment=self.out_augment, cpe_enabled=self.cpe_enabled, normalize=self.normalize)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.model_config_ = _preset(self.preset, num_classes=len(self.classes_),
                                     input_resolution=X.shape[1], **self._model_overrides())
        train_config = trainer.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.learning_rate,
            weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs, seed=self.random_state,
            preset=self.preset, n_samples=len(X), n_classes=len(self.classes_),
            target_accuracy=self.target_accuracy,
        )
        weights = trainer.init_weights(self.model_config_, self.random_state)
        self.weights_, self.history_ = trainer.fit_weights(weights, self.model_config_, X, encoded, train_config)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        return model_forward(self._check(X), self.model_config_, self.weights_)

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        return _predict_proba(self._check(X), self.model_config_, self.weights_)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def _check(self, X):
        X = check_images(X)
        if X.shape[1] != self.model_config_.input_resolution:
            raise DimensionError(
                f"images are {X.shape[1]}px, model was fitted at {self.model_config_.input_resolution}px"
            )
        return X

    def save(self, path):
        check_is_fitted(self, "weights_")
        metrics = {"classes": self.classes_.tolist(),
                   "history": [vars(m) for m in self.history_]}
        trainer.save_checkpoint(path, self.model_config_, self.weights_, metrics)
