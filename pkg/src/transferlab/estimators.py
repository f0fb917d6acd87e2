"""scikit-learn style wrappers over the functional core.

``LeNetClassifier`` trains and serves a checkpoint through ``fit``/``predict``;
``AdversarialTransformer`` turns clean images into adversarial ones with
``transform``.  Images may be given flat ``(n, C*H*W)`` or shaped ``(n, C, H, W)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .attacks import TABLE1, AttackConfig, generate
from .data import LabeledDataset
from .model import Architecture, Checkpoint, forward, init_checkpoint, lenet5
from .trainer import TrainConfig, train

__all__ = ["check_images", "LeNetClassifier", "AdversarialTransformer"]


def check_images(X, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Validate pixel data and return a float32 ``(n, C, H, W)`` array with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    size = int(np.prod(input_shape))
    if X.ndim == 2 and X.shape[1] == size:
        X = X.reshape((-1, *input_shape))
    if X.shape[1:] != tuple(input_shape):
        raise ValueError(f"expected images of shape {input_shape} or {size} flat features, got {X.shape[1:]}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return np.ascontiguousarray(X)


class LeNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with SGD + momentum and a step learning-rate schedule."""

    def __init__(
        self,
        architecture: Architecture | None = None,
        epochs: int = 10,
        base_lr: float = 0.01,
        decay_points: tuple[int, ...] = (5, 7, 9),
        decay_factor: float = 10.0,
        batch_size: int = 64,
        momentum: float = 0.9,
        random_state: int = 0,
    ):
        self.architecture = architecture
        self.epochs = epochs
        self.base_lr = base_lr
        self.decay_points = decay_points
        self.decay_factor = decay_factor
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def _arch(self) -> Architecture:
        return self.architecture if self.architecture is not None else lenet5()

    def fit(self, X, y):
        arch = self._arch()
        X = check_images(X, arch.input_shape)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) > arch.output_shape[0]:
            raise ValueError(f"{len(self.classes_)} classes exceed the network's {arch.output_shape[0]} outputs")
        config = TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            decay_points=tuple(self.decay_points),
            decay_factor=self.decay_factor,
            batch_size=self.batch_size,
            momentum=self.momentum,
            seed=self.random_state,
        )
        ckpt = init_checkpoint(arch, seed=self.random_state)
        result = train(ckpt, LabeledDataset(X, encoded.astype(np.int64)), config)
        self.checkpoint_ = result.checkpoint
        self.log_ = result.log
        self.n_features_in_ = int(np.prod(arch.input_shape))
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> LeNetClassifier:
        """Wrap an already trained checkpoint; classes are the output indices."""
        clf = cls(architecture=checkpoint.architecture)
        clf.checkpoint_ = checkpoint
        clf.classes_ = np.arange(checkpoint.architecture.output_shape[0])
        clf.n_features_in_ = int(np.prod(checkpoint.architecture.input_shape))
        clf.log_ = []
        return clf

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        X = check_images(X, self.checkpoint_.architecture.input_shape)
        return forward(self.checkpoint_, X)[:, : len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class AdversarialTransformer(TransformerMixin, BaseEstimator):
    """Replace images by adversarial versions crafted on ``checkpoint``.

    ``epsilon`` and ``iterations`` default to the per-network table for
    ``network``.  Without labels, the model's own predictions are attacked.
    """

    def __init__(
        self,
        checkpoint: Checkpoint | None = None,
        method: str = "ifgsm",
        epsilon: float | None = None,
        iterations: int | None = None,
        network: str = "lenet5",
    ):
        self.checkpoint = checkpoint
        self.method = method
        self.epsilon = epsilon
        self.iterations = iterations
        self.network = network

    def attack_config(self) -> AttackConfig:
        eps, iters = TABLE1.get(self.network, {}).get(self.method, (None, 1))
        eps = self.epsilon if self.epsilon is not None else eps
        if eps is None:
            raise ValueError(f"no default epsilon for {self.method} on {self.network}")
        return AttackConfig(self.method, eps, self.iterations or iters)

    def fit(self, X, y=None):
        if self.checkpoint is None:
            raise ValueError("AdversarialTransformer needs a checkpoint")
        self.config_ = self.attack_config()
        check_images(X, self.checkpoint.architecture.input_shape)
        self.n_features_in_ = int(np.prod(self.checkpoint.architecture.input_shape))
        return self

    def transform(self, X, y=None) -> np.ndarray:
        check_is_fitted(self, "config_")
        shape = np.shape(X)
        images = check_images(X, self.checkpoint.architecture.input_shape)
        if y is None:
            y = np.argmax(forward(self.checkpoint, images), axis=1)
        self.batch_ = generate(self.checkpoint, images, np.asarray(y, dtype=np.int64), self.config_)
        return self.batch_.adversarial.reshape(shape)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
