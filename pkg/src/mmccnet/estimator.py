"""scikit-learn style wrapper around model construction, training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SamplePair
from .metrics import basic_metrics, confusion_counts
from .model import ModelConfig, build_mmcc_net
from .training import TrainPlan, Trainer
from .validation import check_images, check_masks


class MmccSegmenter(BaseEstimator):
    """Binary polyp segmenter.

    ``X`` is an image batch ``(N, 3, H, W)`` in [0, 1] and ``y`` the binary
    masks ``(N, 1, H, W)``. With ``validation_fraction > 0`` the trailing
    share of ``X`` drives early stopping.
    """

    def __init__(
        self,
        variant="network4",
        base_channels=16,
        enhancer_channels=8,
        loss="joint",
        optimizer="adam",
        lr=1e-4,
        epochs=60,
        batch_size=8,
        patience=10,
        validation_fraction=0.0,
        threshold=0.5,
        random_state=0,
    ):
        self.variant = variant
        self.base_channels = base_channels
        self.enhancer_channels = enhancer_channels
        self.loss = loss
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        config = ModelConfig.for_variant(
            self.variant,
            ModelConfig(
                base_channels=self.base_channels,
                enhancer_channels=self.enhancer_channels,
                input_size=X.shape[2:],
                init_seed=self.random_state,
            ),
        )
        plan = TrainPlan(
            epochs=self.epochs, batch_size=self.batch_size, patience=self.patience,
            loss=self.loss, optimizer=self.optimizer, lr=self.lr, seed=self.random_state,
            threshold=self.threshold,
        )
        samples = [SamplePair(img, m, f"x{i}") for i, (img, m) in enumerate(zip(X, y))]
        n_val = int(round(len(samples) * self.validation_fraction))
        train, val = samples[: len(samples) - n_val], samples[len(samples) - n_val :]
        self.model_ = build_mmcc_net(config)
        self.train_log_ = Trainer(self.model_, plan).fit(train, val)
        self.n_parameters_ = self.model_.count_parameters().total
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_images(X), self.batch_size)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean per-image Dice coefficient."""
        probs = self.predict_proba(X)
        y = check_masks(y, probs)
        return float(np.mean([basic_metrics(confusion_counts(p, m, self.threshold))["dice"] for p, m in zip(probs, y)]))
