"""Scikit-learn style estimator wrapping the segmenter and training loop.

The estimator treats each sample as one image: X is (n, H, W, F) feature
arrays (or a list of (H, W, F) arrays of equal shape) and y is (n, H, W)
integer label maps. ``fit`` trains the toy segmenter under the configured
loss mode; ``predict`` returns per-pixel labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .datasets import SynthScene
from .grids import FeatureMap, KernelSpec, LabelGrid
from .losses import HyperParams
from .minimax import MinimaxConfig
from .network import ToySegmenter
from .training import LOSS_MODES, TrainConfig, train

__all__ = ["AAFSegmenter"]


class AAFSegmenter(BaseEstimator):
    """Per-pixel classifier trained with adaptive affinity field losses.

    Parameters mirror the training configuration; see TrainConfig,
    HyperParams and MinimaxConfig for semantics and defaults. After
    fitting, ``model_`` holds the trained network, ``weights_`` the final
    kernel-size weights (adaptive mode only), and ``loss_curve_`` the
    per-iteration loss parts.
    """

    def __init__(
        self,
        loss_mode: str = "unary+aaf",
        kernel_sizes=(3, 5),
        affinity_k: int = 3,
        lambda_: float = 1.0,
        margin: float = 3.0,
        contrastive_margin: float = 0.2,
        kl_eps: float = 1e-6,
        base_lr: float = 0.001,
        iters: int = 400,
        poly_power: float = 0.9,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        w_lr: float = 0.01,
        update_scheme: str = "simultaneous",
        alternating_n: int = 1,
        parametrization: str = "softmax_logits",
        seed: int = 0,
    ):
        self.loss_mode = loss_mode
        self.kernel_sizes = kernel_sizes
        self.affinity_k = affinity_k
        self.lambda_ = lambda_
        self.margin = margin
        self.contrastive_margin = contrastive_margin
        self.kl_eps = kl_eps
        self.base_lr = base_lr
        self.iters = iters
        self.poly_power = poly_power
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.w_lr = w_lr
        self.update_scheme = update_scheme
        self.alternating_n = alternating_n
        self.parametrization = parametrization
        self.seed = seed

    def _validate_xy(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 4:
            raise ValueError(
                f"X must be (n_images, height, width, features), got shape {X.shape}"
            )
        if y.ndim != 3:
            raise ValueError(f"y must be (n_images, height, width), got shape {y.shape}")
        if X.shape[:3] != y.shape:
            raise ValueError(f"X {X.shape[:3]} and y {y.shape} image shapes differ")
        if X.shape[0] == 0:
            raise ValueError("need at least one image")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError(f"y must hold integer class labels, got dtype {y.dtype}")
        if y.min() < 0:
            raise ValueError("labels must be nonnegative")
        return X, y

    def fit(self, X, y):
        """Train on labeled images and return self."""
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}"
            )
        X, y = self._validate_xy(X, y)
        num_classes = int(y.max()) + 1
        if num_classes < 2:
            raise ValueError("y must contain at least two classes")
        scenes = [
            SynthScene(LabelGrid(y[i], num_classes), FeatureMap(X[i]))
            for i in range(X.shape[0])
        ]
        ks = KernelSpec(tuple(self.kernel_sizes))
        hp = HyperParams(
            lambda_=self.lambda_,
            margin=self.margin,
            contrastive_margin=self.contrastive_margin,
            kl_eps=self.kl_eps,
        )
        cfg = TrainConfig(
            base_lr=self.base_lr,
            iters=self.iters,
            poly_power=self.poly_power,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            loss_mode=self.loss_mode,
            affinity_k=self.affinity_k,
        )
        minimax = MinimaxConfig(
            w_lr=self.w_lr,
            update_scheme=self.update_scheme,
            alternating_n=self.alternating_n,
            parametrization=self.parametrization,
        )
        model = ToySegmenter(X.shape[3], num_classes, seed=self.seed)
        result = train(model, scenes, cfg, ks=ks, hp=hp, minimax=minimax)
        self.model_ = result.model
        self.weights_ = result.weights
        self.loss_curve_ = result.loss_curve
        self.n_features_in_ = X.shape[3]
        self.classes_ = np.arange(num_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValueError("this AAFSegmenter instance is not fitted yet")

    def predict(self, X):
        """Per-pixel labels, shape (n_images, height, width)."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[3] != self.n_features_in_:
            raise ValueError(
                f"X must be (n, H, W, {self.n_features_in_}), got shape {X.shape}"
            )
        return np.stack(
            [self.model_.predict(FeatureMap(X[i])).labels for i in range(X.shape[0])]
        )

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape (n_images, height, width, C)."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[3] != self.n_features_in_:
            raise ValueError(
                f"X must be (n, H, W, {self.n_features_in_}), got shape {X.shape}"
            )
        out = []
        for i in range(X.shape[0]):
            _, probs, _ = self.model_.forward(FeatureMap(X[i]))
            out.append(probs.probs)
        return np.stack(out)

    def score(self, X, y):
        """Mean pixel accuracy over the given images."""
        preds = self.predict(X)
        y = np.asarray(y)
        if preds.shape != y.shape:
            raise ValueError(f"y shape {y.shape} does not match predictions {preds.shape}")
        return float((preds == y).mean())
