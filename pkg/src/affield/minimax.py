"""Adversarial kernel-size weighting: the max-player of the AAF objective.

Weights live on the probability simplex per (class, term) pair, where the
two terms are the grouping (non-edge) and separating (edge) halves of the
affinity loss. The canonical parametrization is a softmax over logits,
which keeps every weight strictly positive; a projected-gradient variant
is kept for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import KernelSpec

__all__ = [
    "TERM_NONEDGE",
    "TERM_EDGE",
    "TERM_NAMES",
    "SimplexWeights",
    "MinimaxConfig",
    "ascend_weights",
    "effective_kernel_size",
    "project_to_simplex",
]

TERM_NONEDGE = 0
TERM_EDGE = 1
TERM_NAMES = ("nonedge", "edge")

# Keeps projected weights strictly interior so they stay representable
# as softmax logits.
_WEIGHT_FLOOR = 1e-12

_PARAMETRIZATIONS = ("softmax_logits", "projected")
_UPDATE_SCHEMES = ("simultaneous", "alternating")


def _term_index(term) -> int:
    if isinstance(term, str):
        try:
            return TERM_NAMES.index(term)
        except ValueError:
            raise ValueError(f"unknown term {term!r}, expected one of {TERM_NAMES}") from None
    t = int(term)
    if t not in (TERM_NONEDGE, TERM_EDGE):
        raise ValueError(f"term index must be 0 (nonedge) or 1 (edge), got {term}")
    return t


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    """Per-(class, term) weight vectors over kernel sizes.

    ``logits`` has shape (num_classes, 2, num_kernels); ``weights`` is its
    softmax over the kernel axis, so each (class, term) vector sums to 1
    with all entries positive.
    """

    kernel_sizes: tuple
    logits: np.ndarray

    def __post_init__(self):
        ks = KernelSpec(tuple(self.kernel_sizes))  # validates sizes
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[1] != 2 or logits.shape[2] != len(ks):
            raise ValueError(
                f"logits must have shape (C, 2, {len(ks)}), got {logits.shape}"
            )
        if logits.shape[0] < 1:
            raise ValueError("need at least one class")
        if not np.isfinite(logits).all():
            raise ValueError("logits contain non-finite values")
        logits = logits.copy()
        logits.flags.writeable = False
        object.__setattr__(self, "kernel_sizes", ks.sizes)
        object.__setattr__(self, "logits", logits)

    @classmethod
    def uniform(cls, num_classes: int, kernel_sizes) -> "SimplexWeights":
        ks = KernelSpec(tuple(kernel_sizes))
        return cls(ks.sizes, np.zeros((num_classes, 2, len(ks.sizes))))

    @classmethod
    def from_weights(cls, weights: np.ndarray, kernel_sizes) -> "SimplexWeights":
        """Build from explicit weights (renormalized, floored to stay interior)."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != 2:
            raise ValueError(f"weights must have shape (C, 2, K), got {w.shape}")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("weights must be finite and nonnegative")
        w = np.maximum(w, _WEIGHT_FLOOR)
        w = w / w.sum(axis=2, keepdims=True)
        return cls(tuple(kernel_sizes), np.log(w))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    @property
    def num_kernels(self) -> int:
        return self.logits.shape[2]

    @property
    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)


@dataclass(frozen=True)
class MinimaxConfig:
    """Settings for the weight-ascent player."""

    w_lr: float = 0.01
    update_scheme: str = "simultaneous"
    alternating_n: int = 1
    parametrization: str = "softmax_logits"

    def __post_init__(self):
        if not np.isfinite(self.w_lr) or self.w_lr <= 0:
            raise ValueError(f"w_lr must be a positive finite real, got {self.w_lr}")
        if self.update_scheme not in _UPDATE_SCHEMES:
            raise ValueError(
                f"update_scheme must be one of {_UPDATE_SCHEMES}, got {self.update_scheme!r}"
            )
        if self.alternating_n < 1:
            raise ValueError(f"alternating_n must be >= 1, got {self.alternating_n}")
        if self.parametrization not in _PARAMETRIZATIONS:
            raise ValueError(
                f"parametrization must be one of {_PARAMETRIZATIONS}, "
                f"got {self.parametrization!r}"
            )


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of the last axis onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, n + 1, dtype=np.float64)
    cond = u - css / idx > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    tau = np.take_along_axis(css, rho[..., None], axis=-1) / (rho + 1.0)[..., None]
    return np.maximum(v - tau, 0.0)


def ascend_weights(
    w: SimplexWeights, grad_w: np.ndarray, cfg: MinimaxConfig
) -> SimplexWeights:
    """One gradient-ascent step on the kernel weights.

    ``grad_w`` is the loss gradient with respect to the weights themselves,
    shape (C, 2, K). The softmax scheme chains it through the softmax
    Jacobian and moves the logits; the projected scheme moves the weights
    directly and projects back onto the simplex. Raises on non-finite
    gradients, leaving the input untouched.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != w.logits.shape:
        raise ValueError(
            f"grad_w shape {grad_w.shape} does not match weights {w.logits.shape}"
        )
    if not np.isfinite(grad_w).all():
        raise ValueError("grad_w contains non-finite values")
    if cfg.parametrization == "softmax_logits":
        wk = w.weights
        inner = (wk * grad_w).sum(axis=2, keepdims=True)
        grad_logits = wk * (grad_w - inner)
        return SimplexWeights(w.kernel_sizes, w.logits + cfg.w_lr * grad_logits)
    moved = w.weights + cfg.w_lr * grad_w
    projected = project_to_simplex(moved)
    return SimplexWeights.from_weights(projected, w.kernel_sizes)


def effective_kernel_size(w: SimplexWeights, ks: KernelSpec, c: int, term) -> float:
    """Weighted mean kernel size for one (class, term) weight vector."""
    if tuple(ks.sizes) != tuple(w.kernel_sizes):
        raise ValueError(
            f"kernel spec {ks.sizes} does not match weights over {w.kernel_sizes}"
        )
    if not 0 <= c < w.num_classes:
        raise ValueError(f"unknown class {c}, have {w.num_classes} classes")
    t = _term_index(term)
    return float(np.dot(w.weights[c, t], np.asarray(w.kernel_sizes, dtype=np.float64)))
