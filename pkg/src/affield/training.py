"""SGD training loop for the toy segmenter under the different loss modes.

One image per step, cycling the dataset in seeded shuffled order. The
optimizer is SGD with momentum and weight decay under a poly learning
rate schedule lr(t) = base_lr * (1 - t / iters)^power. In the adaptive
mode the kernel-size weights take a gradient-ascent step each iteration
(or every n-th, for alternating updates) from the same loss evaluation
that drives the model step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import SynthScene
from .grids import KernelSpec
from .losses import (
    HyperParams,
    affinity_loss,
    combined_objective,
    contrastive_loss,
    softmax_chain,
    unary_ce,
)
from .minimax import MinimaxConfig, SimplexWeights, ascend_weights
from .network import ToySegmenter

__all__ = ["LOSS_MODES", "TrainConfig", "TrainResult", "TrainingDiverged", "train"]

LOSS_MODES = ("unary", "unary+affinity", "unary+aaf", "unary+contrastive")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    iters: int = 400
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss_mode: str = "unary"
    affinity_k: int = 3  # kernel for the single-k affinity and contrastive modes

    def __post_init__(self):
        if not np.isfinite(self.base_lr) or self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")
        if not np.isfinite(self.poly_power) or self.poly_power <= 0:
            raise ValueError(f"poly_power must be > 0, got {self.poly_power}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not np.isfinite(self.weight_decay) or self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}"
            )
        if self.affinity_k < 3 or self.affinity_k % 2 == 0:
            raise ValueError(f"affinity_k must be an odd integer >= 3, got {self.affinity_k}")


@dataclass
class TrainResult:
    model: ToySegmenter
    loss_curve: list = field(default_factory=list)  # one dict per iteration
    lr_curve: list = field(default_factory=list)
    weights: SimplexWeights | None = None
    weight_trajectory: list = field(default_factory=list)  # (C, 2, K) per step


def poly_lr(base_lr: float, t: int, iters: int, power: float) -> float:
    return base_lr * (1.0 - t / iters) ** power


def train(
    model: ToySegmenter,
    scenes,
    cfg: TrainConfig,
    ks: KernelSpec | None = None,
    hp: HyperParams | None = None,
    minimax: MinimaxConfig | None = None,
    weight_direction: float = 1.0,
) -> TrainResult:
    """Train in place and return the result bundle.

    ``weight_direction`` flips the kernel-weight player: +1 ascends
    (adversarial maximization, the default), -1 descends, which is the
    collapse probe. Deterministic given cfg.seed; iters=0 returns the
    model untouched.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("training needs at least one scene")
    for s in scenes:
        if not isinstance(s, SynthScene):
            raise ValueError(f"expected SynthScene, got {type(s).__name__}")
        if s.gt.num_classes != model.num_classes:
            raise ValueError(
                f"scene has {s.gt.num_classes} classes, model {model.num_classes}"
            )
    hp = hp or HyperParams()
    minimax = minimax or MinimaxConfig()
    if weight_direction not in (1.0, -1.0):
        raise ValueError(f"weight_direction must be +1 or -1, got {weight_direction}")

    w = None
    if cfg.loss_mode == "unary+aaf":
        if ks is None:
            raise ValueError("unary+aaf mode needs a KernelSpec")
        w = SimplexWeights.uniform(model.num_classes, ks)

    result = TrainResult(model=model, weights=w)
    if cfg.iters == 0:
        return result

    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    order = shuffle_rng.permutation(len(scenes))
    cursor = 0
    velocity = {name: np.zeros_like(p) for name, p in model.params().items()}

    for t in range(cfg.iters):
        if cursor == len(order):
            order = shuffle_rng.permutation(len(scenes))
            cursor = 0
        scene = scenes[order[cursor]]
        cursor += 1

        _, probs, embed = model.forward(scene.features)
        grad_embed = None
        if cfg.loss_mode == "unary":
            value, grad_logits = unary_ce(probs, scene.gt, hp)
            parts = {"total": value.total, "unary": value.total}
        elif cfg.loss_mode == "unary+affinity":
            u_val, u_grad = unary_ce(probs, scene.gt, hp)
            a_val, a_grad = affinity_loss(probs, scene.gt, cfg.affinity_k, hp)
            total = u_val.total + hp.lambda_ * a_val.total
            grad_logits = u_grad.array + hp.lambda_ * softmax_chain(
                probs.probs, a_grad.array
            )
            parts = {"total": total, "unary": u_val.total, "affinity": a_val.total}
        elif cfg.loss_mode == "unary+aaf":
            value, grad_logits, grad_w = combined_objective(probs, scene.gt, ks, w, hp)
            parts = {"total": value.total, **value.components}
        else:  # unary+contrastive
            u_val, u_grad = unary_ce(probs, scene.gt, hp)
            c_val, c_grad = contrastive_loss(embed, scene.gt, cfg.affinity_k, hp)
            total = u_val.total + hp.lambda_ * c_val.total
            grad_logits = u_grad.array
            grad_embed = hp.lambda_ * c_grad.array
            parts = {"total": total, "unary": u_val.total, "contrastive": c_val.total}

        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(
                f"non-finite loss {parts['total']} at iteration {t} "
                f"(mode {cfg.loss_mode}, lr {poly_lr(cfg.base_lr, t, cfg.iters, cfg.poly_power):.3e})"
            )

        grads = model.backward(scene.features, grad_logits, grad_embed)
        lr = poly_lr(cfg.base_lr, t, cfg.iters, cfg.poly_power)
        for name, p in model.params().items():
            v = velocity[name]
            v *= cfg.momentum
            v += grads[name] + cfg.weight_decay * p
            p -= lr * v

        if w is not None:
            step_due = (
                minimax.update_scheme == "simultaneous"
                or (t + 1) % minimax.alternating_n == 0
            )
            if step_due:
                w = ascend_weights(w, weight_direction * grad_w.array, minimax)
            result.weight_trajectory.append(w.weights)

        result.loss_curve.append(parts)
        result.lr_curve.append(lr)

    if not model.all_finite():
        raise TrainingDiverged("non-finite parameters after training")
    result.weights = w
    return result
