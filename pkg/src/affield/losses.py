"""Loss forward values and analytic gradients.

Four losses over per-pixel predictions:

* ``unary_ce``: independent per-pixel cross-entropy (gradient over
  pre-softmax logits).
* ``affinity_loss``: pairwise KL-Bernoulli loss over a k-by-k
  neighborhood. Same-indicator pairs are pulled together (grouping term),
  different-indicator pairs are pushed apart through a margin hinge
  (separating term). Gradient over probabilities.
* ``multiscale_aaf``: the affinity loss aggregated over several kernel
  sizes with per-(class, term) simplex weights; also returns the weight
  gradient for the adversarial max-player.
* ``contrastive_loss``: pairwise squared-distance / hinge loss on unit
  pixel embeddings, a comparator for the affinity loss. Gradient over the
  raw (pre-normalization) vectors.

All pair terms are averaged per (class, kernel, term) over the valid pair
count, so weights compare like with like across kernel sizes. Pair typing
for channel c uses equality of the binary ground-truth indicators, so a
pair of two labels that are both different from c is a non-edge pair in
channel c.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._threads import ordered_map
from .grids import EmbedGrid, KernelSpec, LabelGrid, ProbGrid, make_pairs
from .minimax import TERM_EDGE, TERM_NONEDGE, SimplexWeights

__all__ = [
    "HyperParams",
    "LossValue",
    "LossGrad",
    "kl_bernoulli",
    "unary_ce",
    "affinity_loss",
    "contrastive_loss",
    "multiscale_aaf",
    "combined_objective",
    "softmax_chain",
]


@dataclass(frozen=True)
class HyperParams:
    """Loss hyperparameters.

    lambda_ balances the unary and region terms, margin is the affinity
    hinge in nats, contrastive_margin the squared-distance hinge, and
    kl_eps the probability clamp that keeps the KL finite.
    """

    lambda_: float = 1.0
    margin: float = 3.0
    contrastive_margin: float = 0.2
    kl_eps: float = 1e-6

    def __post_init__(self):
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError(f"lambda_ must be >= 0, got {self.lambda_}")
        if not np.isfinite(self.margin) or self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if not np.isfinite(self.contrastive_margin) or self.contrastive_margin <= 0:
            raise ValueError(
                f"contrastive_margin must be > 0, got {self.contrastive_margin}"
            )
        if not 0 < self.kl_eps <= 1e-3:
            raise ValueError(f"kl_eps must be in (0, 1e-3], got {self.kl_eps}")


@dataclass(frozen=True, eq=False)
class LossValue:
    """A loss total plus its per-(class, kernel, term) decomposition.

    ``per_class_per_kernel`` has shape (C, K, 2) with the term axis indexed
    by TERM_NONEDGE / TERM_EDGE; entries are mean term values over the
    valid pairs counted in ``valid_pair_counts``. Losses without a pair
    decomposition use K = 0. ``components`` carries named scalar parts
    (for curves and reports), e.g. {"unary": ..., "aaf": ...}.
    """

    total: float
    kernel_sizes: tuple
    per_class_per_kernel: np.ndarray
    valid_pair_counts: np.ndarray
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.total):
            raise ValueError(f"loss total is not finite: {self.total}")
        table = np.asarray(self.per_class_per_kernel, dtype=np.float64)
        counts = np.asarray(self.valid_pair_counts, dtype=np.int64)
        if table.shape != counts.shape or table.ndim != 3 or table.shape[2] != 2:
            raise ValueError(
                f"term table shape {table.shape} / counts {counts.shape} invalid"
            )
        if table.shape[1] != len(self.kernel_sizes):
            raise ValueError("kernel axis does not match kernel_sizes")
        if table.size and (not np.isfinite(table).all() or table.min() < 0):
            raise ValueError("term means must be finite and >= 0")
        table = table.copy()
        table.flags.writeable = False
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "per_class_per_kernel", table)
        object.__setattr__(self, "valid_pair_counts", counts)


@dataclass(frozen=True, eq=False)
class LossGrad:
    """Gradient array tagged with what it differentiates.

    ``wrt`` is one of "logits", "probs", "embed_raw", "weights".
    """

    array: np.ndarray
    wrt: str

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError(f"gradient wrt {self.wrt} contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)


def kl_bernoulli(p, q, eps: float = 1e-6):
    """KL divergence D(Ber(p) || Ber(q)) in nats, with clamped inputs.

    Accepts scalars or arrays; broadcasting follows numpy rules.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    pc = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    qc = np.clip(np.asarray(q, dtype=np.float64), eps, 1.0 - eps)
    out = pc * np.log(pc / qc) + (1.0 - pc) * np.log((1.0 - pc) / (1.0 - qc))
    if out.ndim == 0:
        return float(out)
    return out


def _check_same_shape(pred_h, pred_w, pred_c, gt: LabelGrid):
    if (pred_h, pred_w) != (gt.height, gt.width):
        raise ValueError(
            f"prediction {pred_h}x{pred_w} does not match labels {gt.height}x{gt.width}"
        )
    if pred_c != gt.num_classes:
        raise ValueError(
            f"prediction has {pred_c} classes, labels have {gt.num_classes}"
        )


def unary_ce(pred: ProbGrid, gt: LabelGrid, hp: HyperParams | None = None):
    """Mean per-pixel cross-entropy; gradient over pre-softmax logits.

    The logit gradient (softmax - onehot) / n is exact for any softmax
    input producing ``pred``; the clamp only guards the forward log.
    """
    hp = hp or HyperParams()
    _check_same_shape(pred.height, pred.width, pred.num_classes, gt)
    n = pred.height * pred.width
    flat = pred.probs.reshape(n, pred.num_classes)
    labels = gt.labels.reshape(n)
    p_true = flat[np.arange(n), labels]
    total = float(-np.log(np.maximum(p_true, hp.kl_eps)).mean())
    grad = flat.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    value = LossValue(
        total=total,
        kernel_sizes=(),
        per_class_per_kernel=np.zeros((pred.num_classes, 0, 2)),
        valid_pair_counts=np.zeros((pred.num_classes, 0, 2), dtype=np.int64),
        components={"unary": total},
    )
    return value, LossGrad(grad.reshape(pred.probs.shape), "logits")


class _AffinityCore:
    """Per-kernel pair terms plus everything needed to assemble gradients.

    Computing the (P, C) KL table once lets affinity_loss and
    multiscale_aaf share the expensive part and differ only in the
    per-(class, term) coefficients applied at assembly time.
    """

    __slots__ = (
        "k", "i", "j", "same", "active", "dkl_dp", "dkl_dq",
        "sums", "counts", "means",
    )

    def __init__(self, pred: ProbGrid, gt: LabelGrid, k: int, hp: HyperParams):
        pairs = make_pairs(pred.height, pred.width, k)
        self.k = k
        self.i = pairs.i
        self.j = pairs.j
        num_classes = pred.num_classes
        n_pairs = pairs.i.size
        flat = pred.probs.reshape(-1, num_classes)
        labels = gt.labels.reshape(-1)
        eps = hp.kl_eps

        p = flat[pairs.j]  # neighbor, the KL's first argument
        q = flat[pairs.i]  # center
        pc = np.clip(p, eps, 1.0 - eps)
        qc = np.clip(q, eps, 1.0 - eps)
        kl = pc * np.log(pc / qc) + (1.0 - pc) * np.log((1.0 - pc) / (1.0 - qc))

        # same[r, c] == (labels[i]==c) == (labels[j]==c); only the two
        # endpoint classes of a differing pair break indicator equality.
        same = np.ones((n_pairs, num_classes), dtype=bool)
        li = labels[pairs.i]
        lj = labels[pairs.j]
        rows = np.nonzero(li != lj)[0]
        same[rows, li[rows]] = False
        same[rows, lj[rows]] = False
        hinge = hp.margin - kl
        active = ~same & (hinge > 0.0)

        sums = np.empty((num_classes, 2))
        sums[:, TERM_NONEDGE] = np.where(same, kl, 0.0).sum(axis=0)
        sums[:, TERM_EDGE] = np.where(active, hinge, 0.0).sum(axis=0)
        counts = np.empty((num_classes, 2), dtype=np.int64)
        counts[:, TERM_NONEDGE] = same.sum(axis=0)
        counts[:, TERM_EDGE] = n_pairs - counts[:, TERM_NONEDGE]

        # Clamp pass-through masks: inside the clip window the derivative
        # is 1, outside the loss is locally constant in the raw prob.
        open_p = (p > eps) & (p < 1.0 - eps)
        open_q = (q > eps) & (q < 1.0 - eps)
        self.dkl_dp = np.where(open_p, np.log(pc * (1.0 - qc)) - np.log(qc * (1.0 - pc)), 0.0)
        self.dkl_dq = np.where(open_q, (1.0 - pc) / (1.0 - qc) - pc / qc, 0.0)
        self.same = same
        self.active = active
        self.sums = sums
        self.counts = counts
        means = np.zeros_like(sums)
        np.divide(sums, counts, out=means, where=counts > 0)
        self.means = means

    def assemble_grad(self, coeff: np.ndarray, shape) -> np.ndarray:
        """Gradient over probs for per-(class, term) coefficients.

        coeff has shape (C, 2); each pair's KL derivative is scaled by
        coeff[c, term] / count[c, term] with the hinge sign folded in.
        """
        num_classes = coeff.shape[0]
        scale = np.zeros_like(coeff)
        np.divide(coeff, self.counts, out=scale, where=self.counts > 0)
        per_pair = (
            np.where(self.same, scale[:, TERM_NONEDGE], 0.0)
            - np.where(self.active, scale[:, TERM_EDGE], 0.0)
        )
        gp = per_pair * self.dkl_dp
        gq = per_pair * self.dkl_dq
        n = shape[0] * shape[1]
        cols = np.arange(num_classes, dtype=np.int64)
        idx_j = (self.j[:, None] * num_classes + cols).ravel()
        idx_i = (self.i[:, None] * num_classes + cols).ravel()
        grad = np.bincount(idx_j, weights=gp.ravel(), minlength=n * num_classes)
        grad += np.bincount(idx_i, weights=gq.ravel(), minlength=n * num_classes)
        return grad.reshape(shape)


def affinity_loss(pred: ProbGrid, gt: LabelGrid, k: int, hp: HyperParams | None = None):
    """Single-kernel affinity loss; total is the class mean of term means."""
    hp = hp or HyperParams()
    _check_same_shape(pred.height, pred.width, pred.num_classes, gt)
    core = _AffinityCore(pred, gt, k, hp)
    num_classes = pred.num_classes
    total = float(core.means.sum() / num_classes)
    coeff = np.full((num_classes, 2), 1.0 / num_classes)
    grad = core.assemble_grad(coeff, pred.probs.shape)
    value = LossValue(
        total=total,
        kernel_sizes=(k,),
        per_class_per_kernel=core.means[:, None, :],
        valid_pair_counts=core.counts[:, None, :],
        components={"affinity": total},
    )
    return value, LossGrad(grad, "probs")


def multiscale_aaf(
    pred: ProbGrid,
    gt: LabelGrid,
    ks: KernelSpec,
    w: SimplexWeights,
    hp: HyperParams | None = None,
):
    """Adaptive affinity loss: simplex-weighted sum over classes and kernels.

    Returns (value, gradient over probs, gradient over the weights
    themselves). The total sums over classes rather than averaging, so the
    per-class weight vectors each carry full weight in the objective.
    """
    hp = hp or HyperParams()
    _check_same_shape(pred.height, pred.width, pred.num_classes, gt)
    num_classes = pred.num_classes
    if tuple(w.kernel_sizes) != tuple(ks.sizes):
        raise ValueError(
            f"weights cover kernels {w.kernel_sizes}, expected {ks.sizes}"
        )
    if w.num_classes != num_classes:
        raise ValueError(
            f"weights cover {w.num_classes} classes, prediction has {num_classes}"
        )
    wk = w.weights
    if (np.abs(wk.sum(axis=2) - 1.0) > 1e-6).any():
        raise ValueError("weights are off the simplex by more than 1e-6")

    cores = ordered_map(lambda k: _AffinityCore(pred, gt, k, hp), ks.sizes)
    table = np.stack([c.means for c in cores], axis=1)  # (C, K, 2)
    counts = np.stack([c.counts for c in cores], axis=1)
    # weights are indexed (class, term, kernel); the table (class, kernel, term)
    w_ckt = np.transpose(wk, (0, 2, 1))
    total = float((w_ckt * table).sum())
    grad = np.zeros(pred.probs.shape)
    for k_idx, core in enumerate(cores):
        grad += core.assemble_grad(wk[:, :, k_idx], pred.probs.shape)
    grad_w = np.transpose(table, (0, 2, 1)).copy()  # dL/dw[c, term, k]
    value = LossValue(
        total=total,
        kernel_sizes=ks.sizes,
        per_class_per_kernel=table,
        valid_pair_counts=counts,
        components={"aaf": total},
    )
    return value, LossGrad(grad, "probs"), LossGrad(grad_w, "weights")


def contrastive_loss(
    emb: EmbedGrid, gt: LabelGrid, k: int, hp: HyperParams | None = None
):
    """Pairwise embedding loss; gradient over pre-normalization vectors.

    Same-label pairs contribute the squared distance between unit vectors,
    different-label pairs a margin hinge on it. The returned gradient is
    chained through the L2 normalization using the norms recorded at
    construction (pixels normalized from a zero vector get zero gradient).
    """
    hp = hp or HyperParams()
    if (emb.height, emb.width) != (gt.height, gt.width):
        raise ValueError(
            f"embedding {emb.height}x{emb.width} does not match "
            f"labels {gt.height}x{gt.width}"
        )
    pairs = make_pairs(emb.height, emb.width, k)
    flat = emb.vectors.reshape(-1, emb.dim)
    labels = gt.labels.reshape(-1)
    fi = flat[pairs.i]
    fj = flat[pairs.j]
    diff = fj - fi
    d2 = (diff * diff).sum(axis=1)
    same = labels[pairs.i] == labels[pairs.j]
    hinge = hp.contrastive_margin - d2
    active = ~same & (hinge > 0.0)

    sums = np.array([np.where(same, d2, 0.0).sum(), np.where(active, hinge, 0.0).sum()])
    counts = np.array([same.sum(), (~same).sum()], dtype=np.int64)
    means = np.zeros(2)
    np.divide(sums, counts, out=means, where=counts > 0)
    total = float(means.sum())

    # d(d2)/dfj = 2 (fj - fi); same pairs ascend it, active hinges descend.
    per_pair = np.where(same, 1.0 / max(counts[0], 1), 0.0) - np.where(
        active, 1.0 / max(counts[1], 1), 0.0
    )
    gj = (2.0 * per_pair)[:, None] * diff
    n = flat.shape[0]
    grad_unit = np.zeros_like(flat)
    for d in range(emb.dim):
        grad_unit[:, d] = np.bincount(pairs.j, weights=gj[:, d], minlength=n)
        grad_unit[:, d] -= np.bincount(pairs.i, weights=gj[:, d], minlength=n)
    # Through the normalization: project out the radial component, then
    # divide by the source norm (inf for dead pixels, giving zero).
    radial = (grad_unit * flat).sum(axis=1, keepdims=True)
    norms = emb.source_norms.reshape(-1, 1)
    grad_raw = (grad_unit - radial * flat) / norms
    value = LossValue(
        total=total,
        kernel_sizes=(k,),
        per_class_per_kernel=means[None, None, :],
        valid_pair_counts=counts[None, None, :],
        components={"contrastive": total},
    )
    return value, LossGrad(grad_raw.reshape(emb.vectors.shape), "embed_raw")


def softmax_chain(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient over probabilities back through the softmax."""
    inner = (probs * grad_probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def combined_objective(
    pred: ProbGrid,
    gt: LabelGrid,
    ks: KernelSpec,
    w: SimplexWeights,
    hp: HyperParams | None = None,
):
    """Unary cross-entropy plus lambda times the adaptive affinity loss.

    Returns (value, gradient over pre-softmax logits, gradient over
    weights). The affinity gradient over probs is chained through the
    softmax Jacobian at ``pred`` and added to the exact unary logit
    gradient.
    """
    hp = hp or HyperParams()
    unary_value, unary_grad = unary_ce(pred, gt, hp)
    aaf_value, aaf_grad_probs, aaf_grad_w = multiscale_aaf(pred, gt, ks, w, hp)
    total = unary_value.total + hp.lambda_ * aaf_value.total
    grad_logits = unary_grad.array + hp.lambda_ * softmax_chain(
        pred.probs, aaf_grad_probs.array
    )
    grad_w = hp.lambda_ * aaf_grad_w.array
    value = LossValue(
        total=total,
        kernel_sizes=ks.sizes,
        per_class_per_kernel=aaf_value.per_class_per_kernel,
        valid_pair_counts=aaf_value.valid_pair_counts,
        components={"unary": unary_value.total, "aaf": aaf_value.total},
    )
    return value, LossGrad(grad_logits, "logits"), LossGrad(grad_w, "weights")
