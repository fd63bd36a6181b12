"""Segmentation quality metrics: pixel mIoU, instance-weighted mIoU, and
boundary precision/recall/f-measure.

Instance-weighted mIoU averages per-image class IoU with weights equal to
the number of ground-truth connected components (4-connectivity) of that
class in the image, so classes that appear as many small instances count
accordingly. Boundary scoring matches predicted and ground-truth boundary
pixels greedily one-to-one within a Chebyshev distance tolerance.

All functions are pure; dataset-level numbers come from summing counts
(confusion matrices, match counts) across images before dividing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grids import LabelGrid

__all__ = [
    "confusion_matrix",
    "miou",
    "miou_from_confusion",
    "pixel_accuracy",
    "instance_miou",
    "boundary_map",
    "boundary_match_counts",
    "boundary_prf",
    "boundary_prf_per_class",
    "BoundaryCounts",
]


def _check_pair(pred: LabelGrid, gt: LabelGrid) -> None:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError(
            f"prediction {pred.height}x{pred.width} does not match "
            f"ground truth {gt.height}x{gt.width}"
        )
    if pred.num_classes != gt.num_classes:
        raise ValueError(
            f"prediction has {pred.num_classes} classes, "
            f"ground truth has {gt.num_classes}"
        )


def _as_sequences(pred, gt):
    preds = [pred] if isinstance(pred, LabelGrid) else list(pred)
    gts = [gt] if isinstance(gt, LabelGrid) else list(gt)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("need at least one image")
    for p, g in zip(preds, gts):
        _check_pair(p, g)
    return preds, gts


def confusion_matrix(pred: LabelGrid, gt: LabelGrid, ignore_class=None) -> np.ndarray:
    """C x C counts; entry [a, b] = pixels with ground truth a predicted b."""
    _check_pair(pred, gt)
    c = gt.num_classes
    g = gt.labels.reshape(-1).astype(np.int64)
    p = pred.labels.reshape(-1).astype(np.int64)
    if ignore_class is not None:
        keep = g != int(ignore_class)
        g, p = g[keep], p[keep]
    return np.bincount(g * c + p, minlength=c * c).reshape(c, c)


def miou_from_confusion(cm: np.ndarray, ignore_class=None):
    """(per-class IoU with NaN for excluded classes, mean over the rest)."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    ious = np.full(cm.shape[0], np.nan)
    present = denom > 0
    if ignore_class is not None:
        present[int(ignore_class)] = False
    np.divide(tp, denom, out=ious, where=present)
    mean = float(np.nanmean(ious[present])) if present.any() else float("nan")
    return ious, mean


def miou(pred, gt, ignore_class=None):
    """Pixel mIoU; classes absent from both prediction and truth are excluded.

    Accepts single grids or matching sequences (summed confusion).
    """
    preds, gts = _as_sequences(pred, gt)
    cm = sum(confusion_matrix(p, g, ignore_class) for p, g in zip(preds, gts))
    return miou_from_confusion(cm, ignore_class)


def pixel_accuracy(pred, gt, ignore_class=None) -> float:
    preds, gts = _as_sequences(pred, gt)
    cm = sum(confusion_matrix(p, g, ignore_class) for p, g in zip(preds, gts))
    total = cm.sum()
    return float(np.diag(cm).sum() / total) if total else float("nan")


def instance_miou(pred, gt, ignore_class=None):
    """Instance-weighted per-class IoU across one or more images.

    For class c and image x, the per-image IoU U is weighted by the number
    n of ground-truth 4-connected components of c in x:
    score_c = sum(n * U) / sum(n). Classes with no ground-truth instance
    anywhere are excluded from the mean.
    """
    preds, gts = _as_sequences(pred, gt)
    c = gts[0].num_classes
    num = np.zeros(c)
    den = np.zeros(c)
    for p, g in zip(preds, gts):
        cm = confusion_matrix(p, g)
        tp = np.diag(cm).astype(np.float64)
        union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
        for cls in range(c):
            if ignore_class is not None and cls == int(ignore_class):
                continue
            _, n_inst = ndimage.label(g.labels == cls)
            if n_inst == 0:
                continue
            u = tp[cls] / union[cls]  # union >= gt pixels > 0 here
            num[cls] += n_inst * u
            den[cls] += n_inst
    scores = np.full(c, np.nan)
    np.divide(num, den, out=scores, where=den > 0)
    mean = float(np.nanmean(scores[den > 0])) if (den > 0).any() else float("nan")
    return scores, mean


def boundary_map(g: LabelGrid) -> np.ndarray:
    """True where a pixel has a 4-neighbor with a different label."""
    labels = g.labels
    out = np.zeros(labels.shape, dtype=bool)
    vert = labels[:-1, :] != labels[1:, :]
    out[:-1, :] |= vert
    out[1:, :] |= vert
    horiz = labels[:, :-1] != labels[:, 1:]
    out[:, :-1] |= horiz
    out[:, 1:] |= horiz
    return out


def _adjacency_mask(g: LabelGrid, cls: int) -> np.ndarray:
    """Pixels labeled cls or 4-adjacent to a pixel labeled cls."""
    m = g.labels == cls
    out = m.copy()
    out[:-1, :] |= m[1:, :]
    out[1:, :] |= m[:-1, :]
    out[:, :-1] |= m[:, 1:]
    out[:, 1:] |= m[:, :-1]
    return out


def _match_offsets(tol: int):
    offs = [
        (dy, dx)
        for dy in range(-tol, tol + 1)
        for dx in range(-tol, tol + 1)
    ]
    offs.sort(key=lambda o: (max(abs(o[0]), abs(o[1])), o[0], o[1]))
    return offs


@dataclass(frozen=True)
class BoundaryCounts:
    """Raw match counts, summable across images for micro-averaged P/R/F."""

    matched: int
    n_pred: int
    n_gt: int

    def __add__(self, other: "BoundaryCounts") -> "BoundaryCounts":
        return BoundaryCounts(
            self.matched + other.matched,
            self.n_pred + other.n_pred,
            self.n_gt + other.n_gt,
        )

    def precision(self) -> float:
        return self.matched / self.n_pred if self.n_pred else 1.0

    def recall(self) -> float:
        return self.matched / self.n_gt if self.n_gt else 1.0

    def prf(self):
        p, r = self.precision(), self.recall()
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return p, r, f


def _greedy_match(pred_map: np.ndarray, gt_map: np.ndarray, tol: int) -> BoundaryCounts:
    h, w = gt_map.shape
    unmatched = gt_map.copy()
    offsets = _match_offsets(tol)
    matched = 0
    for y, x in zip(*np.nonzero(pred_map)):
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and unmatched[ny, nx]:
                unmatched[ny, nx] = False
                matched += 1
                break
    return BoundaryCounts(matched, int(pred_map.sum()), int(gt_map.sum()))


def boundary_match_counts(
    pred: LabelGrid, gt: LabelGrid, tol: int = 1, ignore_class=None, restrict_class=None
) -> BoundaryCounts:
    """Greedy one-to-one Chebyshev matching of boundary pixels.

    Predicted pixels are visited in row-major order and claim the nearest
    unmatched ground-truth boundary pixel within the tolerance (ties
    broken row-major). ``restrict_class`` keeps only boundary pixels
    adjacent to that class in the respective label map.
    """
    _check_pair(pred, gt)
    if tol < 0:
        raise ValueError(f"tol must be >= 0, got {tol}")
    pred_map = boundary_map(pred)
    gt_map = boundary_map(gt)
    if ignore_class is not None:
        pred_map &= pred.labels != int(ignore_class)
        gt_map &= gt.labels != int(ignore_class)
    if restrict_class is not None:
        pred_map &= _adjacency_mask(pred, int(restrict_class))
        gt_map &= _adjacency_mask(gt, int(restrict_class))
    return _greedy_match(pred_map, gt_map, tol)


def boundary_prf(pred, gt, tol: int = 1, ignore_class=None):
    """(precision, recall, f-measure) of boundary pixels within tolerance.

    Accepts single grids or sequences; sequences are micro-averaged by
    summing match counts. Two empty boundary sets score 1/1/1.
    """
    preds, gts = _as_sequences(pred, gt)
    counts = BoundaryCounts(0, 0, 0)
    for p, g in zip(preds, gts):
        counts = counts + boundary_match_counts(p, g, tol, ignore_class)
    return counts.prf()


def boundary_prf_per_class(pred, gt, tol: int = 1):
    """Per-class (precision, recall, f) restricted to class-adjacent pixels."""
    preds, gts = _as_sequences(pred, gt)
    c = gts[0].num_classes
    out = np.zeros((c, 3))
    for cls in range(c):
        counts = BoundaryCounts(0, 0, 0)
        for p, g in zip(preds, gts):
            counts = counts + boundary_match_counts(p, g, tol, restrict_class=cls)
        out[cls] = counts.prf()
    return out
