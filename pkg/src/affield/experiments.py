"""Experiment orchestration: run records, evaluation, reports, probes.

A run is deterministic given its config (every RNG hangs off the config
seed through named substreams), and its outputs are written with the
record last and atomically, so a record.json on disk always describes a
complete run.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets import resolve_scenes
from .grids import (
    EmbedGrid,
    FeatureMap,
    KernelSpec,
    LabelGrid,
    ProbGrid,
    make_pairs,
    write_grid,
)
from .losses import HyperParams, combined_objective, contrastive_loss
from .metrics import (
    BoundaryCounts,
    boundary_match_counts,
    boundary_prf_per_class,
    instance_miou,
    miou,
    pixel_accuracy,
)
from .minimax import TERM_EDGE, TERM_NONEDGE, SimplexWeights, effective_kernel_size
from .network import ToySegmenter, _conv3, _softmax, save_model
from .training import train

__all__ = [
    "RunRecord",
    "run_experiment",
    "evaluate_model",
    "trivial_solution_probe",
    "kernel_report",
    "gradient_check",
]

_CSV_COLUMNS = ("iter", "lr", "total", "unary", "affinity", "aaf", "contrastive")


def _sanitize(obj):
    """JSON-safe copy: numpy scalars to Python, NaN to None."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


@dataclass
class RunRecord:
    """Everything a finished run produced, JSON-shaped throughout."""

    config: dict
    seed: int
    loss_curve: list
    lr_curve: list
    metrics: dict
    weight_trajectory: list | None = None
    final_weights: list | None = None
    effective_kernels: dict | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return _sanitize(
            {
                "config": self.config,
                "seed": self.seed,
                "loss_curve": self.loss_curve,
                "lr_curve": self.lr_curve,
                "metrics": self.metrics,
                "weight_trajectory": self.weight_trajectory,
                "final_weights": self.final_weights,
                "effective_kernels": self.effective_kernels,
                "wall_time_s": self.wall_time_s,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config=d["config"],
            seed=d["seed"],
            loss_curve=d["loss_curve"],
            lr_curve=d["lr_curve"],
            metrics=d["metrics"],
            weight_trajectory=d.get("weight_trajectory"),
            final_weights=d.get("final_weights"),
            effective_kernels=d.get("effective_kernels"),
            wall_time_s=d.get("wall_time_s", 0.0),
        )

    def deterministic_view(self) -> dict:
        """Everything that must reproduce bit-identically across re-runs."""
        d = self.to_dict()
        d.pop("wall_time_s")
        return d

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def save(self, path) -> None:
        _atomic_write(Path(path), json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def evaluate_model(model: ToySegmenter, scenes, tol: int = 1, ignore_class=None) -> dict:
    """Dataset metrics for a model on a list of scenes."""
    preds = [model.predict(s.features) for s in scenes]
    gts = [s.gt for s in scenes]
    return evaluate_predictions(preds, gts, tol=tol, ignore_class=ignore_class)


def evaluate_predictions(preds, gts, tol: int = 1, ignore_class=None) -> dict:
    ious, miou_mean = miou(preds, gts, ignore_class)
    inst, inst_mean = instance_miou(preds, gts, ignore_class)
    counts = BoundaryCounts(0, 0, 0)
    for p, g in zip(preds, gts):
        counts = counts + boundary_match_counts(p, g, tol, ignore_class)
    bp, br, bf = counts.prf()
    per_class_prf = boundary_prf_per_class(preds, gts, tol)
    return _sanitize(
        {
            "pixel_accuracy": pixel_accuracy(preds, gts, ignore_class),
            "miou": {"mean": miou_mean, "per_class": ious},
            "instance_miou": {"mean": inst_mean, "per_class": inst},
            "boundary": {"precision": bp, "recall": br, "f_measure": bf, "tol": tol},
            "boundary_per_class": per_class_prf,
        }
    )


def _effective_kernels(w: SimplexWeights, ks: KernelSpec) -> dict:
    return {
        "nonedge": [
            effective_kernel_size(w, ks, c, TERM_NONEDGE) for c in range(w.num_classes)
        ],
        "edge": [
            effective_kernel_size(w, ks, c, TERM_EDGE) for c in range(w.num_classes)
        ],
    }


def _curves_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_CSV_COLUMNS)
    for t, (parts, lr) in enumerate(zip(record.loss_curve, record.lr_curve)):
        row = [t, repr(lr)]
        for col in _CSV_COLUMNS[2:]:
            row.append(repr(parts[col]) if col in parts else "")
        writer.writerow(row)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, weight_direction: float = 1.0) -> RunRecord:
    """Train, evaluate on the test split, and persist outputs if configured."""
    t0 = time.perf_counter()
    train_scenes, test_scenes = resolve_scenes(cfg.dataset)
    first = train_scenes[0]
    model = ToySegmenter(first.features.dim, first.gt.num_classes, seed=cfg.train.seed)
    result = train(
        model,
        train_scenes,
        cfg.train,
        ks=cfg.ks,
        hp=cfg.hp,
        minimax=cfg.minimax,
        weight_direction=weight_direction,
    )
    preds = [model.predict(s.features) for s in test_scenes]
    gts = [s.gt for s in test_scenes]
    metrics = evaluate_predictions(preds, gts, tol=cfg.boundary_tol)
    record = RunRecord(
        config=_sanitize(cfg.raw),
        seed=cfg.train.seed,
        loss_curve=_sanitize(result.loss_curve),
        lr_curve=_sanitize(result.lr_curve),
        metrics=metrics,
        wall_time_s=time.perf_counter() - t0,
    )
    if result.weights is not None:
        record.final_weights = _sanitize(result.weights.weights)
        record.weight_trajectory = _sanitize(result.weight_trajectory)
        record.effective_kernels = _sanitize(_effective_kernels(result.weights, cfg.ks))
    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / "model.tseg")
        _atomic_write(out / "curves.csv", _curves_csv(record))
        for i, pred in enumerate(preds):
            write_grid(pred, out / f"pred_{i:03d}.sgrd")
        record.save(out / "record.json")  # last: its presence implies a complete run
    return record


def trivial_solution_probe(cfg: ExperimentConfig, descend: bool = True) -> dict:
    """Train with the kernel-weight player minimizing instead of maximizing.

    Under descent the weights are expected to collapse: non-edge mass onto
    the smallest kernel (easiest agreement) and edge mass onto the largest
    (easiest separation). Returns the raw numbers; thresholds are the
    caller's business.
    """
    if len(cfg.ks) < 2:
        raise ValueError("the collapse probe needs at least two kernel sizes")
    if cfg.train.loss_mode != "unary+aaf":
        raise ValueError(
            f"the probe requires loss_mode unary+aaf, got {cfg.train.loss_mode!r}"
        )
    train_scenes, _ = resolve_scenes(cfg.dataset)
    first = train_scenes[0]
    model = ToySegmenter(first.features.dim, first.gt.num_classes, seed=cfg.train.seed)
    result = train(
        model,
        train_scenes,
        cfg.train,
        ks=cfg.ks,
        hp=cfg.hp,
        minimax=cfg.minimax,
        weight_direction=-1.0 if descend else 1.0,
    )
    w = result.weights.weights  # (C, 2, K)
    sizes = list(cfg.ks.sizes)
    per_class = [
        {
            "class": c,
            "nonedge_on_smallest": float(w[c, TERM_NONEDGE, 0]),
            "edge_on_largest": float(w[c, TERM_EDGE, -1]),
        }
        for c in range(w.shape[0])
    ]
    return _sanitize(
        {
            "direction": "descent" if descend else "ascent",
            "kernel_sizes": sizes,
            "smallest_kernel": sizes[0],
            "largest_kernel": sizes[-1],
            "final_weights": w,
            "per_class": per_class,
            "mean_nonedge_on_smallest": float(w[:, TERM_NONEDGE, 0].mean()),
            "mean_edge_on_largest": float(w[:, TERM_EDGE, -1].mean()),
            "effective_kernels": _effective_kernels(result.weights, cfg.ks),
        }
    )


def kernel_report(record: RunRecord) -> str:
    """CSV of final kernel weights and effective kernel sizes per class."""
    if record.final_weights is None:
        raise ValueError("record has no kernel weights (not an adaptive run)")
    sizes = record.config["kernel_sizes"]
    w = np.asarray(record.final_weights)
    eff = record.effective_kernels
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["class", "term", "kernel", "weight", "effective_k"])
    term_names = {TERM_NONEDGE: "nonedge", TERM_EDGE: "edge"}
    for c in range(w.shape[0]):
        for t_idx, t_name in term_names.items():
            for k_idx, k in enumerate(sizes):
                writer.writerow(
                    [c, t_name, k, repr(float(w[c, t_idx, k_idx])), repr(eff[t_name][c])]
                )
    return buf.getvalue()


def _fd_param_grad(evaluate, arr: np.ndarray, h: float = 1e-5):
    """Central differences in place over every entry of ``arr``.

    ``evaluate`` returns (loss, active-set signature). When the two probe
    points of a coordinate carry different signatures they sit on
    different smooth pieces of the objective and the difference quotient
    estimates no derivative, so the returned mask marks that coordinate
    as unusable.
    """
    grad = np.zeros_like(arr)
    smooth = np.ones(arr.size, dtype=bool)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up, sig_up = evaluate()
        flat[idx] = orig - h
        down, sig_down = evaluate()
        flat[idx] = orig
        out[idx] = (up - down) / (2.0 * h)
        smooth[idx] = sig_up == sig_down
    return grad, smooth.reshape(arr.shape)


def gradient_check(
    seed: int = 0,
    instances: int = 3,
    height: int = 8,
    width: int = 8,
    num_classes: int = 3,
) -> dict:
    """End-to-end finite-difference check of the full analytic pipeline.

    Builds random models and scenes, compares backward() gradients of
    combined objective plus contrastive loss against central differences
    over every parameter. The objective is piecewise smooth, so each
    probe also fingerprints the active set it landed on (ReLU signs,
    hinge activity, probability clamping, dead embedding pixels);
    coordinates whose two probes disagree straddle a kink, where the
    quotient measures nothing, and are left out of the comparison. The
    report counts them separately.
    """
    ks = KernelSpec((3, 5))
    hp = HyperParams()
    worst = 0.0
    checked = 0
    excluded = 0
    for inst in range(instances):
        rng = np.random.default_rng([seed, 3, inst])
        labels = LabelGrid(
            rng.integers(0, num_classes, size=(height, width)), num_classes
        )
        x = FeatureMap(rng.normal(0.0, 1.0, size=(height, width, 3)))
        model = ToySegmenter(3, num_classes, seed=int(rng.integers(1 << 31)))
        w = SimplexWeights(ks.sizes, rng.normal(0.0, 0.5, size=(num_classes, 2, len(ks))))

        flat_labels = labels.labels.reshape(-1)
        pair_edges = []
        for k in ks.sizes:
            pairs = make_pairs(height, width, k)
            edge = np.zeros((pairs.i.size, num_classes), dtype=bool)
            li = flat_labels[pairs.i]
            lj = flat_labels[pairs.j]
            rows = np.nonzero(li != lj)[0]
            edge[rows, li[rows]] = True
            edge[rows, lj[rows]] = True
            pair_edges.append((pairs.i, pairs.j, edge))
        cpairs = make_pairs(height, width, 3)
        cross = flat_labels[cpairs.i] != flat_labels[cpairs.j]

        def evaluate():
            # Forward pass spelled out so the pre-activation signs are in
            # hand for the fingerprint without a second pass.
            z1 = _conv3(x.features, model.w1, model.b1)
            a1 = np.maximum(z1, 0.0)
            z2 = _conv3(a1, model.w2, model.b2)
            a2 = np.maximum(z2, 0.0)
            logits = a2 @ model.wh + model.bh
            probs = ProbGrid(_softmax(logits))
            embed = EmbedGrid.from_raw(a2)
            value, _, _ = combined_objective(probs, labels, ks, w, hp)
            c_val, _ = contrastive_loss(embed, labels, 3, hp)

            pf = probs.probs.reshape(-1, num_classes)
            bits = [
                (z1 > 0.0).ravel(),
                (z2 > 0.0).ravel(),
                np.isinf(embed.source_norms).ravel(),
                ((pf > hp.kl_eps) & (pf < 1.0 - hp.kl_eps)).ravel(),
            ]
            for pi, pj, edge in pair_edges:
                pc = np.clip(pf[pj], hp.kl_eps, 1.0 - hp.kl_eps)
                qc = np.clip(pf[pi], hp.kl_eps, 1.0 - hp.kl_eps)
                kl = pc * np.log(pc / qc) + (1.0 - pc) * np.log(
                    (1.0 - pc) / (1.0 - qc)
                )
                bits.append((edge & (hp.margin - kl > 0.0)).ravel())
            unit = embed.vectors.reshape(-1, embed.dim)
            d2 = ((unit[cpairs.j] - unit[cpairs.i]) ** 2).sum(axis=1)
            bits.append(cross & (hp.contrastive_margin - d2 > 0.0))
            sig = np.packbits(np.concatenate(bits)).tobytes()
            return value.total + c_val.total, sig

        _, probs, embed = model.forward(x)
        _, grad_logits, _ = combined_objective(probs, labels, ks, w, hp)
        _, grad_embed = contrastive_loss(embed, labels, 3, hp)
        grads = model.backward(x, grad_logits, grad_embed)
        for name, param in model.params().items():
            fd, smooth = _fd_param_grad(evaluate, param)
            a = grads[name]
            denom = np.maximum(1e-6, np.maximum(np.abs(a), np.abs(fd)))
            rel = np.abs(a - fd) / denom
            if smooth.any():
                worst = max(worst, float(rel[smooth].max()))
            checked += int(smooth.sum())
            excluded += int(smooth.size - smooth.sum())
    return {
        "max_rel_err": worst,
        "instances": instances,
        "params_checked": checked,
        "kink_excluded": excluded,
    }
