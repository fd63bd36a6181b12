"""Experiment configuration: JSON file schema, defaults, and validation.

A config file is a single JSON object; every key is optional and falls
back to a default. Validation collects *all* problems and reports them
together, one per line, as dotted key paths:

    {
      "dataset": {"preset": "thinblob-32"}
                 | {"manifest": "path/to/manifest.json"}
                 | {"height": ..., "width": ..., "shapes": [...],
                    "feature_noise_sigma": ..., "label_bleed": ...,
                    "seed": ..., "n_train": ..., "n_test": ...},
      "loss_mode": "unary" | "unary+affinity" | "unary+aaf" | "unary+contrastive",
      "kernel_sizes": [3, 5],
      "affinity_k": 3,
      "hyperparams": {"lambda": 1.0, "margin": 3.0,
                      "contrastive_margin": 0.2, "kl_eps": 1e-6},
      "train": {"base_lr": 0.001, "iters": 400, "poly_power": 0.9,
                "momentum": 0.9, "weight_decay": 0.0005, "seed": 0},
      "minimax": {"w_lr": 0.01, "update_scheme": "simultaneous",
                  "alternating_n": 1, "parametrization": "softmax_logits"},
      "output_dir": null,
      "boundary_tol": 1
    }
"""

from __future__ import annotations

import copy
import json
import numbers
from dataclasses import dataclass
from pathlib import Path

from .datasets import (
    DatasetSpec,
    ManifestDataset,
    PRESETS,
    spec_from_dict,
    spec_to_dict,
)
from .grids import KernelSpec
from .losses import HyperParams
from .minimax import MinimaxConfig
from .training import LOSS_MODES, TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "config_from_dict", "DEFAULT_CONFIG"]

DEFAULT_CONFIG = {
    "dataset": {"preset": "thinblob-32"},
    "loss_mode": "unary+aaf",
    "kernel_sizes": [3, 5],
    "affinity_k": 3,
    "hyperparams": {
        "lambda": 1.0,
        "margin": 3.0,
        "contrastive_margin": 0.2,
        "kl_eps": 1e-6,
    },
    "train": {
        "base_lr": 0.001,
        "iters": 400,
        "poly_power": 0.9,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "seed": 0,
    },
    "minimax": {
        "w_lr": 0.01,
        "update_scheme": "simultaneous",
        "alternating_n": 1,
        "parametrization": "softmax_logits",
    },
    "output_dir": None,
    "boundary_tol": 1,
}

_DATASET_INLINE_KEYS = {
    "height", "width", "shapes", "feature_noise_sigma", "label_bleed",
    "seed", "n_train", "n_test",
}


class ConfigError(ValueError):
    """All configuration problems, one per line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment: dataset, losses, optimizers, outputs.

    ``raw`` is the merged JSON-shaped snapshot the config was built from;
    it is what run records embed, so a record can be re-run verbatim.
    """

    dataset: object  # DatasetSpec | ManifestDataset
    ks: KernelSpec
    hp: HyperParams
    train: TrainConfig
    minimax: MinimaxConfig
    output_dir: str | None
    boundary_tol: int
    raw: dict


def _is_number(x) -> bool:
    return isinstance(x, numbers.Real) and not isinstance(x, bool)


def _is_int(x) -> bool:
    return isinstance(x, numbers.Integral) and not isinstance(x, bool)


class _Checker:
    def __init__(self):
        self.errors = []

    def fail(self, path, msg, value):
        self.errors.append(f"{path}: {msg} (got {value!r})")

    def number(self, d, path, key, lo=None, hi=None, lo_open=False, hi_open=False):
        v = d[key]
        p = f"{path}.{key}" if path else key
        if not _is_number(v):
            self.fail(p, "must be a number", v)
            return
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.fail(p, f"must be {'>' if lo_open else '>='} {lo}", v)
        if hi is not None and (v >= hi if hi_open else v > hi):
            self.fail(p, f"must be {'<' if hi_open else '<='} {hi}", v)

    def integer(self, d, path, key, lo=None):
        v = d[key]
        p = f"{path}.{key}" if path else key
        if not _is_int(v):
            self.fail(p, "must be an integer", v)
            return
        if lo is not None and v < lo:
            self.fail(p, f"must be >= {lo}", v)

    def choice(self, d, path, key, options):
        v = d[key]
        p = f"{path}.{key}" if path else key
        if v not in options:
            self.fail(p, f"must be one of {sorted(options)}", v)

    def known_keys(self, d, path, allowed):
        for k in d:
            if k not in allowed:
                p = f"{path}.{k}" if path else k
                self.errors.append(f"{p}: unknown key")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate_dataset(d, chk: _Checker, base_dir: Path):
    if not isinstance(d, dict):
        chk.fail("dataset", "must be an object", d)
        return
    if "preset" in d:
        chk.known_keys(d, "dataset", {"preset"})
        if d["preset"] not in PRESETS:
            chk.fail("dataset.preset", f"must be one of {sorted(PRESETS)}", d["preset"])
        return
    if "manifest" in d:
        chk.known_keys(d, "dataset", {"manifest"})
        if not isinstance(d["manifest"], str):
            chk.fail("dataset.manifest", "must be a path string", d["manifest"])
        elif not (base_dir / d["manifest"]).exists():
            chk.fail("dataset.manifest", "file does not exist", str(base_dir / d["manifest"]))
        return
    chk.known_keys(d, "dataset", _DATASET_INLINE_KEYS)
    missing = _DATASET_INLINE_KEYS - set(d)
    for k in sorted(missing):
        chk.errors.append(f"dataset.{k}: required for an inline dataset")
    if missing:
        return
    chk.integer(d, "dataset", "height", lo=4)
    chk.integer(d, "dataset", "width", lo=4)
    chk.number(d, "dataset", "feature_noise_sigma", lo=0)
    chk.number(d, "dataset", "label_bleed", lo=0, hi=1, hi_open=True)
    chk.integer(d, "dataset", "seed")
    chk.integer(d, "dataset", "n_train", lo=1)
    chk.integer(d, "dataset", "n_test", lo=1)
    shapes = d["shapes"]
    if not isinstance(shapes, list) or not shapes:
        chk.fail("dataset.shapes", "must be a non-empty list", shapes)
        return
    fields = {
        "blob": {"radius_min", "radius_max"},
        "ring": {"radius", "thickness"},
        "bars": {"width_min", "width_max", "count"},
    }
    for i, s in enumerate(shapes):
        path = f"dataset.shapes[{i}]"
        if not isinstance(s, dict) or "kind" not in s:
            chk.fail(path, 'must be an object with a "kind"', s)
            continue
        if s["kind"] not in fields:
            chk.fail(f"{path}.kind", f"must be one of {sorted(fields)}", s["kind"])
            continue
        want = fields[s["kind"]]
        chk.known_keys(s, path, want | {"kind"})
        for k in sorted(want - set(s)):
            chk.errors.append(f"{path}.{k}: required for kind {s['kind']}")


def _build_dataset(d: dict, base_dir: Path):
    if "preset" in d:
        return PRESETS[d["preset"]]()
    if "manifest" in d:
        return ManifestDataset(str(base_dir / d["manifest"]))
    return spec_from_dict(d)


def config_from_dict(overrides: dict, base_dir=".") -> ExperimentConfig:
    """Merge with defaults, validate everything, and build the config.

    Raises ConfigError listing every violated field as a dotted path.
    """
    base_dir = Path(base_dir)
    if not isinstance(overrides, dict):
        raise ConfigError(["top level: must be a JSON object"])
    merged = _merge(DEFAULT_CONFIG, overrides)
    # The dataset section is a variant (preset | manifest | inline spec);
    # an override replaces it wholesale instead of merging into the default.
    if "dataset" in overrides:
        merged["dataset"] = copy.deepcopy(overrides["dataset"])
    chk = _Checker()
    chk.known_keys(merged, "", set(DEFAULT_CONFIG))

    _validate_dataset(merged.get("dataset"), chk, base_dir)

    if merged.get("loss_mode") not in LOSS_MODES:
        chk.fail("loss_mode", f"must be one of {list(LOSS_MODES)}", merged.get("loss_mode"))

    ks = merged.get("kernel_sizes")
    if not isinstance(ks, list) or not ks:
        chk.fail("kernel_sizes", "must be a non-empty list", ks)
    else:
        for i, k in enumerate(ks):
            if not _is_int(k) or k < 3 or k % 2 == 0:
                chk.fail(f"kernel_sizes[{i}]", "must be an odd integer >= 3", k)
        if len(set(ks)) != len(ks):
            chk.fail("kernel_sizes", "sizes must be distinct", ks)

    ak = merged.get("affinity_k")
    if not _is_int(ak) or ak < 3 or ak % 2 == 0:
        chk.fail("affinity_k", "must be an odd integer >= 3", ak)

    hp = merged.get("hyperparams")
    if not isinstance(hp, dict):
        chk.fail("hyperparams", "must be an object", hp)
    else:
        chk.known_keys(hp, "hyperparams", set(DEFAULT_CONFIG["hyperparams"]))
        full = _merge(DEFAULT_CONFIG["hyperparams"], hp)
        chk.number(full, "hyperparams", "lambda", lo=0)
        chk.number(full, "hyperparams", "margin", lo=0, lo_open=True)
        chk.number(full, "hyperparams", "contrastive_margin", lo=0, lo_open=True)
        chk.number(full, "hyperparams", "kl_eps", lo=0, lo_open=True, hi=1e-3)
        merged["hyperparams"] = full

    tr = merged.get("train")
    if not isinstance(tr, dict):
        chk.fail("train", "must be an object", tr)
    else:
        chk.known_keys(tr, "train", set(DEFAULT_CONFIG["train"]))
        full = _merge(DEFAULT_CONFIG["train"], tr)
        chk.number(full, "train", "base_lr", lo=0, lo_open=True)
        chk.integer(full, "train", "iters", lo=0)
        chk.number(full, "train", "poly_power", lo=0, lo_open=True)
        chk.number(full, "train", "momentum", lo=0, hi=1, hi_open=True)
        chk.number(full, "train", "weight_decay", lo=0)
        chk.integer(full, "train", "seed")
        merged["train"] = full

    mm = merged.get("minimax")
    if not isinstance(mm, dict):
        chk.fail("minimax", "must be an object", mm)
    else:
        chk.known_keys(mm, "minimax", set(DEFAULT_CONFIG["minimax"]))
        full = _merge(DEFAULT_CONFIG["minimax"], mm)
        chk.number(full, "minimax", "w_lr", lo=0, lo_open=True)
        chk.choice(full, "minimax", "update_scheme", {"simultaneous", "alternating"})
        chk.integer(full, "minimax", "alternating_n", lo=1)
        chk.choice(
            full, "minimax", "parametrization", {"softmax_logits", "projected"}
        )
        merged["minimax"] = full

    out_dir = merged.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        chk.fail("output_dir", "must be a path string or null", out_dir)
    bt = merged.get("boundary_tol")
    if not _is_int(bt) or bt < 0:
        chk.fail("boundary_tol", "must be an integer >= 0", bt)

    if chk.errors:
        raise ConfigError(chk.errors)

    hp_d = merged["hyperparams"]
    tr_d = merged["train"]
    mm_d = merged["minimax"]
    return ExperimentConfig(
        dataset=_build_dataset(merged["dataset"], base_dir),
        ks=KernelSpec(tuple(merged["kernel_sizes"])),
        hp=HyperParams(
            lambda_=float(hp_d["lambda"]),
            margin=float(hp_d["margin"]),
            contrastive_margin=float(hp_d["contrastive_margin"]),
            kl_eps=float(hp_d["kl_eps"]),
        ),
        train=TrainConfig(
            base_lr=float(tr_d["base_lr"]),
            iters=int(tr_d["iters"]),
            poly_power=float(tr_d["poly_power"]),
            momentum=float(tr_d["momentum"]),
            weight_decay=float(tr_d["weight_decay"]),
            seed=int(tr_d["seed"]),
            loss_mode=merged["loss_mode"],
            affinity_k=int(merged["affinity_k"]),
        ),
        minimax=MinimaxConfig(
            w_lr=float(mm_d["w_lr"]),
            update_scheme=mm_d["update_scheme"],
            alternating_n=int(mm_d["alternating_n"]),
            parametrization=mm_d["parametrization"],
        ),
        output_dir=out_dir,
        boundary_tol=int(bt),
        raw=merged,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    return config_from_dict(raw, base_dir=path.parent)


def dataset_to_dict(dataset) -> dict:
    """The JSON form of a resolved dataset (inverse of _build_dataset)."""
    if isinstance(dataset, ManifestDataset):
        return {"manifest": dataset.path}
    if isinstance(dataset, DatasetSpec):
        return spec_to_dict(dataset)
    raise ValueError(f"cannot serialize dataset {type(dataset).__name__}")
