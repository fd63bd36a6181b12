"""Seeded synthetic segmentation scenes with controllable structure scale.

Scenes mix large compact shapes (blobs, rings) with thin elongated ones
(bars), on a background class. Per-pixel input features are the class
mean value plus Gaussian noise, optionally corrupted by "bleed": a pixel
sometimes takes the mean feature of a random 4-neighbor's class, which
muddies boundaries the way mixed pixels do in real images. Two extra
feature channels carry normalized coordinates.

Generation is pure given (spec, scene index): every scene draws from its
own RNG substream, so scenes can be generated independently and in any
order.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import FeatureMap, LabelGrid, read_grid, write_grid

__all__ = [
    "BlobShape",
    "RingShape",
    "BarsShape",
    "SceneSpec",
    "SynthScene",
    "DatasetSpec",
    "ManifestDataset",
    "generate",
    "make_scene",
    "class_feature_means",
    "thinblob32",
    "PRESETS",
    "load_dataset",
    "resolve_scenes",
    "save_dataset",
    "spec_to_dict",
    "spec_from_dict",
]

FEATURE_DIM = 3  # class feature + 2 normalized coordinates


@dataclass(frozen=True)
class BlobShape:
    """A filled disk with radius drawn uniformly from [radius_min, radius_max]."""

    radius_min: float
    radius_max: float

    def __post_init__(self):
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError(
                f"need 0 < radius_min <= radius_max, got "
                f"[{self.radius_min}, {self.radius_max}]"
            )

    def margin(self) -> int:
        return math.ceil(self.radius_max)


@dataclass(frozen=True)
class RingShape:
    """An annulus: pixels within thickness/2 of the given radius."""

    radius: float
    thickness: float

    def __post_init__(self):
        if self.radius <= 0 or self.thickness <= 0:
            raise ValueError("ring radius and thickness must be positive")
        if self.thickness / 2 > self.radius:
            raise ValueError("ring thickness exceeds its radius")

    def margin(self) -> int:
        return math.ceil(self.radius + self.thickness / 2)


@dataclass(frozen=True)
class BarsShape:
    """`count` full-span bars, each horizontal or vertical, 1-2 px wide by default."""

    width_min: int = 1
    width_max: int = 2
    count: int = 2

    def __post_init__(self):
        if not 1 <= self.width_min <= self.width_max:
            raise ValueError(
                f"need 1 <= width_min <= width_max, got "
                f"[{self.width_min}, {self.width_max}]"
            )
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")

    def margin(self) -> int:
        return 0


_SHAPE_KINDS = {"blob": BlobShape, "ring": RingShape, "bars": BarsShape}


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and corruption parameters for one family of scenes.

    Class 0 is background; spec.shapes[i] draws class i + 1. Shapes are
    rasterized in order, later classes overwriting earlier pixels.
    """

    height: int
    width: int
    shapes: tuple
    feature_noise_sigma: float = 0.0
    label_bleed: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError(
                f"scene must be at least 4x4, got {self.height}x{self.width}"
            )
        shapes = tuple(self.shapes)
        if not shapes:
            raise ValueError("need at least one shape class")
        lo = min(self.height, self.width)
        for s in shapes:
            if not isinstance(s, (BlobShape, RingShape, BarsShape)):
                raise ValueError(f"unknown shape spec {s!r}")
            if 2 * s.margin() + 1 > lo:
                raise ValueError(
                    f"{type(s).__name__} with margin {s.margin()} cannot fit "
                    f"in a {self.height}x{self.width} scene"
                )
            if isinstance(s, BarsShape) and s.width_max > lo:
                raise ValueError("bar width exceeds scene extent")
        if not np.isfinite(self.feature_noise_sigma) or self.feature_noise_sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.feature_noise_sigma}")
        if not 0 <= self.label_bleed < 1:
            raise ValueError(f"label_bleed must be in [0, 1), got {self.label_bleed}")
        object.__setattr__(self, "shapes", shapes)

    @property
    def num_classes(self) -> int:
        return len(self.shapes) + 1


@dataclass(frozen=True, eq=False)
class SynthScene:
    gt: LabelGrid
    features: FeatureMap

    def __eq__(self, other):
        if not isinstance(other, SynthScene):
            return NotImplemented
        return self.gt == other.gt and self.features == other.features


def class_feature_means(num_classes: int) -> np.ndarray:
    """Distinct per-class feature means, evenly spaced over [-1, 1]."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    return np.linspace(-1.0, 1.0, num_classes)


def _raster_blob(labels, shape: BlobShape, class_id, rng):
    h, w = labels.shape
    r = rng.uniform(shape.radius_min, shape.radius_max)
    m = math.ceil(r)
    cy = int(rng.integers(m, h - m))
    cx = int(rng.integers(m, w - m))
    ys = np.arange(h)[:, None] - cy
    xs = np.arange(w)[None, :] - cx
    labels[ys * ys + xs * xs <= r * r] = class_id


def _raster_ring(labels, shape: RingShape, class_id, rng):
    h, w = labels.shape
    m = shape.margin()
    cy = int(rng.integers(m, h - m))
    cx = int(rng.integers(m, w - m))
    ys = np.arange(h)[:, None] - cy
    xs = np.arange(w)[None, :] - cx
    dist = np.sqrt(ys * ys + xs * xs)
    labels[np.abs(dist - shape.radius) <= shape.thickness / 2] = class_id


def _raster_bars(labels, shape: BarsShape, class_id, rng):
    h, w = labels.shape
    for _ in range(shape.count):
        horizontal = bool(rng.integers(2))
        wid = int(rng.integers(shape.width_min, shape.width_max + 1))
        if horizontal:
            pos = int(rng.integers(0, h - wid + 1))
            labels[pos:pos + wid, :] = class_id
        else:
            pos = int(rng.integers(0, w - wid + 1))
            labels[:, pos:pos + wid] = class_id


_RASTERIZERS = {BlobShape: _raster_blob, RingShape: _raster_ring, BarsShape: _raster_bars}

# Neighbor offsets for bleed, indexed by a single RNG draw per pixel.
_BLEED_OFFSETS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])


def make_scene(spec: SceneSpec, index: int) -> SynthScene:
    """Generate scene ``index`` of the spec's stream."""
    if index < 0:
        raise ValueError(f"scene index must be >= 0, got {index}")
    rng = np.random.default_rng([spec.seed, 0, index])
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int32)
    for class_id, shape in enumerate(spec.shapes, start=1):
        _RASTERIZERS[type(shape)](labels, shape, class_id, rng)

    means = class_feature_means(spec.num_classes)
    # Bleed and noise draws happen unconditionally so that scene geometry
    # is identical across sigma/bleed settings of the same seed.
    bleed_mask = rng.random((h, w)) < spec.label_bleed
    directions = rng.integers(0, 4, size=(h, w))
    noise = rng.standard_normal((h, w)) * spec.feature_noise_sigma

    source_labels = labels
    if bleed_mask.any():
        padded = np.pad(labels, 1, mode="edge")
        ys = np.arange(h)[:, None] + 1 + _BLEED_OFFSETS[directions][:, :, 0]
        xs = np.arange(w)[None, :] + 1 + _BLEED_OFFSETS[directions][:, :, 1]
        neighbor = padded[ys, xs]
        source_labels = np.where(bleed_mask, neighbor, labels)

    feat = np.empty((h, w, FEATURE_DIM))
    feat[:, :, 0] = means[source_labels] + noise
    feat[:, :, 1] = np.arange(h)[:, None] / max(h - 1, 1)
    feat[:, :, 2] = np.arange(w)[None, :] / max(w - 1, 1)
    return SynthScene(LabelGrid(labels, spec.num_classes), FeatureMap(feat))


def generate(spec: SceneSpec, n: int) -> list:
    """n scenes from the spec's deterministic stream."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [make_scene(spec, i) for i in range(n)]


@dataclass(frozen=True)
class DatasetSpec:
    """A scene spec plus train/test split sizes.

    Train scenes are stream indices [0, n_train); test scenes continue at
    [n_train, n_train + n_test), so the two splits never overlap.
    """

    spec: SceneSpec
    n_train: int
    n_test: int

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must both be >= 1")


def load_dataset(ds: DatasetSpec):
    """Returns (train_scenes, test_scenes)."""
    train = [make_scene(ds.spec, i) for i in range(ds.n_train)]
    test = [make_scene(ds.spec, ds.n_train + i) for i in range(ds.n_test)]
    return train, test


def thinblob32() -> DatasetSpec:
    """The default benchmark: a fat blob and thin bars on 32x32 grids.

    Three classes (background, blob of radius 6-9, bars 1-2 px wide),
    feature noise 0.5, bleed 0.1, 200 train / 50 test scenes, seed 7.
    """
    spec = SceneSpec(
        height=32,
        width=32,
        shapes=(BlobShape(6.0, 9.0), BarsShape(1, 2, 2)),
        feature_noise_sigma=0.5,
        label_bleed=0.1,
        seed=7,
    )
    return DatasetSpec(spec=spec, n_train=200, n_test=50)


PRESETS = {"thinblob-32": thinblob32}

# Class IDs in the thinblob-32 preset.
THINBLOB_BLOB_CLASS = 1
THINBLOB_BARS_CLASS = 2


# --- serialization ---------------------------------------------------------

_SHAPE_FIELDS = {
    "blob": ("radius_min", "radius_max"),
    "ring": ("radius", "thickness"),
    "bars": ("width_min", "width_max", "count"),
}
_KIND_BY_TYPE = {BlobShape: "blob", RingShape: "ring", BarsShape: "bars"}


def spec_to_dict(ds: DatasetSpec) -> dict:
    shapes = []
    for s in ds.spec.shapes:
        kind = _KIND_BY_TYPE[type(s)]
        entry = {"kind": kind}
        entry.update({f: getattr(s, f) for f in _SHAPE_FIELDS[kind]})
        shapes.append(entry)
    return {
        "height": ds.spec.height,
        "width": ds.spec.width,
        "shapes": shapes,
        "feature_noise_sigma": ds.spec.feature_noise_sigma,
        "label_bleed": ds.spec.label_bleed,
        "seed": ds.spec.seed,
        "n_train": ds.n_train,
        "n_test": ds.n_test,
    }


def spec_from_dict(d: dict) -> DatasetSpec:
    shapes = []
    for entry in d["shapes"]:
        kind = entry["kind"]
        cls = _SHAPE_KINDS[kind]
        shapes.append(cls(**{f: entry[f] for f in _SHAPE_FIELDS[kind]}))
    spec = SceneSpec(
        height=int(d["height"]),
        width=int(d["width"]),
        shapes=tuple(shapes),
        feature_noise_sigma=float(d["feature_noise_sigma"]),
        label_bleed=float(d["label_bleed"]),
        seed=int(d["seed"]),
    )
    return DatasetSpec(spec=spec, n_train=int(d["n_train"]), n_test=int(d["n_test"]))


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: DatasetSpec, out_dir) -> Path:
    """Write all scenes as SEGGRID pairs plus a manifest; returns its path.

    The manifest is written last, atomically, so its presence implies a
    complete dataset.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_dataset(ds)
    manifest = {"spec": spec_to_dict(ds), "num_classes": ds.spec.num_classes}
    for split, scenes in (("train", train), ("test", test)):
        entries = []
        for i, scene in enumerate(scenes):
            label_name = f"{split}_{i:03d}_label.sgrd"
            feat_name = f"{split}_{i:03d}_feat.sgrd"
            write_grid(scene.gt, out / label_name)
            write_grid(scene.features, out / feat_name)
            entries.append({"label": label_name, "features": feat_name})
        manifest[split] = entries
    path = out / "manifest.json"
    _atomic_write_text(path, json.dumps(manifest, indent=2))
    return path


@dataclass(frozen=True)
class ManifestDataset:
    """A dataset read back from a gen-data manifest."""

    path: str

    def load(self):
        """Returns (train_scenes, test_scenes)."""
        manifest_path = Path(self.path)
        manifest = json.loads(manifest_path.read_text())
        base = manifest_path.parent
        out = []
        for split in ("train", "test"):
            scenes = []
            for entry in manifest.get(split, []):
                gt = read_grid(base / entry["label"])
                feat = read_grid(base / entry["features"])
                if not isinstance(gt, LabelGrid):
                    raise ValueError(f"{entry['label']} is not a label grid")
                if not isinstance(feat, FeatureMap):
                    raise ValueError(f"{entry['features']} is not a feature grid")
                scenes.append(SynthScene(gt, feat))
            out.append(scenes)
        return out[0], out[1]


def resolve_scenes(dataset):
    """(train, test) scene lists from a DatasetSpec or ManifestDataset."""
    if isinstance(dataset, DatasetSpec):
        return load_dataset(dataset)
    if isinstance(dataset, ManifestDataset):
        return dataset.load()
    raise ValueError(f"cannot load scenes from {type(dataset).__name__}")
