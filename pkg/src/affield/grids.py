"""Core grid types, neighborhood pair geometry, and the SEGGRID file format.

All types are immutable after construction (backing arrays are marked
read-only) and safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "LabelGrid",
    "ProbGrid",
    "EmbedGrid",
    "FeatureMap",
    "KernelSpec",
    "PairSet",
    "SeggridError",
    "make_pairs",
    "one_hot",
    "read_grid",
    "write_grid",
]

PROB_SUM_TOL = 1e-6
UNIT_NORM_TOL = 1e-6


class SeggridError(ValueError):
    """Raised for malformed SEGGRID files."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LabelGrid:
    """H x W integer class-ID map with an explicit class count."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"labels must be 2-D (H, W), got shape {labels.shape}")
        if labels.size == 0:
            raise ValueError("labels must be non-empty")
        labels = labels.astype(np.int32, copy=False)
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        lo, hi = int(labels.min()), int(labels.max())
        if lo < 0 or hi >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), found range [{lo}, {hi}]"
            )
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelGrid):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(
            self.labels, other.labels
        )


@dataclass(frozen=True)
class ProbGrid:
    """H x W x C per-pixel class probabilities; every pixel row sums to 1."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ValueError(f"probs must be 3-D (H, W, C), got shape {probs.shape}")
        if probs.shape[2] < 1 or probs.shape[0] < 1 or probs.shape[1] < 1:
            raise ValueError(f"probs has a zero-length axis: shape {probs.shape}")
        if not np.isfinite(probs).all():
            raise ValueError("probs contains non-finite values")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ValueError("probs entries must lie in [0, 1]")
        sums = probs.sum(axis=2)
        err = np.abs(sums - 1.0).max()
        if err > PROB_SUM_TOL:
            raise ValueError(
                f"per-pixel probabilities must sum to 1 within {PROB_SUM_TOL}, "
                f"worst deviation {err:.3e}"
            )
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def argmax(self) -> LabelGrid:
        return LabelGrid(self.probs.argmax(axis=2), self.num_classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProbGrid):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)


@dataclass(frozen=True)
class EmbedGrid:
    """H x W x D per-pixel unit vectors.

    ``source_norms`` records the L2 norm each vector had before
    normalization (1 when constructed from already-unit vectors, as
    after file round-trips). Gradients taken "before normalization"
    divide by these norms, so pixels normalized from a degenerate
    zero vector carry ``inf`` and receive zero gradient.
    """

    vectors: np.ndarray
    source_norms: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 3:
            raise ValueError(f"vectors must be 3-D (H, W, D), got shape {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ValueError("vectors contain non-finite values")
        norms = np.linalg.norm(vectors, axis=2)
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise ValueError(
                f"pixel vectors must be unit length within {UNIT_NORM_TOL}; "
                "use EmbedGrid.from_raw to normalize"
            )
        source = self.source_norms
        if source is None:
            source = np.ones(vectors.shape[:2])
        source = np.asarray(source, dtype=np.float64)
        if source.shape != vectors.shape[:2]:
            raise ValueError("source_norms shape must match (H, W)")
        object.__setattr__(self, "vectors", _freeze(vectors))
        object.__setattr__(self, "source_norms", _freeze(source))

    @classmethod
    def from_raw(cls, raw: np.ndarray, norm_floor: float = 1e-12) -> "EmbedGrid":
        """Normalize raw vectors per pixel.

        Pixels whose norm falls below ``norm_floor`` get a fixed uniform
        unit vector and an ``inf`` source norm (zero gradient through
        the normalization there).
        """
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 3:
            raise ValueError(f"raw vectors must be 3-D (H, W, D), got shape {raw.shape}")
        norms = np.linalg.norm(raw, axis=2)
        dead = norms < norm_floor
        safe = np.where(dead, 1.0, norms)
        vectors = raw / safe[:, :, None]
        if dead.any():
            d = raw.shape[2]
            vectors[dead] = 1.0 / np.sqrt(d)
        source = np.where(dead, np.inf, norms)
        return cls(vectors, source)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbedGrid):
            return NotImplemented
        return np.array_equal(self.vectors, other.vectors)


@dataclass(frozen=True)
class FeatureMap:
    """H x W x F per-pixel input features for the segmenter."""

    features: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 3:
            raise ValueError(
                f"features must be 3-D (H, W, F), got shape {features.shape}"
            )
        if not np.isfinite(features).all():
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", _freeze(features))

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return np.array_equal(self.features, other.features)


def _check_kernel_size(k: int) -> None:
    if not isinstance(k, (int, np.integer)):
        raise ValueError(f"kernel size must be an integer, got {k!r}")
    if k <= 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be an odd integer >= 3, got {k}")


@dataclass(frozen=True)
class KernelSpec:
    """A set of odd neighborhood sizes defining pairwise offsets."""

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.sizes)
        if not sizes:
            raise ValueError("KernelSpec needs at least one kernel size")
        for k in sizes:
            _check_kernel_size(k)
        if len(set(sizes)) != len(sizes):
            raise ValueError(f"kernel sizes must be distinct, got {sizes}")
        object.__setattr__(self, "sizes", tuple(sorted(sizes)))

    def __len__(self) -> int:
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)

    def index(self, k: int) -> int:
        return self.sizes.index(k)


@dataclass(frozen=True, eq=False)
class PairSet:
    """Ordered (center i, neighbor j) flat-index pairs of a k x k window.

    Ordering is row-major over centers, then row-major over offsets.
    Both (i, j) and (j, i) appear; out-of-bounds neighbors are dropped.
    """

    height: int
    width: int
    k: int
    i: np.ndarray
    j: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "i", _freeze(np.asarray(self.i, dtype=np.int64)))
        object.__setattr__(self, "j", _freeze(np.asarray(self.j, dtype=np.int64)))

    def __len__(self) -> int:
        return int(self.i.size)


@lru_cache(maxsize=128)
def _make_pairs_cached(h: int, w: int, k: int) -> PairSet:
    r = k // 2
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
               if not (dy == 0 and dx == 0)]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = ys.ravel()
    xs = xs.ravel()
    n = h * w
    m = len(offsets)
    # (n, m) layout so flattening yields center-major, offset-minor order.
    jy = ys[:, None] + np.array([dy for dy, _ in offsets])[None, :]
    jx = xs[:, None] + np.array([dx for _, dx in offsets])[None, :]
    valid = (jy >= 0) & (jy < h) & (jx >= 0) & (jx < w)
    i_idx = np.broadcast_to(np.arange(n)[:, None], (n, m))[valid]
    j_idx = (jy * w + jx)[valid]
    return PairSet(h, w, k, i_idx, j_idx)


def make_pairs(h: int, w: int, k: int) -> PairSet:
    """All in-bounds ordered neighbor pairs for a k x k window on an h x w grid."""
    if h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be positive, got {h}x{w}")
    _check_kernel_size(k)
    return _make_pairs_cached(int(h), int(w), int(k))


def one_hot(g: LabelGrid) -> ProbGrid:
    """Indicator probabilities: probs[i, c] = 1 iff labels[i] = c."""
    probs = np.zeros((g.height, g.width, g.num_classes))
    np.put_along_axis(probs, g.labels[:, :, None].astype(np.int64), 1.0, axis=2)
    return ProbGrid(probs)


# --- SEGGRID file format -------------------------------------------------
#
# Binary, little-endian:
#   magic   4 bytes  "SGRD"
#   kind    u8       0=label, 1=prob, 2=embed, 3=feature
#   height  u32
#   width   u32
#   channels u32     label: number of classes; prob: C; embed: D; feature: F
#   payload          label: u16 row-major; others: f32 row-major
#
# See docs/formats.md for the normative byte-level description.

_MAGIC = b"SGRD"
_HEADER = struct.Struct("<4sBIII")

KIND_LABEL = 0
KIND_PROB = 1
KIND_EMBED = 2
KIND_FEATURE = 3

Grid = LabelGrid | ProbGrid | EmbedGrid | FeatureMap


def write_grid(grid: Grid, path) -> None:
    """Serialize a grid to a SEGGRID file."""
    if isinstance(grid, LabelGrid):
        if grid.num_classes > 0xFFFF:
            raise SeggridError(
                f"label payload is u16; num_classes {grid.num_classes} exceeds 65535"
            )
        kind, channels = KIND_LABEL, grid.num_classes
        payload = grid.labels.astype("<u2").tobytes(order="C")
        h, w = grid.labels.shape
    elif isinstance(grid, ProbGrid):
        kind, channels = KIND_PROB, grid.num_classes
        payload = grid.probs.astype("<f4").tobytes(order="C")
        h, w = grid.height, grid.width
    elif isinstance(grid, EmbedGrid):
        kind, channels = KIND_EMBED, grid.dim
        payload = grid.vectors.astype("<f4").tobytes(order="C")
        h, w = grid.height, grid.width
    elif isinstance(grid, FeatureMap):
        kind, channels = KIND_FEATURE, grid.dim
        payload = grid.features.astype("<f4").tobytes(order="C")
        h, w = grid.height, grid.width
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__} as SEGGRID")
    header = _HEADER.pack(_MAGIC, kind, h, w, channels)
    Path(path).write_bytes(header + payload)


def read_grid(path) -> Grid:
    """Parse a SEGGRID file back into the matching grid type."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SeggridError(f"file too short for SEGGRID header: {path}")
    magic, kind, h, w, channels = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise SeggridError(f"bad magic {magic!r}, expected {_MAGIC!r}: {path}")
    if h < 1 or w < 1 or channels < 1:
        raise SeggridError(f"bad dimensions {h}x{w}x{channels}: {path}")
    payload = data[_HEADER.size:]
    if kind == KIND_LABEL:
        expected = h * w * 2
    elif kind in (KIND_PROB, KIND_EMBED, KIND_FEATURE):
        expected = h * w * channels * 4
    else:
        raise SeggridError(f"unknown grid kind {kind}: {path}")
    if len(payload) != expected:
        raise SeggridError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}: {path}"
        )
    if kind == KIND_LABEL:
        labels = np.frombuffer(payload, dtype="<u2").reshape(h, w).astype(np.int32)
        if labels.size and labels.max() >= channels:
            raise SeggridError(
                f"label {int(labels.max())} out of range for {channels} classes: {path}"
            )
        return LabelGrid(labels, channels)
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, channels)
    values = values.astype(np.float64)
    try:
        if kind == KIND_PROB:
            return ProbGrid(values)
        if kind == KIND_EMBED:
            return EmbedGrid(values)
        return FeatureMap(values)
    except ValueError as exc:
        raise SeggridError(f"invalid grid payload: {exc}: {path}") from exc
