"""A deliberately small per-pixel classifier with manual backprop.

Two 3x3 convolutions (8 channels, ReLU) and a 1x1 classification head.
The receptive field is tiny on purpose: with purely per-pixel supervision
the model struggles on thin structures, which is the regime where the
pairwise losses earn their keep. The post-conv2 activation doubles as the
pixel embedding for the contrastive loss (L2-normalized per pixel).

Checkpoints use the TSEG flat binary format, documented byte-exactly in
docs/formats.md.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grids import EmbedGrid, FeatureMap, ProbGrid

__all__ = ["HIDDEN_CHANNELS", "ToySegmenter", "save_model", "load_model"]

HIDDEN_CHANNELS = 8

_PARAM_ORDER = ("w1", "b1", "w2", "b2", "wh", "bh")


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((1, 1), (1, 1), (0, 0)))


_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _patches(x: np.ndarray) -> np.ndarray:
    """Gather 3x3 neighborhoods: (H, W, F) -> (H, W, 9, F), zero padded."""
    h, w, f = x.shape
    padded = _pad1(x)
    out = np.empty((h, w, 9, f))
    for idx, (dy, dx) in enumerate(_OFFSETS):
        out[:, :, idx, :] = padded[dy:dy + h, dx:dx + w, :]
    return out


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, wid, f = x.shape
    c_out = w.shape[3]
    cols = _patches(x).reshape(h * wid, 9 * f)
    out = cols @ w.reshape(9 * f, c_out) + b
    return out.reshape(h, wid, c_out)


def _conv3_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray):
    """Returns (d_x, d_w, d_b) for the zero-padded 3x3 convolution."""
    h, wid, f = x.shape
    c_out = w.shape[3]
    cols = _patches(x).reshape(h * wid, 9 * f)
    d_flat = d_out.reshape(h * wid, c_out)
    d_w = (cols.T @ d_flat).reshape(w.shape)
    d_b = d_flat.sum(axis=0)
    d_cols = (d_flat @ w.reshape(9 * f, c_out).T).reshape(h, wid, 9, f)
    d_padded = np.zeros((h + 2, wid + 2, f))
    for idx, (dy, dx) in enumerate(_OFFSETS):
        d_padded[dy:dy + h, dx:dx + wid, :] += d_cols[:, :, idx, :]
    return d_padded[1:-1, 1:-1, :], d_w, d_b


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class ToySegmenter:
    """conv3x3(F_in -> 8) + ReLU, conv3x3(8 -> 8) + ReLU, conv1x1(8 -> C).

    Parameters live in plain float64 arrays and are updated in place by
    the training loop. Initialization is uniform in [-s, s] with
    s = 1 / sqrt(fan_in), drawn from a named substream of the seed.
    """

    def __init__(self, in_features: int, num_classes: int, seed: int = 0):
        if in_features < 1:
            raise ValueError(f"in_features must be >= 1, got {in_features}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.in_features = int(in_features)
        self.num_classes = int(num_classes)
        rng = np.random.default_rng([int(seed), 1])
        hid = HIDDEN_CHANNELS

        def uniform(shape, fan_in):
            s = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-s, s, size=shape)

        self.w1 = uniform((3, 3, in_features, hid), 9 * in_features)
        self.b1 = uniform((hid,), 9 * in_features)
        self.w2 = uniform((3, 3, hid, hid), 9 * hid)
        self.b2 = uniform((hid,), 9 * hid)
        self.wh = uniform((hid, num_classes), hid)
        self.bh = uniform((num_classes,), hid)

    def params(self) -> dict:
        """Live parameter arrays keyed by name, in serialization order."""
        return {name: getattr(self, name) for name in _PARAM_ORDER}

    def set_params(self, values: dict) -> None:
        for name in _PARAM_ORDER:
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != getattr(self, name).shape:
                raise ValueError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {getattr(self, name).shape}"
                )
            setattr(self, name, arr.copy())

    def _check_input(self, x: FeatureMap) -> None:
        if x.dim != self.in_features:
            raise ValueError(
                f"input has {x.dim} features, model expects {self.in_features}"
            )

    def forward(self, x: FeatureMap):
        """Returns (logits array, ProbGrid, EmbedGrid of the conv2 tap)."""
        self._check_input(x)
        z1 = _conv3(x.features, self.w1, self.b1)
        a1 = np.maximum(z1, 0.0)
        z2 = _conv3(a1, self.w2, self.b2)
        a2 = np.maximum(z2, 0.0)
        logits = a2 @ self.wh + self.bh
        probs = ProbGrid(_softmax(logits))
        embed = EmbedGrid.from_raw(a2)
        return logits, probs, embed

    def backward(self, x: FeatureMap, grad_logits, grad_embed=None) -> dict:
        """Parameter gradients for upstream gradients over logits.

        ``grad_embed``, when given, is a gradient over the raw conv2
        activation (the pre-normalization embedding) and joins the
        backward pass at that point. Accepts LossGrad or plain arrays.
        """
        self._check_input(x)
        g_logits = np.asarray(getattr(grad_logits, "array", grad_logits), dtype=np.float64)
        h, w = x.height, x.width
        if g_logits.shape != (h, w, self.num_classes):
            raise ValueError(
                f"upstream gradient shape {g_logits.shape} does not match "
                f"logits ({h}, {w}, {self.num_classes})"
            )
        z1 = _conv3(x.features, self.w1, self.b1)
        a1 = np.maximum(z1, 0.0)
        z2 = _conv3(a1, self.w2, self.b2)
        a2 = np.maximum(z2, 0.0)

        hid = HIDDEN_CHANNELS
        g_flat = g_logits.reshape(-1, self.num_classes)
        d_wh = a2.reshape(-1, hid).T @ g_flat
        d_bh = g_flat.sum(axis=0)
        d_a2 = (g_flat @ self.wh.T).reshape(h, w, hid)
        if grad_embed is not None:
            g_emb = np.asarray(getattr(grad_embed, "array", grad_embed), dtype=np.float64)
            if g_emb.shape != (h, w, hid):
                raise ValueError(
                    f"embedding gradient shape {g_emb.shape} does not match "
                    f"({h}, {w}, {hid})"
                )
            d_a2 = d_a2 + g_emb
        d_z2 = d_a2 * (z2 > 0.0)
        d_a1, d_w2, d_b2 = _conv3_backward(a1, self.w2, d_z2)
        d_z1 = d_a1 * (z1 > 0.0)
        _, d_w1, d_b1 = _conv3_backward(x.features, self.w1, d_z1)
        return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "wh": d_wh, "bh": d_bh}

    def predict(self, x: FeatureMap):
        _, probs, _ = self.forward(x)
        return probs.argmax()

    def copy(self) -> "ToySegmenter":
        dup = ToySegmenter(self.in_features, self.num_classes, seed=0)
        dup.set_params(self.params())
        return dup

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, n)).all() for n in _PARAM_ORDER)


# --- TSEG checkpoint format ------------------------------------------------
#
# Binary, little-endian:
#   magic    4 bytes  "TSEG"
#   version  u8       1
#   f_in     u32
#   hidden   u32
#   classes  u32
#   payload  f32 parameter arrays, row-major, in order
#            w1 (3*3*f_in*hidden), b1 (hidden), w2 (3*3*hidden*hidden),
#            b2 (hidden), wh (hidden*classes), bh (classes)

_TSEG_MAGIC = b"TSEG"
_TSEG_HEADER = struct.Struct("<4sBIII")
_TSEG_VERSION = 1


def save_model(model: ToySegmenter, path) -> None:
    header = _TSEG_HEADER.pack(
        _TSEG_MAGIC, _TSEG_VERSION, model.in_features, HIDDEN_CHANNELS,
        model.num_classes,
    )
    chunks = [header]
    for name in _PARAM_ORDER:
        chunks.append(getattr(model, name).astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> ToySegmenter:
    data = Path(path).read_bytes()
    if len(data) < _TSEG_HEADER.size:
        raise ValueError(f"file too short for TSEG header: {path}")
    magic, version, f_in, hidden, classes = _TSEG_HEADER.unpack_from(data)
    if magic != _TSEG_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_TSEG_MAGIC!r}: {path}")
    if version != _TSEG_VERSION:
        raise ValueError(f"unsupported TSEG version {version}: {path}")
    if hidden != HIDDEN_CHANNELS:
        raise ValueError(
            f"checkpoint hidden width {hidden} does not match {HIDDEN_CHANNELS}"
        )
    if f_in < 1 or classes < 2:
        raise ValueError(f"bad dimensions f_in={f_in} classes={classes}: {path}")
    model = ToySegmenter(f_in, classes, seed=0)
    offset = _TSEG_HEADER.size
    values = {}
    for name in _PARAM_ORDER:
        shape = getattr(model, name).shape
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(f"truncated TSEG payload at {name}: {path}")
        values[name] = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        offset = end
    if offset != len(data):
        raise ValueError(f"trailing bytes after TSEG payload: {path}")
    model.set_params({k: v.astype(np.float64) for k, v in values.items()})
    return model
