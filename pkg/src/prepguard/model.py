"""Small convolutional classifier with exact backpropagation.

Images are float64 arrays of shape (height, width, channels) with values in
[0, 1].  Batched code paths use a leading batch axis.  Gradients are available
both with respect to the parameters (for training) and the input pixels (for
the attacks).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"PGRD"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input does not match the shape the model expects."""


class ModelFileError(ValueError):
    """Model file is malformed or has an unknown version."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv2D:
    """3x3 (or any odd kxk) convolution with zero 'same' padding."""

    kind = "conv"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)  # (kh, kw, cin, cout)
        self.bias = np.asarray(bias, dtype=np.float64)  # (cout,)
        kh, kw = self.weight.shape[:2]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("convolution kernels must have odd size")
        self.pad = (kh // 2, kw // 2)

    def describe(self) -> dict:
        kh, kw, cin, cout = self.weight.shape
        return {"kind": "conv", "kh": kh, "kw": kw, "cin": cin, "cout": cout}

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.weight.shape[2]:
            raise ShapeError(f"conv expects {self.weight.shape[2]} channels, got {c}")
        return (h, w, self.weight.shape[3])

    def forward(self, x):
        ph, pw = self.pad
        kh, kw = self.weight.shape[:2]
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        # (n, h, w, cin, kh, kw)
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        w_t = self.weight.transpose(2, 0, 1, 3)  # (cin, kh, kw, cout)
        out = np.tensordot(cols, w_t, axes=([3, 4, 5], [0, 1, 2])) + self.bias
        return out, cols

    def backward(self, dout, cols, need_param_grads=True):
        kh, kw = self.weight.shape[:2]
        ph, pw = self.pad
        grads = None
        if need_param_grads:
            dw = np.tensordot(cols, dout, axes=([0, 1, 2], [0, 1, 2]))  # (cin, kh, kw, cout)
            grads = [dw.transpose(1, 2, 0, 3), dout.sum(axis=(0, 1, 2))]
        # Full correlation of dout with the spatially flipped kernel.
        dp = np.pad(dout, ((0, 0), (kh - 1 - ph, kh - 1 - ph), (kw - 1 - pw, kw - 1 - pw), (0, 0)))
        dcols = sliding_window_view(dp, (kh, kw), axis=(1, 2))  # (n, h, w, cout, kh, kw)
        w_f = self.weight[::-1, ::-1].transpose(3, 0, 1, 2)  # (cout, kh, kw, cin)
        dx = np.tensordot(dcols, w_f, axes=([3, 4, 5], [0, 1, 2]))
        return dx, grads


class ReLU:
    kind = "relu"

    def describe(self) -> dict:
        return {"kind": "relu"}

    def params(self) -> list[np.ndarray]:
        return []

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask, need_param_grads=True):
        return dout * mask, [] if need_param_grads else None


class MaxPool2D:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        self.size = int(size)

    def describe(self) -> dict:
        return {"kind": "maxpool", "size": self.size}

    def params(self) -> list[np.ndarray]:
        return []

    def output_shape(self, shape):
        h, w, c = shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(f"maxpool size {s} does not divide {h}x{w}")
        return (h // s, w // s, c)

    def forward(self, x):
        n, h, w, c = x.shape
        s = self.size
        win = x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h // s, w // s, c, s * s)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache, need_param_grads=True):
        shape, idx = cache
        n, h, w, c = shape
        s = self.size
        dwin = np.zeros(dout.shape + (s * s,))
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(n, h // s, w // s, c, s, s).transpose(0, 1, 4, 2, 5, 3)
        return dwin.reshape(shape), [] if need_param_grads else None


class Dense:
    """Fully connected layer on the row-major flattened input."""

    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)  # (out, in)
        self.bias = np.asarray(bias, dtype=np.float64)

    def describe(self) -> dict:
        n_out, n_in = self.weight.shape
        return {"kind": "dense", "in": n_in, "out": n_out}

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.weight.shape[1]:
            raise ShapeError(f"dense expects {self.weight.shape[1]} inputs, got {shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.weight.T + self.bias, (x.shape, flat)

    def backward(self, dout, cache, need_param_grads=True):
        shape, flat = cache
        grads = [dout.T @ flat, dout.sum(axis=0)] if need_param_grads else None
        return (dout @ self.weight).reshape(shape), grads


# ---------------------------------------------------------------------------
# Parameters and (de)serialization
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    input_shape: tuple[int, int, int]
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError("the last layer must be dense")
        self.num_classes = shape[0]

    def describe(self) -> dict:
        return {"input": list(self.input_shape), "layers": [l.describe() for l in self.layers]}

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "ModelParams":
        return _build(self.describe(), [p.copy() for p in self.parameters()])


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    flip_augmentation: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def _build(desc: dict, arrays: Sequence[np.ndarray] | None = None, rng=None) -> ModelParams:
    """Construct layers from a descriptor, either from arrays or He-initialized from rng."""
    shape = tuple(desc["input"])
    layers = []
    it = iter(arrays) if arrays is not None else None
    for spec in desc["layers"]:
        kind = spec["kind"]
        if kind == "conv":
            wshape = (spec["kh"], spec["kw"], spec["cin"], spec["cout"])
            if it is not None:
                w, b = next(it), next(it)
            elif rng is not None:
                fan_in = spec["kh"] * spec["kw"] * spec["cin"]
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape)
                b = np.zeros(spec["cout"])
            else:
                w, b = np.zeros(wshape), np.zeros(spec["cout"])
            layers.append(Conv2D(np.reshape(w, wshape), np.reshape(b, spec["cout"])))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool":
            layers.append(MaxPool2D(spec["size"]))
        elif kind == "dense":
            wshape = (spec["out"], spec["in"])
            if it is not None:
                w, b = next(it), next(it)
            elif rng is not None:
                w = rng.normal(0.0, np.sqrt(1.0 / spec["in"]), wshape)
                b = np.zeros(spec["out"])
            else:
                w, b = np.zeros(wshape), np.zeros(spec["out"])
            layers.append(Dense(np.reshape(w, wshape), np.reshape(b, spec["out"])))
        else:
            raise ModelFileError(f"unknown layer kind {kind!r}")
    return ModelParams(shape, layers)


def default_architecture(input_shape=(32, 32, 3), num_classes: int = 10) -> dict:
    """conv3x3x8 -> relu -> pool -> conv3x3x16 -> relu -> pool -> dense."""
    h, w, c = input_shape
    return {
        "input": [h, w, c],
        "layers": [
            {"kind": "conv", "kh": 3, "kw": 3, "cin": c, "cout": 8},
            {"kind": "relu"},
            {"kind": "maxpool", "size": 2},
            {"kind": "conv", "kh": 3, "kw": 3, "cin": 8, "cout": 16},
            {"kind": "relu"},
            {"kind": "maxpool", "size": 2},
            {"kind": "dense", "in": (h // 4) * (w // 4) * 16, "out": num_classes},
        ],
    }


def init_params(desc: dict, seed: int | None = None) -> ModelParams:
    """He-initialized parameters, or all zeros when ``seed`` is None."""
    rng = np.random.default_rng(seed) if seed is not None else None
    return _build(desc, rng=rng)


def affine_model(weight: np.ndarray, bias: np.ndarray, input_shape) -> ModelParams:
    """Single dense layer followed by softmax: logits = W @ flatten(x) + b."""
    return ModelParams(tuple(input_shape), [Dense(weight, bias)])


def dumps(params: ModelParams) -> bytes:
    desc = json.dumps(params.describe(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, bytes([FORMAT_VERSION]), struct.pack("<I", len(desc)), desc]
    for p in params.parameters():
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> ModelParams:
    if blob[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    if len(blob) < 9 or blob[4] != FORMAT_VERSION:
        raise ModelFileError("unsupported model file version")
    (n,) = struct.unpack("<I", blob[5:9])
    desc = json.loads(blob[9 : 9 + n].decode("utf-8"))
    skeleton = _build(desc)
    offset = 9 + n
    arrays = []
    for p in skeleton.parameters():
        size = p.size * 8
        chunk = blob[offset : offset + size]
        if len(chunk) != size:
            raise ModelFileError("truncated weight data")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(p.shape).astype(np.float64))
        offset += size
    if offset != len(blob):
        raise ModelFileError("trailing bytes after weight data")
    return _build(desc, arrays)


def save(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------------------
# Inference and gradients
# ---------------------------------------------------------------------------


def _check_batch(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != params.input_shape:
        raise ShapeError(f"expected batch of shape (n, {params.input_shape}), got {x.shape}")
    return x


def _check_image(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.input_shape:
        raise ShapeError(f"expected image of shape {params.input_shape}, got {x.shape}")
    return x


def _forward(params: ModelParams, x: np.ndarray):
    caches = []
    for layer in params.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def _backward(params: ModelParams, caches, dlogits, need_param_grads=True):
    grads = []
    d = dlogits
    for layer, cache in zip(reversed(params.layers), reversed(caches)):
        d, g = layer.backward(d, cache, need_param_grads)
        if need_param_grads:
            grads = list(g) + grads
    return d, grads


def forward_batch(params: ModelParams, x) -> np.ndarray:
    x = _check_batch(params, x)
    return _forward(params, x)[0]


def forward(params: ModelParams, x) -> np.ndarray:
    """Logits for one image."""
    x = _check_image(params, x)
    return _forward(params, x[None])[0][0]


def predict_logits(logits) -> int:
    # np.argmax returns the first maximum, which is the lowest-index tie-break.
    return int(np.argmax(logits))


def predict(params: ModelParams, x) -> int:
    return predict_logits(forward(params, x))


def predict_batch(params: ModelParams, x, chunk: int = 256) -> np.ndarray:
    x = _check_batch(params, x)
    out = [np.argmax(_forward(params, x[i : i + chunk])[0], axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], evaluated without cancellation near zero loss."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} outside [0, {z.shape[-1]})")
    others = np.delete(z, label) - z[label]
    if others.size == 0:
        return 0.0
    m = others.max()
    if m <= 0:
        return float(np.log1p(np.exp(others).sum()))
    return float(m + np.log(np.exp(-m) + np.exp(others - m).sum()))


def _batch_loss(logits: np.ndarray, labels: np.ndarray):
    p = softmax(logits)
    n = len(labels)
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def grad_input(params: ModelParams, x, label: int) -> np.ndarray:
    """Exact gradient of cross_entropy(forward(x), label) with respect to x."""
    x = _check_image(params, x)
    logits, caches = _forward(params, x[None])
    if not 0 <= label < params.num_classes:
        raise ValueError(f"label {label} outside [0, {params.num_classes})")
    dlogits = softmax(logits)
    dlogits[0, label] -= 1.0
    return _backward(params, caches, dlogits, need_param_grads=False)[0][0]


def logits_and_vjp(params: ModelParams, x, dlogits) -> tuple[np.ndarray, np.ndarray]:
    """Logits at x and the input gradients of ``v @ logits`` for each row v of dlogits.

    ``dlogits`` may be a single vector (returns one gradient) or an (m, K) matrix.
    """
    x = _check_image(params, x)
    d = np.asarray(dlogits, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    m = d.shape[0]
    logits, caches = _forward(params, np.broadcast_to(x, (m,) + x.shape))
    dx = _backward(params, caches, d, need_param_grads=False)[0]
    return logits[0], (dx[0] if single else dx)


def logit_jacobian(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and the (K, H, W, C) gradients of every logit with respect to x."""
    return logits_and_vjp(params, x, np.eye(params.num_classes))


def activation_pattern(params: ModelParams, x) -> list[np.ndarray]:
    """ReLU masks and max-pool switches at x: the piecewise-linear region x lies in."""
    x = _check_image(params, x)[None]
    pattern = []
    for layer in params.layers:
        x, cache = layer.forward(x)
        if isinstance(layer, ReLU):
            pattern.append(cache)
        elif isinstance(layer, MaxPool2D):
            pattern.append(cache[1])
    return pattern


def _same_region(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int  # stencils that straddled a ReLU or max-pool switch


def gradient_check_details(params: ModelParams, x, label: int, h: float = 1e-5,
                           n_pixels: int = 100, seed: int = 0) -> GradCheck:
    """Compare backprop with central differences on a seeded sample of pixels.

    Relative error per pixel is |a - c| / (|a| + |c| + 1e-12).  A pixel whose
    stencil x +/- h leaves the piecewise-linear region of x is not a valid
    finite-difference point; it is skipped and another pixel is drawn, so
    ``n_pixels`` pixels are compared whenever the image has that many valid ones.
    """
    if not 0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    x = _check_image(params, x)
    analytic = grad_input(params, x, label)
    centre = activation_pattern(params, x)
    order = np.random.default_rng(seed).permutation(x.size)
    worst, checked, skipped = 0.0, 0, 0
    for i in order:
        if checked >= n_pixels:
            break
        idx = np.unravel_index(i, x.shape)
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        if not (_same_region(centre, activation_pattern(params, xp))
                and _same_region(centre, activation_pattern(params, xm))):
            skipped += 1
            continue
        central = (cross_entropy(forward(params, xp), label) - cross_entropy(forward(params, xm), label)) / (2 * h)
        a = analytic[idx]
        worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-12))
        checked += 1
    return GradCheck(worst, checked, skipped)


def gradient_check(params: ModelParams, x, label: int, h: float = 1e-5,
                   n_pixels: int = 100, seed: int = 0) -> float:
    """Max relative error between backprop and central differences; see gradient_check_details."""
    return gradient_check_details(params, x, label, h, n_pixels, seed).max_rel_error


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(images, labels, cfg: TrainConfig, params: ModelParams | None = None,
          num_classes: int | None = None, log=None) -> ModelParams:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Deterministic given ``cfg.seed``.  With ``flip_augmentation`` each image is
    left-right flipped with probability 1/2, drawn afresh every epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if images.ndim != 4 or len(labels) != len(images):
        raise ShapeError("images must be (n, h, w, c) with one label per image")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        k = num_classes if num_classes is not None else int(labels.max()) + 1
        params = init_params(default_architecture(images.shape[1:], k), seed=int(rng.integers(2**63)))
    else:
        params = params.copy()
    if labels.min() < 0 or labels.max() >= params.num_classes:
        raise ValueError("labels outside the model's class range")
    _check_batch(params, images[:1])

    weights = params.parameters()
    velocity = [np.zeros_like(w) for w in weights]
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.flip_augmentation else np.zeros(n, dtype=bool)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = images[idx].copy()
            fb = flips[idx]
            xb[fb] = xb[fb][:, :, ::-1, :]
            logits, caches = _forward(params, xb)
            loss, dlogits = _batch_loss(logits, labels[idx])
            _, grads = _backward(params, caches, dlogits)
            for w, v, g in zip(weights, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                w += v
            total += loss * len(idx)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {total / n:.4f}")
    return params


def accuracy(params: ModelParams, images, labels) -> float:
    labels = np.asarray(labels)
    return float((predict_batch(params, images) == labels).mean())

