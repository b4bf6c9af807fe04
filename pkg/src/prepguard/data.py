"""Seeded synthetic datasets and PNG/manifest ingestion."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

NOISE_SIGMA = 0.05


class IngestionError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"manifest row {row}: {message}")
        self.row = row


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, c) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (n, h, w, c) with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.descriptor))


# Each class: (pattern, rgb colour).  Colours make every class distinct from
# the mirror image of every other class, so flip augmentation stays consistent.
CLASS_TABLE = [
    ("hbar", (1.0, 0.2, 0.2)),
    ("vbar", (0.2, 1.0, 0.2)),
    ("diag", (0.2, 0.3, 1.0)),
    ("antidiag", (1.0, 1.0, 0.2)),
    ("blob_tl", (0.2, 1.0, 1.0)),
    ("blob_br", (1.0, 0.2, 1.0)),
    ("ramp_lr", (1.0, 0.6, 0.2)),
    ("ring", (0.6, 0.2, 1.0)),
    ("bar_left", (0.2, 0.6, 0.6)),
    ("ramp_tb", (0.7, 0.7, 0.7)),
]

ASYMMETRIC_PATTERNS = {"diag", "antidiag", "blob_tl", "blob_br", "ramp_lr", "bar_left"}


def _pattern(kind: str, h: int, w: int, rng) -> np.ndarray:
    """Intensity map in [0, 1] for one pattern instance with random jitter."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rng.uniform(-2, 2, size=2)
    cy, cx = (h - 1) / 2 + dy, (w - 1) / 2 + dx
    half = rng.uniform(0.08, 0.12) * min(h, w)
    if kind == "hbar":
        return (np.abs(yy - cy) <= half).astype(float)
    if kind == "vbar":
        return (np.abs(xx - cx) <= half).astype(float)
    if kind == "diag":  # "/" stroke
        return (np.abs((xx - cx) + (yy - cy)) <= half * 1.4).astype(float)
    if kind == "antidiag":  # "\" stroke
        return (np.abs((xx - cx) - (yy - cy)) <= half * 1.4).astype(float)
    if kind in ("blob_tl", "blob_br"):
        r = 0.22 * min(h, w)
        oy, ox = (0.25 * h + dy, 0.25 * w + dx) if kind == "blob_tl" else (0.75 * h + dy, 0.75 * w + dx)
        return np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * r * r))
    if kind == "ramp_lr":
        return np.clip((xx - dx) / (w - 1), 0, 1)
    if kind == "ramp_tb":
        return np.clip((yy - dy) / (h - 1), 0, 1)
    if kind == "ring":
        rad = np.hypot(yy - cy, xx - cx)
        return (np.abs(rad - 0.3 * min(h, w)) <= half * 0.8).astype(float)
    if kind == "bar_left":
        return (np.abs(xx - (0.25 * w + dx)) <= half).astype(float)
    raise ValueError(kind)


def synth_image(label: int, height: int, width: int, rng, channels: int = 3) -> np.ndarray:
    kind, colour = CLASS_TABLE[label % len(CLASS_TABLE)]
    background = rng.uniform(0.3, 0.6)
    amplitude = rng.uniform(0.15, 0.3)
    pat = _pattern(kind, height, width, rng)
    colour = np.asarray(colour[:channels]) if channels == 3 else np.ones(1)
    img = background + amplitude * pat[..., None] * colour
    img += rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(n: int, num_classes: int = 10, height: int = 32, width: int = 32,
                  seed: int = 0, channels: int = 3) -> Dataset:
    """Balanced procedural dataset; identical output for identical arguments."""
    if num_classes < 2 or num_classes > len(CLASS_TABLE):
        raise ValueError(f"num_classes must lie in [2, {len(CLASS_TABLE)}]")
    if n < num_classes:
        raise ValueError("n must be at least num_classes")
    if height < 4 or width < 4 or channels not in (1, 3):
        raise ValueError("invalid image shape")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.stack([synth_image(int(y), height, width, rng, channels) for y in labels])
    desc = {"source": "synthetic", "n": n, "num_classes": num_classes,
            "shape": [height, width, channels], "seed": seed}
    return Dataset(images, labels, num_classes, desc)


def synth_split(seed: int, n_train: int = 2000, n_eval: int = 500, num_classes: int = 10,
                height: int = 32, width: int = 32) -> tuple[Dataset, Dataset]:
    """Disjoint train / held-out sets drawn from independent child streams of ``seed``."""
    s_train, s_eval = np.random.SeedSequence(seed).spawn(2)
    train = synth_dataset(n_train, num_classes, height, width, int(s_train.generate_state(1)[0]))
    held = synth_dataset(n_eval, num_classes, height, width, int(s_eval.generate_state(1)[0]))
    train.descriptor.update(split="train", root_seed=seed)
    held.descriptor.update(split="eval", root_seed=seed)
    return train, held


def quantize8(x) -> np.ndarray:
    """Snap to the 8-bit grid that PNG storage imposes."""
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img) -> None:
    arr = to_uint8(img)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path, channels: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if channels == 1:
            im = im.convert("L")
        elif channels == 3 or im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def save_dataset(ds: Dataset, directory, manifest: str = "manifest.csv") -> None:
    os.makedirs(directory, exist_ok=True)
    width = max(5, len(str(len(ds))))
    with open(os.path.join(directory, manifest), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
            name = f"img_{i:0{width}d}.png"
            save_png(os.path.join(directory, name), img)
            writer.writerow([name, int(y)])


def load_dataset(directory, manifest: str = "manifest.csv", num_classes: int | None = None) -> Dataset:
    """Read a ``path,label`` manifest; paths are relative to ``directory``.

    Duplicate paths are kept as separate rows.
    """
    mpath = os.path.join(directory, manifest)
    try:
        with open(mpath, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {mpath}: {exc}") from exc
    if rows and rows[0] and rows[0][0].strip().lower() == "path":
        rows = rows[1:]
    rows = [r for r in rows if r]
    if not rows:
        raise IngestionError("manifest lists no images")
    images, labels, shape = [], [], None
    for i, row in enumerate(rows, start=1):
        if len(row) < 2:
            raise IngestionError("expected 'path,label'", i)
        path = os.path.join(directory, row[0].strip())
        try:
            label = int(row[1])
        except ValueError:
            raise IngestionError(f"label {row[1]!r} is not an integer", i) from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise IngestionError(f"label {label} out of range", i)
        if not os.path.isfile(path):
            raise IngestionError(f"missing file {path}", i)
        img = load_png(path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise IngestionError(f"shape {img.shape} differs from {shape}", i)
        images.append(img)
        labels.append(label)
    k = num_classes if num_classes is not None else max(labels) + 1
    desc = {"source": "directory", "path": os.path.abspath(directory), "n": len(labels),
            "num_classes": k, "shape": list(shape)}
    return Dataset(np.stack(images), np.asarray(labels), k, desc)
