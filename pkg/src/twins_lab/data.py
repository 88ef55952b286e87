"""Dataset provisioning: seeded synthetic template tasks and IDX files."""

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX header or truncated payload."""


class IdxCountMismatchError(ValueError):
    """Image and label files disagree on the number of records."""


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or "idx-files"
    classes: int = 2
    image_shape: tuple = (3, 16, 16)
    per_class: int = 100
    noise_std: float = 0.2
    seed: int = 0
    val_fraction: float = 0.25
    images_path: str = ""
    labels_path: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "idx-files"):
            raise ValueError(f"unknown dataset source: {self.source!r}")
        if self.source == "synthetic" and self.classes < 2:
            raise ValueError("synthetic datasets need at least 2 classes")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


def gen_synthetic_dataset(spec):
    """Per class: one fixed template in [0,1], samples are the template
    plus clamped Gaussian noise. Balanced labels, fully seeded."""
    if spec.source != "synthetic":
        raise ValueError("spec does not describe a synthetic dataset")
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.image_shape
    templates = rng.uniform(0.0, 1.0, size=(spec.classes, c, h, w))
    xs = []
    ys = []
    for k in range(spec.classes):
        noise = rng.normal(0.0, 1.0, size=(spec.per_class, c, h, w))
        xs.append(np.clip(templates[k] + spec.noise_std * noise, 0.0, 1.0))
        ys.append(np.full(spec.per_class, k, dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def split_train_val(x, y, val_fraction, seed=0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_val = int(round(len(y) * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (x[train_idx], y[train_idx]), (x[val_idx], y[val_idx])


def load_dataset(spec):
    if spec.source == "synthetic":
        x, y = gen_synthetic_dataset(spec)
    else:
        x, y = load_idx(spec.images_path, spec.labels_path)
    return split_train_val(x, y, spec.val_fraction, seed=spec.seed)


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(f"truncated IDX file while reading {what}")
    return data


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files; pixels scaled to [0,1]."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">iiii",
                                             _read_exact(fh, 16, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"bad IDX image magic: {magic}")
        raw = _read_exact(fh, n * rows * cols, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, 8, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"bad IDX label magic: {magic}")
        raw = _read_exact(fh, n_labels, "label data")
    if n_labels != n:
        raise IdxCountMismatchError(
            f"{n} images but {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return (images.astype(np.float32) / 255.0), labels


def save_idx(images, labels, images_path, labels_path):
    """Write a dataset in IDX format (single-channel, uint8 pixels)."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError("IDX files hold single-channel images")
        arr = arr[:, 0]
    pix = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = pix.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())
