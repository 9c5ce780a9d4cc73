"""Dataset ingestion: IDX files, synthetic corpora, splits, caching."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .seeding import seed_stream
from .tensor import Tensor

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

__all__ = [
    "Dataset",
    "load_idx",
    "write_idx",
    "make_synthetic",
    "split",
    "downsample",
    "save_dataset",
    "load_dataset",
    "load_digits_corpus",
]


@dataclass
class Dataset:
    images: Tensor          # [N, C, H, W], pixel values in [0, 1]
    labels: np.ndarray      # int labels, length N
    classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        img = self.images.data if isinstance(self.images, Tensor) else np.asarray(self.images)
        if not isinstance(self.images, Tensor):
            self.images = Tensor(img)
        if img.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {img.shape}")
        if img.shape[0] != len(self.labels):
            raise ValueError("image/label count mismatch")
        if len(self.labels) < 1:
            raise ValueError("dataset is empty")
        if img.min() < -1e-12 or img.max() > 1 + 1e-12:
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(Tensor(self.images.data[idx].copy()), self.labels[idx].copy(),
                       self.classes, name or self.name)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(images_path, labels_path, downsample_to=None, classes=10):
    """Parse big-endian IDX image/label files; pixels scale from [0,255] to [0,1]."""
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad image magic {magic}, expected {IDX_IMAGE_MAGIC}")
        raw = _read_exact(f, n * rows * cols, "image data")
        if f.read(1):
            raise ValueError("trailing bytes after declared image records")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic, n_lab = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad label magic {magic}, expected {IDX_LABEL_MAGIC}")
        raw = _read_exact(f, n_lab, "label data")
        if f.read(1):
            raise ValueError("trailing bytes after declared label records")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_lab:
        raise ValueError(f"image count {n} != label count {n_lab}")
    arr = images.astype(np.float64) / 255.0
    ds = Dataset(Tensor(arr), labels, classes, name="idx")
    if downsample_to is not None:
        ds = downsample(ds, downsample_to)
    return ds


def write_idx(images_path, labels_path, images_u8, labels_u8):
    """Inverse of load_idx, for caches and tests."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels_u8)))
        f.write(labels_u8.tobytes())


def downsample(ds: Dataset, target_hw):
    """Average-pool to `target_hw`; zero-pads to the nearest pooled multiple
    (centered) when the source size is not an integer multiple."""
    n, c, h, w = ds.images.shape
    if h != w:
        raise ValueError("downsample expects square images")
    if target_hw == h:
        return ds
    if target_hw > h:
        raise ValueError(f"cannot downsample {h} -> {target_hw}")
    factor = int(np.ceil(h / target_hw))
    padded = factor * target_hw
    pad = padded - h
    lo, hi = pad // 2, pad - pad // 2
    arr = np.pad(ds.images.data, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    arr = arr.reshape(n, c, target_hw, factor, target_hw, factor).mean(axis=(3, 5))
    return Dataset(Tensor(arr), ds.labels.copy(), ds.classes, ds.name + f"@{target_hw}")


def make_synthetic(kind, n, hw, classes, noise=0.0, seed=0):
    """Deterministic synthetic image classification sets, separable at noise=0."""
    if n < classes:
        raise ValueError("need at least one example per class")
    rng = seed_stream(seed, f"synthetic:{kind}")
    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:hw, 0:hw]
    images = np.zeros((n, 1, hw, hw))
    if kind == "blobs":
        # one gaussian bump per class, centers spread on a circle
        ang = 2 * np.pi * np.arange(classes) / classes
        cy = hw / 2 + (hw / 4) * np.sin(ang)
        cx = hw / 2 + (hw / 4) * np.cos(ang)
        sigma = max(hw / 8.0, 1.0)
        for k in range(classes):
            bump = np.exp(-((yy - cy[k]) ** 2 + (xx - cx[k]) ** 2) / (2 * sigma**2))
            images[labels == k, 0] = bump
    elif kind == "stripes":
        # class-specific stripe frequency/orientation
        for k in range(classes):
            freq = 1 + k // 2
            coord = xx if k % 2 == 0 else yy
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq * coord / hw)
            images[labels == k, 0] = pattern
    else:
        raise ValueError(f"unknown synthetic kind '{kind}'")
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(Tensor(images), labels, classes, name=f"{kind}{hw}")


def split(ds: Dataset, fractions, seed=0):
    """Disjoint (train, val, test) subsets; floor sizes, remainder to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ValueError("fractions must be non-negative and sum to at most 1")
    n = len(ds)
    sizes = [int(np.floor(f * n)) for f in fractions]
    sizes[0] += min(n, int(np.floor(sum(fractions) * n + 1e-9))) - sum(sizes)
    if any(s == 0 for s in sizes):
        raise ValueError(f"split of N={n} with fractions {fractions} leaves an empty part")
    rng = seed_stream(seed, "splits")
    order = rng.permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    c = b + sizes[2]
    return (ds.subset(order[:a], ds.name + ":train"),
            ds.subset(order[a:b], ds.name + ":val"),
            ds.subset(order[b:c], ds.name + ":test"))


def save_dataset(path, ds: Dataset):
    """Cache a dataset in the checkpoint container (bit-exact round trip)."""
    save_checkpoint(path, {
        "images": ds.images.data,
        "labels": ds.labels.astype(np.float64),
        "classes": np.array([float(ds.classes)]),
    })


def load_dataset(path, name="cached"):
    arrays = load_checkpoint(path)
    return Dataset(Tensor(arrays["images"]), arrays["labels"].astype(np.int64),
                   int(arrays["classes"][0]), name)


def load_digits_corpus(limit=None, seed=0):
    """8x8 handwritten-digit corpus (bundled with scikit-learn), pixels in [0,1].

    Serves as the offline desk-scale digits set; IDX loading covers the case
    where real digit files are available on disk.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images.astype(np.float64)[:, None, :, :] / 16.0
    labels = raw.target.astype(np.int64)
    if limit is not None and limit < len(labels):
        rng = seed_stream(seed, "digits-subset")
        idx = rng.permutation(len(labels))[:limit]
        images, labels = images[idx], labels[idx]
    return Dataset(Tensor(np.clip(images, 0.0, 1.0)), labels, 10, name="digits8")
