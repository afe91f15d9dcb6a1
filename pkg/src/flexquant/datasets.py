"""Datasets: IDX image files and seeded synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed dataset file; the message carries the byte offset."""


@dataclass
class Dataset:
    """In-memory supervised dataset. Features are float64, labels int64."""

    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"{self.features.shape[0]} samples vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.features.shape[0]

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        """Yield (features, labels) slices; `order` permutes samples first."""
        n = len(self)
        idx = np.arange(n) if order is None else np.asarray(order)
        for start in range(0, n, batch_size):
            sel = idx[start : start + batch_size]
            yield self.features[sel], self.labels[sel]


def _read_idx_header(buf: bytes, path: str, expect_magic: int, ndim: int):
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at byte {len(buf)} (need {need})")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0 (want 0x{expect_magic:08x})")
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    return dims, need


def load_idx_images(path: str) -> np.ndarray:
    """Read an IDX image file into a uint8 array of shape (n, rows, cols)."""
    with open(path, "rb") as f:
        buf = f.read()
    (n, rows, cols), offset = _read_idx_header(buf, path, IDX_IMAGES_MAGIC, 3)
    expected = n * rows * cols
    payload = buf[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes at offset {offset}, expected {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    (n,), offset = _read_idx_header(buf, path, IDX_LABELS_MAGIC, 1)
    payload = buf[offset:]
    if len(payload) != n:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes at offset {offset}, expected {n}"
        )
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(images_path: str, labels_path: str, mean: float = 0.0,
             std: float = 1.0, classes: int | None = None) -> Dataset:
    """Pair IDX image/label files into a normalized NCHW dataset."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels"
        )
    if std == 0.0:
        raise FormatError("std must be nonzero")
    feats = (images.astype(np.float64) / 255.0 - mean) / std
    feats = feats[:, None, :, :]  # add channel axis
    n_classes = classes if classes is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(feats, labels, n_classes)


def gen_synthetic_blobs(classes: int, samples: int, dim: int, spread: float,
                        seed: int, center_scale: float = 3.0,
                        split: str = "train", center_offset: float = 0.0) -> Dataset:
    """Class-balanced Gaussian clusters with seeded centers.

    Centers and noise come from separate child streams of the seed: the
    "train" and "eval" splits share identical cluster geometry but draw
    disjoint noise, and a different sample count never shifts the centers.
    center_offset shifts every cluster center by a constant, mimicking raw
    un-centered features (pixel intensities, sensor readings).
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if samples < classes:
        raise ValueError(f"need at least {classes} samples, got {samples}")
    if dim < 1 or spread <= 0:
        raise ValueError(f"invalid dim={dim} or spread={spread}")
    splits = ("train", "eval")
    if split not in splits:
        raise ValueError(f"split must be one of {splits}, got {split!r}")
    root = np.random.SeedSequence(seed)
    children = root.spawn(1 + len(splits))
    center_rng = np.random.default_rng(children[0])
    noise_rng = np.random.default_rng(children[1 + splits.index(split)])
    centers = center_rng.normal(center_offset, center_scale, size=(classes, dim))
    per_class = samples // classes
    extra = samples % classes
    counts = [per_class + (1 if c < extra else 0) for c in range(classes)]
    labels = np.concatenate([np.full(k, c, dtype=np.int64) for c, k in enumerate(counts)])
    feats = centers[labels] + noise_rng.normal(0.0, spread, size=(samples, dim))
    return Dataset(feats, labels, classes)
