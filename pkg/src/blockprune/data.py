"""Datasets, batching, evaluation.

All randomness flows from numpy's PCG64 generator seeded with a
``[seed, stream]`` pair: stream 0 initialises model weights, stream 1
generates data, and stream ``1000 + epoch`` shuffles epoch ``epoch``.
Deriving each epoch's permutation from the seed (instead of advancing one
shared generator) is what lets a run resume mid-epoch bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autodiff import log_softmax
from .blocks import expand_mask, sparsity_report

SEPARATION = 4.0
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def gen_blobs(classes: int, dims, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Gaussian clusters with identity covariance, split 80/20 into train/test.

    Class means are ``SEPARATION`` times mutually orthonormal directions
    (pairwise mean distance ``SEPARATION * sqrt(2)``).  ``dims`` is an int or
    a shape such as ``(1, 8, 8)``.
    """
    if classes < 2:
        raise ValueError("gen_blobs needs at least 2 classes")
    if per_class <= 0:
        raise ValueError("gen_blobs: per_class must be positive (empty dataset)")
    shape = (dims,) if np.isscalar(dims) else tuple(dims)
    d = int(np.prod(shape))
    if d < classes:
        raise ValueError(f"need at least {classes} feature dimensions, got {d}")
    rng = np.random.default_rng([seed, 1])
    q, _ = np.linalg.qr(rng.normal(size=(d, classes)))
    means = SEPARATION * q.T
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.normal(size=(labels.size, d))
    order = rng.permutation(labels.size)
    x, labels = x[order].reshape((-1, *shape)), labels[order]
    cut = int(round(0.8 * labels.size))
    return Dataset(x[:cut], labels[:cut], "train"), Dataset(x[cut:], labels[cut:], "test")


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + epoch]).permutation(n)


def batches(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple]:
    order = epoch_permutation(len(data), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield data.features[idx], data.labels[idx]


def n_batches(data: Dataset, batch_size: int) -> int:
    return -(-len(data) // batch_size)


def _read_header(buf: bytes, path, expect_magic: int):
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    return count


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    n = _read_header(img, images_path, IDX_IMAGES)
    if len(img) < 16:
        raise FormatError(f"{images_path}: truncated header at byte offset {len(img)}")
    rows, cols = struct.unpack(">II", img[8:16])
    need = 16 + n * rows * cols
    if len(img) < need:
        raise FormatError(f"{images_path}: truncated pixel data at byte offset {len(img)}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)

    lab = Path(labels_path).read_bytes()
    m = _read_header(lab, labels_path, IDX_LABELS)
    if len(lab) < 8 + m:
        raise FormatError(f"{labels_path}: truncated label data at byte offset {len(lab)}")
    if m != n:
        raise FormatError(f"{labels_path}: {m} labels for {n} images")
    labels = np.frombuffer(lab, dtype=np.uint8, count=m, offset=8).astype(np.int64)
    features = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(features, labels, "train")


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, H, W)`` and labels in IDX layout."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + pixels.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())


def evaluate(model, data: Dataset, mask=None, partition=None, multipliers=None,
             batch_size: int = 256) -> dict:
    """Top-1 accuracy and mean cross-entropy over ``data``.

    With a binary block ``mask`` (and its ``partition``) the model runs with
    pruned blocks zeroed and the sparsity report is merged into the result.
    ``multipliers`` instead applies arbitrary per-element weight scales.
    """
    if mask is not None:
        if partition is None:
            raise ValueError("evaluate: a block mask needs its partition")
        multipliers = expand_mask(partition, mask)
    correct, loss = 0, 0.0
    for start in range(0, len(data), batch_size):
        x = data.features[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logp = log_softmax(model.logits(x, multipliers))
        correct += int((logp.argmax(axis=1) == y).sum())
        loss -= float(logp[np.arange(len(y)), y].sum())
    n = max(len(data), 1)
    out = {"accuracy": correct / n, "loss": loss / n}
    if mask is not None:
        out.update(sparsity_report(partition, mask))
    return out
