"""
Datasets for the training harness.

- Built-in synthetic generator: 10-class Gaussian-blob images (one channel,
  values in [0, 1]), each class a blob centred on its own point of a ring.
- IDX files (magic 0x00000803 for images, 0x00000801 for labels), uint8
  pixels scaled to [0, 1].
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from daq8.errors import FormatError
from daq8.training.config import DatasetSource

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

BLOB_SIGMA = 2.0
BLOB_JITTER = 1.0


@dataclass(frozen=True)
class LabeledSet:
    """Images (N, C, H, W) float32 in [0, 1] and int64 labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.images[indices], self.labels[indices], self.num_classes)

    def sample_hash(self, index: int = 0) -> str:
        digest = hashlib.sha256(self.images[index].tobytes())
        digest.update(int(self.labels[index]).to_bytes(8, "little"))
        return digest.hexdigest()


@dataclass(frozen=True)
class DatasetSplits:
    train: LabeledSet
    val: LabeledSet


def class_centres(num_classes: int, size: int) -> np.ndarray:
    """Blob centres evenly spaced on a ring inside the image."""
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    radius = 0.3 * size
    middle = (size - 1) / 2.0
    return np.stack([middle + radius * np.sin(angles), middle + radius * np.cos(angles)], axis=1)


def synthetic_blobs(count: int, source: DatasetSource, seed: int) -> LabeledSet:
    """
    Seeded Gaussian-blob images; labels cycle through the classes before shuffling.

    Each sample is a unit-height blob (sigma 2 px) at its class centre, jittered
    by up to 1 px, plus N(0, noise^2) pixel noise, clipped to [0, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, count]))
    size = source.image_size
    labels = np.arange(count, dtype=np.int64) % source.num_classes
    labels = labels[rng.permutation(count)]
    centres = class_centres(source.num_classes, size)[labels]
    centres = centres + rng.uniform(-BLOB_JITTER, BLOB_JITTER, size=centres.shape)
    rows = np.arange(size, dtype=np.float64)
    dy = (rows[None, :] - centres[:, 0:1]) ** 2
    dx = (rows[None, :] - centres[:, 1:2]) ** 2
    blobs = np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2.0 * BLOB_SIGMA ** 2))
    noisy = blobs + source.noise * rng.standard_normal(blobs.shape)
    images = np.clip(noisy, 0.0, 1.0).astype(np.float32)[:, None, :, :]
    return LabeledSet(images, labels, source.num_classes)


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path.name}: truncated IDX header", offset=len(blob))
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise FormatError(f"{path.name}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
                          offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path.name}: truncated IDX dimension table", offset=len(blob))
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise FormatError(f"{path.name}: IDX payload length mismatch, expected {expected} bytes",
                          offset=min(len(blob), expected))
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_pair(images_path: Union[str, Path], labels_path: Union[str, Path],
                  num_classes: int) -> LabeledSet:
    """
    Load an IDX image file (N, H, W) and its label file (N,).

    Raises:
        FormatError: bad magic, truncated payload, count mismatch or a label outside [0, num_classes)
    """
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{Path(labels_path).name}: {labels.shape[0]} labels for {images.shape[0]} images",
                          offset=4)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        # 8-byte header (magic + count) precedes the label bytes
        raise FormatError(f"{Path(labels_path).name}: label {labels[bad[0]]} outside [0, {num_classes})",
                          offset=8 + int(bad[0]))
    scaled = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return LabeledSet(np.ascontiguousarray(scaled), labels, num_classes)


def load_dataset(source: DatasetSource, seed: int) -> DatasetSplits:
    """
    Build the train/val splits described by `source`.

    Sample order is deterministic before shuffling; shuffling happens per epoch
    in the trainer.
    """
    if source.kind == "synthetic":
        train = synthetic_blobs(source.train_size, source, seed)
        val = synthetic_blobs(source.val_size, source, seed + 1) if source.val_size else _empty(source)
        logger.info(f"Synthetic dataset: {len(train)} train / {len(val)} val, "
                    f"{source.num_classes} classes, {source.image_size}x{source.image_size}")
        return DatasetSplits(train, val)

    train = load_idx_pair(source.train_images, source.train_labels, source.num_classes)
    if source.val_images and source.val_labels:
        val = load_idx_pair(source.val_images, source.val_labels, source.num_classes)
    else:
        held_out = min(source.val_size, len(train) - 1)
        indices = np.arange(len(train))
        val = train.subset(indices[len(train) - held_out:])
        train = train.subset(indices[:len(train) - held_out])
    train = train.subset(np.arange(min(source.train_size, len(train))))
    logger.info(f"IDX dataset: {len(train)} train / {len(val)} val from {source.train_images}")
    return DatasetSplits(train, val)


def _empty(source: DatasetSource) -> LabeledSet:
    size = source.image_size
    return LabeledSet(np.zeros((0, 1, size, size), dtype=np.float32), np.zeros(0, dtype=np.int64),
                      source.num_classes)


def write_idx_pair(images: np.ndarray, labels: np.ndarray, images_path: Union[str, Path],
                   labels_path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write uint8 images (N, H, W) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    images_path, labels_path = Path(images_path), Path(labels_path)
    images_path.write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC)
                            + struct.pack(f">{images.ndim}I", *images.shape) + images.tobytes())
    labels_path.write_bytes(struct.pack(">I", IDX_LABELS_MAGIC)
                            + struct.pack(">I", labels.shape[0]) + labels.tobytes())
    return images_path, labels_path


def batch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Per-epoch permutation; a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
    return rng.permutation(n)


def batch_indices(order: np.ndarray, batch_index: int, batch_size: int) -> np.ndarray:
    return order[batch_index * batch_size:(batch_index + 1) * batch_size]


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def eval_subset(train: LabeledSet, limit: Optional[int]) -> LabeledSet:
    count = len(train) if limit is None else min(limit, len(train))
    return train.subset(np.arange(count))
