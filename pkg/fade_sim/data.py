# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Dataset ingestion, synthetic data and client sharding.

- IDX (the MNIST / Fashion-MNIST distribution format), plain or gzipped
- Gaussian class blobs on pixel grids for desk-scale runs
- Non-IID label sharding: each client holds at most L labels
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from .exceptions import ConfigError, DataError, ParseError
from .tensor import FLOAT
from .utils import stream, stream_int

logger = logging.getLogger(__name__)

IDX_UBYTE = 0x08
LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803
MAX_IDX_ELEMENTS = 1 << 31


@dataclass
class Dataset:
    """Images [count, C, H, W] in [0, 1] with class indices < K."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def head(self, count: Optional[int]) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return self.subset(np.arange(count))


@dataclass
class ShardAssignment:
    """Per-client train/validation index lists over one training set."""

    train: List[np.ndarray]
    validation: List[np.ndarray]
    labels_per_client: int
    val_ratio: float
    total: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def shard(self, client: int) -> np.ndarray:
        """All indices owned by a client (train and validation)."""
        return np.sort(np.concatenate([self.train[client], self.validation[client]]))

    def weights(self) -> np.ndarray:
        """p_k = |D_k| / sum_i |D_i| over the training parts."""
        sizes = np.array([len(t) for t in self.train], dtype=np.float64)
        total = sizes.sum()
        if total == 0:
            return np.full(len(sizes), 1.0 / max(len(sizes), 1))
        return sizes / total


# ============================================================================
# IDX
# ============================================================================

def parse_idx(data: bytes) -> np.ndarray:
    """
    Parse an unsigned-byte IDX payload.

    Header: big-endian magic 0x0000 08 nd (0x00000801 labels, 0x00000803
    images), nd big-endian uint32 dimension sizes, then the bytes.

    Returns:
        int64 class indices for nd == 1, float32 values / 255 otherwise

    Raises:
        ParseError: bad magic, truncated header or payload, oversized dims
    """
    if len(data) < 4:
        raise ParseError(f"header needs 4 bytes, got {len(data)}", offset=0)
    (magic,) = struct.unpack_from(">I", data, 0)
    ndim = magic & 0xFF
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != IDX_UBYTE or not 1 <= ndim <= 4:
        raise ParseError(f"bad IDX magic 0x{magic:08X}", offset=0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"header needs {header} bytes, got {len(data)}", offset=len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = 1
    for position, dim in enumerate(dims):
        count *= dim
        if count > MAX_IDX_ELEMENTS:
            raise ParseError(f"dimension sizes {dims} overflow the element limit", offset=4 + 4 * position)
    actual = len(data) - header
    if actual != count:
        raise ParseError(f"payload length mismatch: expected {count} bytes, got {actual}", offset=header)
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if ndim == 1:
        return raw.astype(np.int64)
    return raw.astype(FLOAT) / FLOAT(255)


def write_idx(array: np.ndarray) -> bytes:
    """
    Encode an array as unsigned-byte IDX.

    Integer arrays are written as-is; float arrays are taken to be in [0, 1]
    and scaled by 255.
    """
    array = np.asarray(array)
    if not 1 <= array.ndim <= 4:
        raise DataError(f"IDX supports 1 to 4 dimensions, got {array.ndim}")
    if np.issubdtype(array.dtype, np.floating):
        raw = np.rint(array.astype(np.float64) * 255.0)
    else:
        raw = array
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise DataError("values do not fit in unsigned bytes")
    magic = (IDX_UBYTE << 8) | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + raw.astype(np.uint8).tobytes()


def _read(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


def _parse_file(path: str) -> np.ndarray:
    try:
        return parse_idx(_read(path))
    except ParseError as e:
        raise ParseError(f"{path}: {e.detail}", offset=e.offset) from None


def load_idx_dataset(images_path: str, labels_path: str, num_classes: Optional[int] = None,
                     limit: Optional[int] = None) -> Dataset:
    """Load an IDX image/label pair into a Dataset with a channel axis."""
    images = _parse_file(images_path)
    labels = _parse_file(labels_path)
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: labels must be 1-D, got shape {labels.shape}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise DataError(f"{images_path}: images must be 3-D or 4-D, got shape {images.shape}")
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 0
    dataset = Dataset(np.ascontiguousarray(images), labels, k).head(limit)
    logger.info(f"Loaded {len(dataset)} samples from {images_path}")
    return dataset


# ============================================================================
# SYNTHETIC
# ============================================================================

def synthetic(num_classes: int, count: int, dims: Sequence[int], seed: int, spread: float = 0.15,
              stream_name: str = "synthetic") -> Dataset:
    """
    Gaussian class blobs on a pixel grid.

    Class means are drawn uniformly in [0.1, 0.9] per pixel (shared by every
    split generated with the same seed); samples add N(0, spread^2) noise and
    are clipped to [0, 1]. Labels are balanced and shuffled.

    Args:
        num_classes: K >= 2
        count: Number of samples
        dims: (C, H, W)
        seed: Master seed
        spread: Noise standard deviation; 0 gives the class means exactly
        stream_name: Stream used for the samples (means always use "synthetic-means")
    """
    if num_classes < 2:
        raise ConfigError(f"synthetic data needs K >= 2, got {num_classes}")
    dims = tuple(int(d) for d in dims)
    means = stream(seed, "synthetic-means").uniform(0.1, 0.9, size=(num_classes,) + dims)
    rng = stream(seed, stream_name)
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    noise = rng.standard_normal(size=(count,) + dims) * spread
    images = np.clip(means[labels] + noise, 0.0, 1.0).astype(FLOAT)
    return Dataset(images, labels, num_classes)


# ============================================================================
# SHARDING
# ============================================================================

def _apportion(counts: np.ndarray, total_shards: int) -> np.ndarray:
    """Largest-remainder shard counts per label, at least one per label, at most one per sample."""
    quotas = counts / counts.sum() * total_shards
    alloc = np.clip(np.floor(quotas).astype(np.int64), 1, counts)
    while alloc.sum() < total_shards:
        room = alloc < counts
        gain = np.where(room, quotas - alloc, -np.inf)
        alloc[int(np.argmax(gain))] += 1
    while alloc.sum() > total_shards:
        room = alloc > 1
        loss = np.where(room, quotas - alloc, np.inf)
        alloc[int(np.argmin(loss))] -= 1
    return alloc


def shard_non_iid(labels: np.ndarray, num_clients: int, labels_per_client: int, seed: int,
                  val_ratio: float = 0.2) -> ShardAssignment:
    """
    Sort-by-label sharding with L shards dealt to every client.

    Indices of each label are split into contiguous shards (largest-remainder
    share of the N*L shards), so every shard holds one label and every client
    at most L labels. A seeded permutation deals the shards; each client's
    indices are then split train/validation by `val_ratio`, capped so that
    every non-empty client keeps at least one training sample.

    Raises:
        ConfigError: fewer samples than shards, or more labels than shards
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, l = int(num_clients), int(labels_per_client)
    if n < 1 or l < 1:
        raise ConfigError(f"need N >= 1 and L >= 1, got N={n}, L={l}")
    if n == 1:
        owned = [np.arange(len(labels), dtype=np.int64)]
    else:
        total_shards = n * l
        present = np.unique(labels)
        if len(labels) < total_shards:
            raise ConfigError(f"{len(labels)} samples cannot fill {total_shards} shards (N={n}, L={l})")
        if len(present) > total_shards:
            raise ConfigError(f"{len(present)} labels cannot be covered by {total_shards} single-label shards")
        by_label = [np.flatnonzero(labels == label) for label in present]
        alloc = _apportion(np.array([len(ix) for ix in by_label], dtype=np.float64), total_shards)
        shards = [part for ix, parts in zip(by_label, alloc) for part in np.array_split(ix, int(parts))]
        order = stream(seed, "shard").permutation(total_shards)
        owned = [np.sort(np.concatenate([shards[s] for s in order[k * l:(k + 1) * l]])) for k in range(n)]
    train, validation = [], []
    for k, indices in enumerate(owned):
        held_out = min(int(np.ceil(val_ratio * len(indices))), len(indices) - 1)
        if held_out > 0:
            tr, va = train_test_split(indices, test_size=held_out, random_state=stream_int(seed, "split", k))
            train.append(np.sort(tr))
            validation.append(np.sort(va))
        else:
            train.append(indices)
            validation.append(np.zeros(0, dtype=np.int64))
    logger.debug(f"Sharded {len(labels)} samples over {n} clients, {l} labels each")
    return ShardAssignment(train, validation, l, val_ratio, total=len(labels))
