"""Datasets: seeded synthetic blobs and the GVDS binary format."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Batch
from ..errors import ConfigError, FormatError

DATASET_MAGIC = b"GVDS"
DATASET_VERSION = 1


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0] or self.labels.ndim != 1:
            raise ConfigError("inputs and labels disagree on the sample count")
        if len(self) < 1:
            raise ConfigError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def reshape(self, sample_shape) -> "Dataset":
        return Dataset(self.inputs.reshape((len(self),) + tuple(sample_shape)), self.labels,
                       self.num_classes, dict(self.meta))

    def order(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([int(seed), int(epoch)]).permutation(len(self))

    def num_batches(self, batch_size: int) -> int:
        return -(-len(self) // batch_size)

    def batch(self, seed: int, epoch: int, index: int, batch_size: int) -> Batch:
        idx = self.order(seed, epoch)[index * batch_size:(index + 1) * batch_size]
        if idx.size == 0:
            raise IndexError(f"batch {index} is out of range")
        return Batch(self.inputs[idx], self.labels[idx])

    def batches(self, batch_size: int, seed: int, epoch: int):
        """Yield the seeded-shuffle batches of one epoch; the last one may be short."""
        order = self.order(seed, epoch)
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.inputs[idx], self.labels[idx])

    def subset(self, fraction: float, seed: int) -> Batch:
        """The first ceil(fraction * n) samples under a seeded shuffle, as one batch."""
        if not 0 < fraction <= 1:
            raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
        n = math.ceil(fraction * len(self))
        idx = np.random.default_rng([int(seed), 0x5EB]).permutation(len(self))[:n]
        return Batch(self.inputs[idx], self.labels[idx])

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def split_batch(batch: Batch, batch_size: int) -> list:
    """Partition a batch into consecutive pieces of at most ``batch_size`` samples."""
    return [Batch(batch.inputs[i:i + batch_size], batch.labels[i:i + batch_size])
            for i in range(0, len(batch), batch_size)]


def make_synthetic(num_classes: int, dim: int, samples: int, seed: int,
                   separation: float = 6.0, sigma: float = 1.0) -> Dataset:
    """Isotropic Gaussian class blobs with centres about ``separation * sigma`` apart.

    Labels are assigned round-robin, so ``samples == num_classes`` gives one
    sample per class.
    """
    if num_classes < 1 or dim < 1:
        raise ConfigError("num_classes and dim must be positive")
    if samples < num_classes:
        raise ConfigError(f"need at least {num_classes} samples, got {samples}")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((num_classes, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    # Random unit vectors sit ~sqrt(2) apart in high dimension.
    centres *= separation * sigma / math.sqrt(2.0)
    labels = np.arange(samples) % num_classes
    inputs = centres[labels] + sigma * rng.standard_normal((samples, dim))
    meta = {"source": "synthetic", "num_classes": num_classes, "dim": dim, "samples": samples,
            "seed": seed, "separation": separation, "sigma": sigma}
    return Dataset(inputs, labels, num_classes, meta)


_HEAD = struct.Struct("<4sIQI")


def save_dataset(path, ds: Dataset) -> Path:
    """Write the GVDS format.

    Layout (little-endian): magic ``GVDS``, u32 version, u64 sample count,
    u32 ndim, u32 x ndim sample dims, u32 num_classes, float64 inputs,
    int64 labels, u32 CRC32 of every preceding byte.
    """
    path = Path(path)
    dims = ds.sample_shape
    body = bytearray(_HEAD.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), len(dims)))
    body += struct.pack(f"<{len(dims)}I", *dims)
    body += struct.pack("<I", ds.num_classes)
    body += ds.inputs.astype("<f8").tobytes()
    body += ds.labels.astype("<i8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    path.write_bytes(bytes(body))
    return path


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()

    def need(end, what):
        if len(data) < end:
            raise FormatError(f"truncated dataset: {what} needs {end} bytes, file has {len(data)}",
                              offset=len(data))

    need(_HEAD.size, "header")
    magic, version, count, ndim = _HEAD.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", offset=0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    pos = _HEAD.size
    need(pos + 4 * ndim + 4, "dimensions")
    dims = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    (num_classes,) = struct.unpack_from("<I", data, pos)
    pos += 4
    n_in = count * math.prod(dims)
    expected = pos + 8 * n_in + 8 * count + 4
    need(expected, "payload")
    if len(data) != expected:
        raise FormatError(f"dataset length mismatch: expected {expected} bytes, got {len(data)}",
                          offset=expected)
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:expected - 4]) != crc:
        raise FormatError("dataset checksum mismatch", offset=expected - 4)
    inputs = np.frombuffer(data, "<f8", n_in, pos).reshape((count,) + tuple(dims))
    labels = np.frombuffer(data, "<i8", count, pos + 8 * n_in)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), int(num_classes),
                   {"source": str(path)})
