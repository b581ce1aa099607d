"""Synthetic long-tailed multi-instance bags and the ``.mibg`` file format.

Each class owns a random unit-norm prototype. A bag of ``T`` instances holds
the prototype plus Gaussian noise in ``key_instances`` randomly chosen slots
and pure noise everywhere else, so only the key instances carry label
information. Class sizes fall off exponentially from ``head_count`` to
``head_count / imbalance_ratio``.

``.mibg`` layout (little-endian)::

    b"MIBG" | u32 version=1 | u32 num_bags | u32 K | u32 T | u32 C_in
    then per bag: u32 label | T*C_in float32 (row-major)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .rng import Xoshiro256

MAGIC = b"MIBG"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class Bag:
    instances: np.ndarray  # [T, C_in]
    label: int


@dataclass
class DatasetSpec:
    num_classes: int = 7
    instances: int = 16
    feat_dim: int = 12
    head_count: int = 64
    imbalance_ratio: float = 16.0
    key_instances: int = 4
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.imbalance_ratio < 1:
            raise ConfigError(f"imbalance ratio must be >= 1, got {self.imbalance_ratio}")
        if not 1 <= self.key_instances <= self.instances:
            raise ConfigError(f"key_instances must lie in [1, {self.instances}], got {self.key_instances}")
        if self.feat_dim < 1 or self.head_count < 1:
            raise ConfigError("feat_dim and head_count must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        counts = self.class_counts()
        if min(counts) < 1:
            raise ConfigError(f"class counts {counts} contain an empty class")

    def class_counts(self) -> list:
        """``round(head * ratio ** (-c / (K - 1)))`` with halves rounded up."""
        k = self.num_classes
        return [int(math.floor(self.head_count * self.imbalance_ratio ** (-c / (k - 1)) + 0.5))
                for c in range(k)]


class BagDataset:
    """Immutable collection of equally shaped bags."""

    def __init__(self, bags: Sequence[Bag], num_classes: int):
        self.bags = list(bags)
        self.num_classes = int(num_classes)
        if self.bags:
            shape = self.bags[0].instances.shape
            if any(b.instances.shape != shape for b in self.bags):
                raise ConfigError("all bags must share one [T, C_in] shape")

    def __len__(self) -> int:
        return len(self.bags)

    def __getitem__(self, i: int) -> Bag:
        return self.bags[i]

    @property
    def shape(self) -> tuple:
        return self.bags[0].instances.shape if self.bags else (0, 0)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "BagDataset":
        return BagDataset([self.bags[i] for i in indices], self.num_classes)

    def arrays(self, indices=None) -> tuple[np.ndarray, np.ndarray]:
        idx = range(len(self.bags)) if indices is None else indices
        x = np.stack([self.bags[i].instances for i in idx])
        y = np.array([self.bags[i].label for i in idx], dtype=np.int64)
        return x, y

    def __eq__(self, other) -> bool:
        if not isinstance(other, BagDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and len(self) == len(other)
                and all(a.label == b.label and np.array_equal(a.instances, b.instances)
                        for a, b in zip(self.bags, other.bags)))


def gen_dataset(spec: DatasetSpec) -> BagDataset:
    spec.validate()
    rng = Xoshiro256(spec.seed)
    t, c_in = spec.instances, spec.feat_dim
    prototypes = []
    for _ in range(spec.num_classes):
        v = rng.normal_array(c_in)
        prototypes.append(v / np.linalg.norm(v))
    bags = []
    for label, count in enumerate(spec.class_counts()):
        for _ in range(count):
            slots = rng.shuffle(list(range(t)))[: spec.key_instances]
            x = rng.normal_array((t, c_in), spec.noise_sigma)
            x[slots] += prototypes[label]
            bags.append(Bag(x, label))
    return BagDataset(bags, spec.num_classes)


def class_counts(dataset: BagDataset, num_classes: int | None = None) -> np.ndarray:
    k = dataset.num_classes if num_classes is None else num_classes
    return np.bincount(dataset.labels, minlength=k).astype(np.int64)


def write_dataset(dataset: BagDataset, path) -> None:
    t, c_in = dataset.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(dataset), dataset.num_classes, t, c_in))
        for bag in dataset.bags:
            fh.write(struct.pack("<I", bag.label))
            fh.write(np.ascontiguousarray(bag.instances, dtype="<f4").tobytes())


def read_dataset(path) -> BagDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", 0)
    magic, version, n, k, t, c_in = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    record = 4 + 4 * t * c_in
    bags = []
    offset = _HEADER.size
    for i in range(n):
        if offset + record > len(buf):
            raise FormatError(f"truncated bag record {i} of {n}", offset)
        (label,) = struct.unpack_from("<I", buf, offset)
        if label >= k:
            raise FormatError(f"bag {i} label {label} outside [0, {k})", offset)
        x = np.frombuffer(buf, dtype="<f4", count=t * c_in, offset=offset + 4)
        if not np.isfinite(x).all():
            raise FormatError(f"bag {i} holds non-finite values", offset + 4)
        bags.append(Bag(x.astype(np.float64).reshape(t, c_in), int(label)))
        offset += record
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after {n} bags", offset)
    return BagDataset(bags, k)


def make_batches(n_items, batch_size: int, epoch_seed: int) -> list:
    """Shuffled index batches; a final batch smaller than 2 is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be at least 2, got {batch_size}")
    n = n_items if isinstance(n_items, int) else len(n_items)
    order = Xoshiro256(epoch_seed).shuffle(list(range(n)))
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def stratified_split(dataset: BagDataset, test_fraction: float, seed: int) -> tuple[list, list]:
    """Per-class shuffled split; every class with 2+ bags lands in both parts."""
    rng = Xoshiro256(seed)
    labels = dataset.labels
    train, test = [], []
    for c in range(dataset.num_classes):
        idx = rng.shuffle([int(i) for i in np.flatnonzero(labels == c)])
        if len(idx) < 2:
            train += idx
            continue
        n_test = min(len(idx) - 1, max(1, int(math.floor(test_fraction * len(idx) + 0.5))))
        test += idx[:n_test]
        train += idx[n_test:]
    return train, test
