"""Datasets, partitioning into client shards, server resampling, IDX loading."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeding
from .errors import (
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    SamplingError,
    TruncatedFileError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix plus integer labels. Arrays are copied and frozen."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValueError("labels must be a 1-D array")
        if not np.issubdtype(labels.dtype, np.integer):
            if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64, copy=True)
        if feats.shape[0] != labels.shape[0]:
            raise ValueError(
                f"features have {feats.shape[0]} rows but labels have {labels.shape[0]}"
            )
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return self.n

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        if not parts:
            raise EmptyDatasetError()
        return LabeledDataset(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts], axis=0),
        )


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    data: LabeledDataset
    indices: np.ndarray = field(repr=False)

    @property
    def m_i(self) -> int:
        return self.data.n


@dataclass(frozen=True, eq=False)
class ServerDataset:
    round: int
    data: LabeledDataset
    indices: np.ndarray = field(repr=False)
    source: str = "resample-per-round"

    @property
    def m_s(self) -> int:
        return self.data.n


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a population across ``num_clients`` clients.

    ``per_client_size`` is an int, or ``"proportional"`` for ``n // num_clients``.
    """

    scheme: str = "iid"
    num_clients: int = 10
    per_client_size: int | str = "proportional"
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}; expected 'iid' or 'dirichlet'")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.scheme == "dirichlet" and (self.alpha is None or not self.alpha > 0):
            raise ValueError("dirichlet partition requires alpha > 0")
        if isinstance(self.per_client_size, str):
            if self.per_client_size != "proportional":
                raise ValueError("per_client_size must be a positive int or 'proportional'")
        elif self.per_client_size < 1:
            raise ValueError("per_client_size must be positive")

    def shard_size(self, n: int) -> int:
        if self.per_client_size == "proportional":
            return n // self.num_clients
        return int(self.per_client_size)


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    n: int,
    class_separation: float,
    seed: int,
) -> LabeledDataset:
    """Gaussian mixture with one unit-covariance component per class.

    Class means sit on a sphere of radius ``class_separation`` in random
    directions. Labels are balanced up to rounding and shuffled.
    """
    if num_classes < 1 or input_dim < 1:
        raise ValueError("num_classes and input_dim must be >= 1")
    if n < num_classes:
        raise ValueError(f"n={n} must be at least num_classes={num_classes}")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    rng = seeding.derive_rng(seed, seeding.SYNTHETIC)
    directions = rng.standard_normal((num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = rng.permutation(np.arange(n) % num_classes)
    features = means[labels] + rng.standard_normal((n, input_dim))
    return LabeledDataset(features, labels)


def standardize(
    train: LabeledDataset, *others: LabeledDataset
) -> tuple[LabeledDataset, ...]:
    """Zero-mean, unit-variance features using statistics of ``train`` only."""
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    out = [LabeledDataset((train.features - mean) / std, train.labels)]
    for ds in others:
        out.append(LabeledDataset((ds.features - mean) / std, ds.labels))
    return tuple(out)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # ties broken toward the lowest class index (stable sort)
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _fill_from_pools(
    proportions: np.ndarray, size: int, available: np.ndarray
) -> np.ndarray:
    """Per-class counts summing to ``size``, never exceeding ``available``.

    Classes that run out have their mass removed and the remaining masses
    renormalized; the deficit is redistributed until the quota is met.
    """
    take = np.zeros_like(available)
    mass = proportions.astype(np.float64).copy()
    need = size
    while need > 0:
        room = available - take
        mass = np.where(room > 0, mass, 0.0)
        if mass.sum() <= 0:
            # all drawn mass sits on exhausted classes; fall back to what is left
            mass = (room > 0).astype(np.float64)
        want = _largest_remainder(mass / mass.sum(), need)
        got = np.minimum(want, room)
        if got.sum() == 0:
            got[np.flatnonzero(room > 0)[0]] = 1
        take += got
        need -= int(got.sum())
    return take


def _check_feasible(counts: np.ndarray, num_clients: int, size: int) -> None:
    total_needed = num_clients * size
    if size < 1:
        raise PartitionError(
            f"shard size is 0: {int(counts.sum())} samples cannot give {num_clients} clients one each"
        )
    if counts.sum() < total_needed:
        deficit = total_needed - int(counts.sum())
        per_class = ", ".join(f"class {c}: {int(k)}" for c, k in enumerate(counts))
        raise PartitionError(
            f"infeasible partition: need {total_needed} samples ({num_clients} x {size}) "
            f"but population has {int(counts.sum())}; deficit {deficit}. "
            f"Available per class: {per_class}"
        )


def dirichlet_partition(
    data: LabeledDataset, spec: PartitionSpec, num_classes: int | None = None
) -> list[ClientShard]:
    """Split ``data`` into equal-size, disjoint client shards.

    For ``scheme="dirichlet"`` each client draws class proportions from
    Dirichlet(alpha * 1) and takes that many samples of each class without
    replacement. For ``scheme="iid"`` shards are consecutive chunks of a
    random permutation.
    """
    if data.n == 0:
        raise EmptyDatasetError()
    if num_classes is None:
        num_classes = int(data.labels.max()) + 1
    size = spec.shard_size(data.n)
    N = spec.num_clients
    counts = data.class_counts(num_classes)
    _check_feasible(counts, N, size)
    rng = seeding.derive_rng(spec.seed, seeding.PARTITION)

    if spec.scheme == "iid":
        perm = rng.permutation(data.n)
        chunks = [np.sort(perm[i * size:(i + 1) * size]) for i in range(N)]
    else:
        pools = [rng.permutation(np.flatnonzero(data.labels == c)) for c in range(num_classes)]
        cursor = np.zeros(num_classes, dtype=np.int64)
        available = counts.astype(np.int64).copy()
        chunks = []
        for _ in range(N):
            p = rng.dirichlet(np.full(num_classes, float(spec.alpha)))
            take = _fill_from_pools(p, size, available)
            idx = []
            for c in np.flatnonzero(take):
                idx.append(pools[c][cursor[c]:cursor[c] + take[c]])
                cursor[c] += take[c]
            available -= take
            chunks.append(np.sort(np.concatenate(idx)))

    return [ClientShard(i, data.subset(ch), ch) for i, ch in enumerate(chunks)]


def draw_server_dataset(
    population: LabeledDataset, m_s: int, round: int, master_seed: int
) -> ServerDataset:
    """Uniform draw of ``m_s`` samples without replacement, keyed on (seed, round)."""
    if m_s < 1:
        raise SamplingError("m_s must be >= 1")
    if m_s > population.n:
        raise SamplingError(f"m_s={m_s} exceeds population size {population.n}")
    if m_s == population.n:
        idx = np.arange(population.n)
    else:
        rng = seeding.derive_rng(master_seed, seeding.SERVER_DRAW, round)
        idx = np.sort(rng.choice(population.n, size=m_s, replace=False))
    return ServerDataset(round, population.subset(idx), idx)


def _read_exact(buf: bytes, offset: int, length: int, path) -> bytes:
    chunk = buf[offset:offset + length]
    if len(chunk) != length:
        raise TruncatedFileError(
            f"truncated file {path}: expected {length} bytes at offset {offset}, got {len(chunk)}"
        )
    return chunk


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1]."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)

    (magic,) = struct.unpack(">I", _read_exact(img, 0, 4, images_path))
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"bad magic in {images_path}: 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    (lmagic,) = struct.unpack(">I", _read_exact(lab, 0, 4, labels_path))
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"bad magic in {labels_path}: 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")

    count, rows, cols = struct.unpack(">III", _read_exact(img, 4, 12, images_path))
    (lcount,) = struct.unpack(">I", _read_exact(lab, 4, 4, labels_path))
    if count != lcount:
        raise CountMismatchError(f"count mismatch: {count} images but {lcount} labels")

    pixels = np.frombuffer(_read_exact(img, 16, count * rows * cols, images_path), dtype=np.uint8)
    labels = np.frombuffer(_read_exact(lab, 8, count, labels_path), dtype=np.uint8)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64))
