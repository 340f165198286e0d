"""Datasets, non-iid federated partitioning, and augmentations.

Covers CIFAR binary ingestion, a synthetic Gaussian-cluster stand-in for
desk-scale runs, Dirichlet (LDA) label partitioning across clients, and the
client-side augmentations: standard crop/flip/normalize, mixup, cutout.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, UsageError
from .tensor import Batch, Tensor

__all__ = [
    "Dataset",
    "ClientShard",
    "PartitionSpec",
    "dirichlet_partition",
    "mixup_batch",
    "cutout",
    "standard_augment",
    "normalize",
    "channel_stats",
    "load_cifar_binary",
    "synth_classification",
    "split_per_class",
    "make_batch",
]


@dataclass(frozen=True)
class Dataset:
    """Immutable sample store: images (N, ...) plus integer class labels."""

    images: Tensor
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if len(labels) != self.images.shape[0]:
            raise ConfigError(
                f"{len(labels)} labels for {self.images.shape[0]} images"
            )
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class ClientShard:
    """One client's slice of a parent dataset."""

    client_id: int
    indices: np.ndarray
    n_k: int
    class_hist: np.ndarray

    @staticmethod
    def build(ds: Dataset, client_id: int, indices: np.ndarray) -> "ClientShard":
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        hist = np.bincount(ds.labels[indices], minlength=ds.num_classes)
        return ClientShard(client_id, indices, int(len(indices)), hist)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split a dataset across clients with Dirichlet class proportions.

    alpha > 0: each client receives floor(N/K) samples whose class counts
    follow a multinomial over Dir(alpha) proportions, drawn without
    replacement from per-class pools; draws hitting an exhausted class fall
    back to the renormalized remaining classes. Leftover samples are then
    dealt round-robin so the shards cover the dataset.

    alpha = 0 is the fully-skewed regime: client k holds samples of class
    k mod num_classes only, each class split evenly among its clients
    (requires K >= num_classes so every class is assigned).
    """
    k_clients = spec.num_clients
    n = ds.n
    c = ds.num_classes
    if k_clients > n:
        raise ConfigError(f"{k_clients} clients but only {n} samples")
    rng = np.random.default_rng(spec.seed)
    pools = [np.where(ds.labels == cls)[0] for cls in range(c)]
    for pool in pools:
        rng.shuffle(pool)

    if spec.alpha == 0:
        if k_clients < c:
            raise ConfigError(
                f"alpha=0 needs at least one client per class ({k_clients} < {c})"
            )
        assigned: list[list[np.ndarray]] = [[] for _ in range(k_clients)]
        for cls in range(c):
            owners = [k for k in range(k_clients) if k % c == cls]
            chunks = np.array_split(pools[cls], len(owners))
            for owner, chunk in zip(owners, chunks):
                assigned[owner].append(chunk)
        return [
            ClientShard.build(ds, k, np.sort(np.concatenate(parts) if parts else np.array([], dtype=np.int64)))
            for k, parts in enumerate(assigned)
        ]

    quota = n // k_clients
    props = rng.dirichlet(np.full(c, spec.alpha), size=k_clients)
    avail = np.array([len(p) for p in pools])
    cursor = np.zeros(c, dtype=np.int64)
    taken: list[list[np.ndarray]] = [[] for _ in range(k_clients)]
    for k in range(k_clients):
        remaining = quota
        counts = np.zeros(c, dtype=np.int64)
        while remaining > 0:
            live = avail > 0
            q = props[k] * live
            total = q.sum()
            q = q / total if total > 0 else live / live.sum()
            draw = np.minimum(rng.multinomial(remaining, q), avail)
            counts += draw
            avail -= draw
            remaining -= int(draw.sum())
        for cls in range(c):
            if counts[cls]:
                taken[k].append(pools[cls][cursor[cls] : cursor[cls] + counts[cls]])
                cursor[cls] += counts[cls]

    # deal the floor-division remainder round-robin so shards cover the set
    leftover = np.concatenate(
        [pools[cls][cursor[cls] :] for cls in range(c)]
        or [np.array([], dtype=np.int64)]
    )
    for i, idx in enumerate(leftover):
        taken[i % k_clients].append(np.array([idx], dtype=np.int64))

    return [
        ClientShard.build(ds, k, np.sort(np.concatenate(parts) if parts else np.array([], dtype=np.int64)))
        for k, parts in enumerate(taken)
    ]


def make_batch(ds: Dataset, indices: np.ndarray) -> Batch:
    return Batch(ds.images.data[indices], ds.labels[indices])


def mixup_batch(
    batch: Batch,
    alpha_mix: float,
    rng: np.random.Generator,
    num_classes: int,
    lam: np.ndarray | None = None,
) -> Batch:
    """Convex combinations of batch samples and their labels.

    Partners come from a random in-batch permutation; one lambda ~
    Beta(alpha, alpha) per pair. ``lam`` overrides the draw (tests).
    Output labels are soft distributions.
    """
    if alpha_mix <= 0:
        raise ConfigError("mixup alpha must be > 0")
    if batch.size < 2:
        raise UsageError("mixup needs at least 2 samples")
    if batch.soft_labels:
        y = batch.y
    else:
        y = np.zeros((batch.size, num_classes), dtype=np.float64)
        y[np.arange(batch.size), batch.y] = 1.0
    perm = rng.permutation(batch.size)
    if lam is None:
        lam = rng.beta(alpha_mix, alpha_mix, size=batch.size)
    lam = np.asarray(lam, dtype=np.float64)
    lx = lam.reshape((batch.size,) + (1,) * (batch.x.ndim - 1))
    ly = lam.reshape(batch.size, 1)
    x_mixed = lx * batch.x + (1.0 - lx) * batch.x[perm]
    y_mixed = ly * y + (1.0 - ly) * y[perm]
    return Batch(x_mixed, y_mixed)


def cutout(
    img: Tensor,
    size: int,
    rng: np.random.Generator,
    center: tuple[int, int] | None = None,
) -> Tensor:
    """Zero a size x size square centered at a uniformly random pixel.

    The square clips at the image borders, so up to size^2 pixels are
    affected. Channels are masked together. ``center`` pins the square
    (tests); otherwise it is drawn uniformly over all pixels.
    """
    if size < 1:
        raise ConfigError("cutout size must be >= 1")
    c, h, w = img.shape
    if center is None:
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
    else:
        cy, cx = center
    y0 = max(0, cy - size // 2)
    x0 = max(0, cx - size // 2)
    y1 = min(h, cy - size // 2 + size)
    x1 = min(w, cx - size // 2 + size)
    out = img.data.copy()
    out[:, y0:y1, x0:x1] = 0.0
    return Tensor(out)


def normalize(img: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Per-channel (x - mean) / std; applied to train and test images alike."""
    return (img - mean[:, None, None]) / std[:, None, None]


def crop_flip(img: np.ndarray, oy: int, ox: int, flip: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the input size at (oy, ox), flip horizontally."""
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    padded[:, pad : pad + h, pad : pad + w] = img
    out = padded[:, oy : oy + h, ox : ox + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def standard_augment(
    img: Tensor,
    rng: np.random.Generator,
    mean: np.ndarray,
    std: np.ndarray,
    pad: int = 4,
) -> Tensor:
    """Random pad-4 crop, horizontal flip with p=0.5, channel normalization."""
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    flip = bool(rng.integers(0, 2))
    out = crop_flip(img.data, oy, ox, flip, pad=pad)
    return Tensor(normalize(out, mean, std))


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over all pixels."""
    x = ds.images.data
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, std


_CIFAR_PIXELS = 3072


def load_cifar_binary(path: str | os.PathLike, variant: str = "cifar10") -> Dataset:
    """Read a CIFAR binary batch file into a Dataset with [0, 1] pixels.

    cifar10 records are 1 label byte + 3072 CHW pixel bytes; cifar100
    records carry 2 label bytes (coarse, fine) and the fine label is kept.
    """
    if variant == "cifar10":
        label_bytes, num_classes = 1, 10
    elif variant == "cifar100":
        label_bytes, num_classes = 2, 100
    else:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    record = label_bytes + _CIFAR_PIXELS
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    if raw.size % record != 0:
        raise DataFormatError(
            f"{path}: file length {raw.size} is not a multiple of the "
            f"{record}-byte record size; truncated record begins at byte "
            f"{(raw.size // record) * record}"
        )
    n = raw.size // record
    rows = raw.reshape(n, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    images = rows[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(Tensor(images), labels, num_classes)


def synth_classification(
    num_classes: int,
    per_class: int,
    input_dim: int,
    seed: int,
    separation: float = 3.0,
    spread: float = 1.0,
) -> Dataset:
    """Gaussian class clusters, deterministic given the seed.

    Class means are random unit directions scaled by ``separation``; samples
    add isotropic noise of scale ``spread``. The defaults were calibrated so
    a small centralized MLP fits the training set (>= 95% accuracy) within
    200 epochs.
    """
    if num_classes < 1 or per_class < 1 or input_dim < 1:
        raise ConfigError("num_classes, per_class and input_dim must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(num_classes, input_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    xs = np.empty((num_classes * per_class, input_dim), dtype=np.float64)
    ys = np.empty(num_classes * per_class, dtype=np.int64)
    for cls in range(num_classes):
        lo = cls * per_class
        xs[lo : lo + per_class] = means[cls] + spread * rng.normal(
            0.0, 1.0, size=(per_class, input_dim)
        )
        ys[lo : lo + per_class] = cls
    return Dataset(Tensor(xs), ys, num_classes)


def split_per_class(ds: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """Deterministic per-class head/tail split into train and held-out sets."""
    train_idx, test_idx = [], []
    for cls in range(ds.num_classes):
        idx = np.where(ds.labels == cls)[0]
        if len(idx) <= train_per_class:
            raise ConfigError(
                f"class {cls} has {len(idx)} samples, cannot hold out past {train_per_class}"
            )
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    return (
        Dataset(Tensor(ds.images.data[tr]), ds.labels[tr], ds.num_classes),
        Dataset(Tensor(ds.images.data[te]), ds.labels[te], ds.num_classes),
    )
