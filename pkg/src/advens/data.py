"""Desk-scale datasets, a CIFAR-10 binary reader, splitting and batching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from math import ceil, floor
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_LABEL_BYTES = 1
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD = CIFAR_LABEL_BYTES + 3 * 32 * 32


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, *input_shape), float64
    labels: np.ndarray  # (n,), int64
    classes: int
    provenance: str = ""
    domain_clamp: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, self.provenance,
                       self.domain_clamp, dict(self.meta))


def _seq_rng(*words) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(w) % (1 << 64) for w in words]))


def gen_two_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved unit half-circles, centred at (0, 0) and (1, 0.5)."""
    if n < 2 or noise < 0:
        raise ValueError("gen_two_moons needs n >= 2 and noise >= 0")
    rng = _seq_rng(seed)
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    pts = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    labels = np.concatenate([np.zeros(n_out, np.int64), np.ones(n_in, np.int64)])
    perm = rng.permutation(n)
    pts, labels = pts[perm], labels[perm]
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    meta = {"generator": "two_moons", "n": n, "noise": noise, "seed": seed}
    return Dataset(pts, labels, 2, f"two_moons(n={n},noise={noise},seed={seed})", None, meta)


def blob_centers(class_count: int, dim: int, radius: float = 1.0, fine_dims: int = 0,
                 fine_scale: float = 0.05, modes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic blob centres and the class owning each.

    Centre ``i`` sits on a signed axis vertex of the first
    ``dim - fine_dims`` coordinates: slot ``i mod 2m`` picks axis
    ``slot // 2`` and sign ``(-1)^slot``, shell ``i // 2m`` sets the radius
    ``radius * (shell + 1)``. With one mode per class, centre ``c`` belongs
    to class ``c``; with several, centre ``i`` belongs to class
    ``(slot + 3 * shell) mod class_count`` so that one ray carries different
    classes at successive radii. The last ``fine_dims`` coordinates hold the
    class index in base 3, digits mapped to {-1, 0, +1} and scaled by
    ``fine_scale``.
    """
    coarse = dim - fine_dims
    if coarse < 1:
        raise ValueError("need at least one coarse dimension")
    if fine_dims and class_count > 3 ** fine_dims:
        raise ValueError(f"{fine_dims} fine dims encode at most {3 ** fine_dims} classes")
    if modes < 1:
        raise ValueError("modes must be >= 1")
    n_centers = class_count * modes
    centers = np.zeros((n_centers, dim))
    owner = np.zeros(n_centers, dtype=np.int64)
    for i in range(n_centers):
        shell, slot = divmod(i, 2 * coarse)
        axis, neg = divmod(slot, 2)
        centers[i, axis] = radius * (shell + 1) * (-1.0 if neg else 1.0)
        owner[i] = i if modes == 1 else (slot + 3 * shell) % class_count
    if modes > 1 and np.any(np.bincount(owner, minlength=class_count) != modes):
        raise ValueError("centre assignment is unbalanced for this class_count/dim")
    for i in range(n_centers):
        v = owner[i]
        for j in range(fine_dims):
            v, digit = divmod(v, 3)
            centers[i, coarse + j] = fine_scale * (digit - 1)
    return centers, owner


def gen_blobs(n: int, class_count: int, dim: int, spread: float, seed: int, *,
              radius: float = 1.0, fine_dims: int = 0, fine_scale: float = 0.05,
              modes: int = 1) -> Dataset:
    """Balanced Gaussian blobs around :func:`blob_centers`.

    Noise of standard deviation ``spread`` is added to the coarse coordinates
    only; the fine coordinates are an exact, low-amplitude class code. With
    ``fine_dims > 0`` the code is perfectly predictive but can be overwritten
    by any perturbation larger than ``fine_scale``.
    """
    if class_count < 2 or dim < 2:
        raise ValueError("gen_blobs needs class_count >= 2 and dim >= 2")
    rng = _seq_rng(seed)
    centers, owner = blob_centers(class_count, dim, radius, fine_dims, fine_scale, modes)
    by_class = [np.nonzero(owner == c)[0] for c in range(class_count)]
    order = np.arange(n)
    labels_sorted = order % class_count
    mode_sorted = (order // class_count) % modes
    center_idx = np.array([by_class[c][m] for c, m in zip(labels_sorted, mode_sorted)], dtype=np.int64)
    perm = rng.permutation(n)
    center_idx = center_idx[perm]
    labels = owner[center_idx]
    x = centers[center_idx].copy()
    coarse = dim - fine_dims
    if spread > 0:
        x[:, :coarse] += spread * rng.standard_normal((n, coarse))
    meta = {"generator": "blobs", "n": n, "class_count": class_count, "dim": dim,
            "spread": spread, "seed": seed, "radius": radius, "fine_dims": fine_dims,
            "fine_scale": fine_scale, "modes": modes}
    prov = (f"blobs(n={n},classes={class_count},dim={dim},spread={spread},seed={seed},"
            f"radius={radius},fine_dims={fine_dims},fine_scale={fine_scale},modes={modes})")
    return Dataset(x, labels, class_count, prov, None, meta)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def parse_cifar10_binary(raw: bytes, source: str = "<bytes>") -> Dataset:
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise FormatError(f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                          f"incomplete record at offset {n * CIFAR_RECORD}")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{source}: record {i} has label byte {labels[i]} > 9")
    pixels = buf[:, 1:].reshape((n,) + CIFAR_IMAGE_SHAPE).astype(np.float64) / 255.0
    digest = hashlib.sha256(raw).hexdigest()[:16]
    return Dataset(pixels, labels, 10, f"cifar10-binary:{digest}", (0.0, 1.0),
                   {"source": source, "sha256": digest})


def load_cifar10_binary(path) -> Dataset:
    path = Path(path)
    return parse_cifar10_binary(path.read_bytes(), str(path))


def encode_cifar10_binary(dataset: Dataset) -> bytes:
    x = np.asarray(dataset.inputs).reshape(len(dataset), -1)
    if x.shape[1] != CIFAR_RECORD - 1:
        raise ValueError(f"expected {CIFAR_RECORD - 1} pixels per record, got {x.shape[1]}")
    pix = np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)
    out = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels.astype(np.uint8)
    out[:, 1:] = pix
    return out.tobytes()


def write_cifar10_binary(dataset: Dataset, path) -> None:
    Path(path).write_bytes(encode_cifar10_binary(dataset))


# ---------------------------------------------------------------------------
# splitting and batching


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test partition.

    The test size is round(test_fraction * n); per-class quotas come from a
    largest-remainder allocation so every class gets floor or ceil of its
    share.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(dataset)
    rng = _seq_rng(seed)
    n_test = min(max(floor(test_fraction * n + 0.5), 1), n - 1)
    classes = np.arange(dataset.classes)
    counts = np.array([np.sum(dataset.labels == c) for c in classes])
    share = counts * (n_test / n)
    quota = np.floor(share).astype(int)
    order = sorted(classes, key=lambda c: (-(share[c] - quota[c]), c))
    for c in order[: n_test - quota.sum()]:
        quota[c] += 1
    test_idx = []
    for c in classes:
        members = np.nonzero(dataset.labels == c)[0]
        test_idx.extend(rng.permutation(members)[: quota[c]])
    test_mask = np.zeros(n, dtype=bool)
    test_mask[np.asarray(test_idx, dtype=np.int64)] = True
    return dataset.subset(np.nonzero(~test_mask)[0]), dataset.subset(np.nonzero(test_mask)[0])


def batches(dataset: Dataset, batch_size: int, epoch_seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled minibatches; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = _seq_rng(epoch_seed).permutation(len(dataset))
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = perm[start:start + batch_size]
        out.append((dataset.inputs[idx], dataset.labels[idx]))
    return out


def minibatch_stream(dataset: Dataset, batch_size: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless minibatches; epoch ``e`` is shuffled with seed (seed, e)."""
    epoch = 0
    while True:
        epoch_seed = int(np.random.SeedSequence([int(seed) % (1 << 64), epoch]).generate_state(1, np.uint64)[0])
        yield from batches(dataset, batch_size, epoch_seed)
        epoch += 1


def n_batches(n: int, batch_size: int) -> int:
    return ceil(n / batch_size)
