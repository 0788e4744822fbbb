"""Desk-scale datasets: synthetic 2-D tasks and an IDX image loader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray          # (n, d) float64
    labels: np.ndarray          # (n,) int64, values in [0, num_classes)
    num_classes: int
    box: tuple[np.ndarray, np.ndarray] | None = None
    provenance: str = ""

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise ValueError("inputs must be (n, d) and labels (n,)")
        if not np.isfinite(inputs).all():
            raise ValueError("inputs contain non-finite values")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.box is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (inputs.shape[1],)).copy()
                      for b in self.box)
            if inputs.size and ((inputs < lo).any() or (inputs > hi).any()):
                raise ValueError("inputs fall outside the declared box")
            object.__setattr__(self, "box", (lo, hi))
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.box, self.provenance)


def _rescale_unit(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return np.clip((x - lo) / span, 0.0, 1.0)


def two_moons_arcs(n0: int, n1: int) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless moon points: upper arc (cos t, sin t), lower arc (1 - cos t, 0.5 - sin t)."""
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    return upper, lower


def generate_synthetic(kind: str, n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Balanced binary ``two-moons`` or ``gaussian-blobs`` rescaled to [0, 1]^2."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    n0, n1 = n // 2, n - n // 2
    if kind == "two-moons":
        upper, lower = two_moons_arcs(n0, n1)
        x = np.concatenate([upper, lower])
        x = x + noise * rng.standard_normal(x.shape)
    elif kind == "gaussian-blobs":
        centers = np.array([[-1.0, -1.0], [1.0, 1.0]])
        x = np.concatenate([centers[0] + noise * rng.standard_normal((n0, 2)),
                            centers[1] + noise * rng.standard_normal((n1, 2))])
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    x = _rescale_unit(x)[perm]
    return Dataset(x, y[perm], 2, box=None,
                   provenance=f"{kind}(n={n}, noise={noise}, seed={seed})")


def _read_header(data: bytes, magic: int, ndims: int, path) -> tuple[list[int], int]:
    need = 4 * (1 + ndims)
    if len(data) < need:
        raise ValueError(f"{path}: truncated IDX header")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = list(struct.unpack_from(f">{ndims}I", data, 4))
    return dims, need


def load_idx(images_path: str | Path, labels_path: str | Path, limit: int | None = None,
             num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    if limit is not None and limit <= 0:
        raise ValueError("limit must be positive")
    img_bytes = Path(images_path).read_bytes()
    lbl_bytes = Path(labels_path).read_bytes()
    (count, rows, cols), off_i = _read_header(img_bytes, IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,), off_l = _read_header(lbl_bytes, IDX_LABELS_MAGIC, 1, labels_path)
    if count != n_labels:
        raise ValueError(f"image count {count} does not match label count {n_labels}")
    if len(img_bytes) - off_i < count * rows * cols:
        raise ValueError(f"{images_path}: truncated image payload")
    if len(lbl_bytes) - off_l < count:
        raise ValueError(f"{labels_path}: truncated label payload")
    n = count if limit is None else min(count, limit)
    if n == 0:
        raise ValueError("IDX files contain no items")
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=n * rows * cols, offset=off_i)
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, count=n, offset=off_l).astype(np.int64)
    x = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    d = rows * cols
    return Dataset(x, labels, num_classes, box=(np.zeros(d), np.ones(d)),
                   provenance=f"idx({Path(images_path).name}, n={n})")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint random train/test split covering the dataset."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def iter_batches(dataset: Dataset, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, y)`` mini-batches; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]
