"""Task construction: IDX digit files, pixel-permuted task sequences,
synthetic Gaussian class tasks and class-split sequences."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PROVENANCES = ("idx", "digits", "synthetic")


@dataclass(frozen=True)
class PermutationSpec:
    seed: int
    permutation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.permutation)
        if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(p.size)):
            raise InputError("permutation is not a bijection on pixel indices")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x[:, self.permutation]

    def inverse(self) -> np.ndarray:
        return np.argsort(self.permutation)


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    num_classes: int
    provenance: str = "synthetic"
    permutation: PermutationSpec | None = None
    classes: tuple[int, ...] | None = None  # original class ids, for split tasks

    def __post_init__(self):
        if self.x_train.ndim != 2 or self.x_eval.ndim != 2:
            raise InputError("inputs must be 2-D (examples, features)")
        if self.x_train.shape[1] != self.x_eval.shape[1]:
            raise InputError("train and eval inputs differ in dimension")
        if len(self.x_train) != len(self.y_train) or len(self.x_eval) != len(self.y_eval):
            raise InputError("inputs and labels differ in length")
        for y in (self.y_train, self.y_eval):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise InputError("class index out of range")
        if not (np.all(np.isfinite(self.x_train)) and np.all(np.isfinite(self.x_eval))):
            raise InputError("inputs contain NaN or Inf")
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {self.provenance!r}")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def _open(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number", offset=len(buf))
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{what}: truncated dimension header", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise FormatError(
            f"{what}: truncated payload, expected {count} bytes", offset=len(buf)
        )
    if len(buf) > header + count:
        raise FormatError(f"{what}: trailing bytes after payload", offset=header + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _parse_idx(_open(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_open(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def find_idx_files(data_dir) -> tuple[Path, Path] | None:
    """Locate the MNIST training image/label pair in ``data_dir``."""
    if data_dir is None:
        return None
    root = Path(data_dir)
    for stem_img, stem_lbl in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ):
        for suffix in ("", ".gz"):
            img, lbl = root / (stem_img + suffix), root / (stem_lbl + suffix)
            if img.exists() and lbl.exists():
                return img, lbl
    return None


def downscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` average pooling of ``(N, H, W)`` images."""
    n, h, w = images.shape
    if factor < 1 or h % factor or w % factor:
        raise InputError(f"image side {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return images.copy()
    return images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def make_base(
    images: np.ndarray,
    labels: np.ndarray,
    n_train: int,
    n_eval: int,
    seed: int,
    provenance: str,
    num_classes: int | None = None,
) -> TaskDataset:
    """Flatten images and draw disjoint train/eval splits with a seeded shuffle."""
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if n_train + n_eval > x.shape[0]:
        raise ConfigError(
            f"requested {n_train}+{n_eval} examples but only {x.shape[0]} available"
        )
    order = np.random.default_rng(seed).permutation(x.shape[0])
    tr, ev = order[:n_train], order[n_train:n_train + n_eval]
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return TaskDataset(1, x[tr], labels[tr], x[ev], labels[ev], k, provenance)


def load_digits_base(n_train: int = 1297, n_eval: int = 500, seed: int = 0) -> TaskDataset:
    """The 8x8 handwritten digits bundled with scikit-learn (1797 images)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return make_base(d.images / 16.0, d.target.astype(np.int64), n_train, n_eval, seed, "digits", 10)


def load_idx_base(
    data_dir, factor: int = 2, n_train: int = 2000, n_eval: int = 500, seed: int = 0
) -> TaskDataset:
    found = find_idx_files(data_dir)
    if found is None:
        raise FileNotFoundError(f"no IDX training files in {data_dir}")
    images, labels = load_idx(*found)
    return make_base(downscale(images, factor), labels, n_train, n_eval, seed, "idx", 10)


def permuted_tasks(base: TaskDataset, num_tasks: int, seed: int) -> list[TaskDataset]:
    """Task 1 keeps pixel order; tasks 2..T apply independent seeded permutations."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be at least 1")
    rng = np.random.default_rng(seed)
    d = base.input_dim
    tasks = []
    for t in range(1, num_tasks + 1):
        perm = np.arange(d) if t == 1 else rng.permutation(d)
        spec = PermutationSpec(seed, perm)
        tasks.append(
            replace(
                base,
                task_id=t,
                x_train=spec.apply(base.x_train),
                x_eval=spec.apply(base.x_eval),
                permutation=spec,
            )
        )
    return tasks


def synthetic_gaussian_tasks(
    num_tasks: int,
    classes: int,
    dim: int,
    separation: float,
    seed: int,
    n_train: int = 1000,
    n_eval: int = 500,
) -> list[TaskDataset]:
    """Isotropic unit-variance Gaussian classes with means on a sphere.

    Each task draws its own class means at distance ``separation`` from the
    origin; labels are balanced (round-robin) before shuffling.
    """
    if num_tasks < 1 or classes < 2 or dim < 1:
        raise ConfigError("need num_tasks >= 1, classes >= 2, dim >= 1")
    if separation < 0:
        raise ConfigError(f"separation must be nonnegative, got {separation}")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(1, num_tasks + 1):
        dirs = rng.standard_normal((classes, dim))
        means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

        def draw(n):
            y = rng.permutation(np.arange(n) % classes)
            return means[y] + rng.standard_normal((n, dim)), y.astype(np.int64)

        xtr, ytr = draw(n_train)
        xev, yev = draw(n_eval)
        tasks.append(TaskDataset(t, xtr, ytr, xev, yev, classes, "synthetic"))
    return tasks


def split_tasks(base: TaskDataset, partitions: Sequence[Sequence[int]]) -> list[TaskDataset]:
    """One task per class subset, labels remapped to ``0..len(subset)-1``."""
    seen: set[int] = set()
    for part in partitions:
        if len(part) == 0:
            raise ConfigError("empty class partition")
        overlap = seen.intersection(part)
        if overlap or len(set(part)) != len(part):
            raise ConfigError(f"partitions overlap on classes {sorted(overlap) or list(part)}")
        seen.update(part)
    tasks = []
    for t, part in enumerate(partitions, start=1):
        lut = {int(c): i for i, c in enumerate(part)}

        def pick(x, y):
            rows = np.isin(y, list(part))
            return x[rows], np.array([lut[int(c)] for c in y[rows]], dtype=np.int64)

        xtr, ytr = pick(base.x_train, base.y_train)
        xev, yev = pick(base.x_eval, base.y_eval)
        tasks.append(
            TaskDataset(t, xtr, ytr, xev, yev, len(part), base.provenance, classes=tuple(int(c) for c in part))
        )
    return tasks


def pair_partitions(num_classes: int = 10) -> list[list[int]]:
    return [[c, c + 1] for c in range(0, num_classes - 1, 2)]


def data_dir_from_env() -> str | None:
    return os.environ.get("CONNFLOW_DATA_DIR")
