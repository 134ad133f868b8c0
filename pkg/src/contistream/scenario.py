"""Class-incremental task streams, synthetic data and IDX loading."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import make_rng
from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEV_FRACTION = 0.1


@dataclass(frozen=True, eq=False)
class Dataset:
    """Flat float64 samples with original class ids.

    ``test`` optionally carries the held-out split of the same classes.
    """

    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    test: Optional["Dataset"] = None
    sample_shape: tuple = ()

    def __post_init__(self):
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ContractError("samples must be [N, D] with one label per row")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise ContractError("labels must lie in [0, class_count)")
        if len(np.unique(self.labels)) != self.class_count:
            raise ContractError("every class needs at least one sample")
        if not self.sample_shape:
            object.__setattr__(self, "sample_shape", (self.samples.shape[1],))

    @property
    def feature_dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def with_test(self, test: "Dataset") -> "Dataset":
        if test.class_count != self.class_count or test.feature_dim != self.feature_dim:
            raise ContractError("test split does not match the training geometry")
        return replace(self, test=test)


@dataclass(frozen=True)
class Task:
    index: int
    original_classes: tuple
    remapped_range: tuple
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray

    @property
    def class_count(self) -> int:
        return len(self.original_classes)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Ordered tasks over a dataset; labels are remapped to ``[0, total_classes)``."""

    dataset: Dataset
    tasks: tuple
    seed: int
    class_order: np.ndarray = field(repr=False)

    @property
    def total_classes(self) -> int:
        return self.dataset.class_count

    @property
    def task_count(self) -> int:
        return len(self.tasks)

    @property
    def feature_dim(self) -> int:
        return self.dataset.feature_dim

    def remap(self, original_labels) -> np.ndarray:
        lookup = np.empty(len(self.class_order), dtype=np.int64)
        lookup[self.class_order] = np.arange(len(self.class_order))
        return lookup[np.asarray(original_labels, dtype=np.int64)]

    def split(self, t: int, which: str = "train"):
        """``(X, y_remapped)`` of task ``t`` (1-based) for train, dev or test."""
        task = self.tasks[t - 1]
        source = self.dataset.test if which == "test" else self.dataset
        if source is None:
            raise ContractError("dataset has no test split")
        idx = getattr(task, which)
        return source.samples[idx], self.remap(source.labels[idx])


def build_scenario(dataset: Dataset, task_count: int, seed: int,
                   dev_fraction: float = DEV_FRACTION) -> Scenario:
    """Shuffle the classes with ``seed`` and cut them into equal tasks."""
    classes = dataset.class_count
    if task_count < 1 or classes % task_count:
        raise ContractError(f"{classes} classes cannot be split into {task_count} equal tasks")
    per_task = classes // task_count
    if per_task < 2:
        raise ContractError("every task needs at least two classes")
    rng = make_rng(seed)
    order = rng.permutation(classes)
    split_rng = make_rng([seed, 1])
    tasks = []
    for t in range(task_count):
        group = order[t * per_task:(t + 1) * per_task]
        train, dev = [], []
        for c in group:
            idx = np.flatnonzero(dataset.labels == c)
            idx = idx[split_rng.permutation(len(idx))]
            n_dev = int(round(dev_fraction * len(idx)))
            if n_dev >= len(idx):
                n_dev = len(idx) - 1
            dev.append(np.sort(idx[:n_dev]))
            train.append(np.sort(idx[n_dev:]))
        test = (np.flatnonzero(np.isin(dataset.test.labels, group))
                if dataset.test is not None else np.zeros(0, dtype=np.int64))
        tasks.append(Task(
            index=t + 1,
            original_classes=tuple(int(c) for c in group),
            remapped_range=(t * per_task, (t + 1) * per_task),
            train=np.concatenate(train),
            dev=np.concatenate(dev),
            test=test,
        ))
    return Scenario(dataset, tuple(tasks), int(seed), order)


def generate_synthetic(class_count: int = 10, per_class: int = 200, feature_dim: int = 16,
                       spread: float = 0.25, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with means on the unit sphere.

    The returned dataset has ``per_class`` training samples per class and a
    ``test`` split with ``per_class // 5`` samples per class.
    """
    if class_count < 4 or per_class < 20 or feature_dim < 2 or not spread > 0:
        raise ContractError("degenerate synthetic dataset parameters")
    rng = make_rng(seed)
    means = rng.standard_normal((class_count, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n):
        labels = np.repeat(np.arange(class_count), n)
        samples = means[labels] + spread * rng.standard_normal((len(labels), feature_dim))
        return samples, labels

    x_train, y_train = draw(per_class)
    x_test, y_test = draw(per_class // 5)
    return Dataset(x_train, y_train, class_count, test=Dataset(x_test, y_test, class_count))


def _read_idx(path, magic: int, what: str):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{what} file is truncated")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise FormatError(f"{what} file has magic {found:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{what} file is truncated")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise FormatError(f"{what} file is truncated: {len(data) - header} of {size} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "image")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(samples, labels, int(labels.max()) + 1 if len(labels) else 0,
                   sample_shape=tuple(int(d) for d in images.shape[1:]))
