"""Fixed-capacity, class-balanced rehearsal memory.

Memory dump layout (little-endian)::

    b"CLMB" | uint8 0 | uint32 class_count K | uint32 feature_dim
    | uint32 label * K | uint32 stored_count * K
    | float64 sample blocks, one per class in label order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .errors import ContractError, FormatError

MEMORY_MAGIC = b"CLMB"


def class_quotas(capacity: int, classes_seen: int) -> np.ndarray:
    """Equal split of ``capacity``; the remainder goes to the lowest class ids."""
    quotas = np.full(classes_seen, capacity // classes_seen, dtype=np.int64)
    quotas[: capacity % classes_seen] += 1
    return quotas


class RehearsalMemory:
    def __init__(self, capacity: int, seed=0):
        if capacity < 0:
            raise ContractError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.rng = make_rng(seed)
        self.entries: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def classes(self) -> list:
        return sorted(self.entries)

    def counts(self) -> dict:
        return {c: len(v) for c, v in sorted(self.entries.items())}

    def contents(self):
        """All stored samples as ``(X, y)`` in class order."""
        if not self.entries:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        labels = self.classes
        x = np.concatenate([self.entries[c] for c in labels])
        y = np.concatenate([np.full(len(self.entries[c]), c, dtype=np.int64) for c in labels])
        return x, y

    def update_after_task(self, samples: np.ndarray, labels, total_classes_seen: int) -> None:
        """Rebalance quotas, evict at random, then add a random subset of the new classes."""
        if self.capacity < total_classes_seen:
            raise ContractError(
                f"capacity {self.capacity} cannot hold one sample for each of {total_classes_seen} classes")
        labels = np.asarray(labels, dtype=np.int64)
        quotas = class_quotas(self.capacity, total_classes_seen)
        for c in self.classes:
            stored = self.entries[c]
            if len(stored) > quotas[c]:
                keep = np.sort(self.rng.choice(len(stored), size=quotas[c], replace=False))
                self.entries[c] = stored[keep]
        for c in np.unique(labels):
            c = int(c)
            if c >= total_classes_seen:
                raise ContractError(f"label {c} beyond the {total_classes_seen} classes seen")
            pool = samples[labels == c]
            take = min(int(quotas[c]), len(pool))
            chosen = np.sort(self.rng.choice(len(pool), size=take, replace=False))
            self.entries[c] = pool[chosen].copy()

    def balanced_counts(self, batch_size: int) -> dict:
        labels = self.classes
        base, extra = divmod(batch_size, len(labels))
        counts = dict.fromkeys(labels, base)
        for c in self.rng.choice(labels, size=extra, replace=False) if extra else ():
            counts[int(c)] += 1
        return counts

    def sample_balanced(self, batch_size: int):
        """Class-balanced batch of exactly ``batch_size`` samples."""
        if not self.entries:
            raise ContractError("cannot sample from an empty memory")
        xs, ys = [], []
        for c, n in self.balanced_counts(batch_size).items():
            stored = self.entries[c]
            idx = self.rng.choice(len(stored), size=n, replace=n > len(stored))
            xs.append(stored[idx])
            ys.append(np.full(n, c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    def dump(self, path) -> None:
        labels = self.classes
        dim = self.entries[labels[0]].shape[1] if labels else 0
        counts = [len(self.entries[c]) for c in labels]
        header = MEMORY_MAGIC + struct.pack(
            f"<BII{len(labels)}I{len(labels)}I", 0, len(labels), dim, *labels, *counts)
        body = b"".join(self.entries[c].astype("<f8").tobytes() for c in labels)
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path, capacity: int, seed=0) -> "RehearsalMemory":
        data = Path(path).read_bytes()
        if len(data) < 13 or data[:4] != MEMORY_MAGIC:
            raise FormatError("not a memory dump (bad magic)")
        _, k, dim = struct.unpack_from("<BII", data, 4)
        offset = 13 + 8 * k
        if len(data) < offset:
            raise FormatError("truncated memory header")
        labels = struct.unpack_from(f"<{k}I", data, 13)
        counts = struct.unpack_from(f"<{k}I", data, 13 + 4 * k)
        if len(data) - offset != 8 * dim * sum(counts):
            raise FormatError("memory dump body does not match its header")
        memory = cls(capacity, seed)
        floats = np.frombuffer(data, dtype="<f8", offset=offset)
        pos = 0
        for c, n in zip(labels, counts):
            memory.entries[int(c)] = floats[pos:pos + n * dim].reshape(n, dim).astype(np.float64)
            pos += n * dim
        return memory
