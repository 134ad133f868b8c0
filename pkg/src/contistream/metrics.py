"""Accuracy matrix metrics, overhead accounting and training diagnostics.

``R[i, j]`` holds the test accuracy on task ``j`` after training task ``i``
(0-based here); entries with ``j > i`` are NaN.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import prod

import numpy as np

from .autodiff import Tensor, make_rng, no_grad
from .errors import ContractError
from .models import ContinualModel


def empty_r_matrix(task_count: int) -> np.ndarray:
    return np.full((task_count, task_count), np.nan)


def acc(R) -> float:
    """Mean of the final row."""
    R = np.asarray(R, dtype=float)
    last = R[-1]
    if np.any(np.isnan(last)):
        raise ContractError("the last row of R is incomplete")
    return float(last.mean())


def bwt(R) -> float:
    """Signed backward transfer averaged over all ``(i, j)`` with ``j < i``."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    if np.any(np.isnan(R[np.tril_indices(n)])):
        raise ContractError("R has missing lower-triangular entries")
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(1, n):
        for j in range(i):
            total += R[i, j] - R[j, j]
    return total / (n * (n - 1) / 2)


def forgetting(R) -> float:
    return -bwt(R)


# --------------------------------------------------------------------------
# overhead


@dataclass(frozen=True)
class MemoryGeometry:
    sample_shape: tuple
    size: int

    @property
    def floats(self) -> int:
        return prod(self.sample_shape) * self.size


@dataclass(frozen=True)
class OverheadReport:
    memory_floats: int
    scaler_weight_floats: int
    scaler_bias_floats: int
    formula_scaler_floats: int

    @property
    def o_cg(self) -> int:
        """Memory plus scaler weights (bias-free convention)."""
        return self.memory_floats + self.scaler_weight_floats

    @property
    def o_cg_with_bias(self) -> int:
        return self.o_cg + self.scaler_bias_floats


def scaler_formula_floats(embedding_dim: int, class_counts) -> int:
    """``I * sum_i (i - 1) |Y^i|`` over 1-based task indices."""
    return embedding_dim * sum(i * c for i, c in enumerate(class_counts))


def overhead(memory, model: ContinualModel | None = None) -> OverheadReport:
    """Extra floats stored by a rehearsal method, with and without gates.

    ``memory`` is a :class:`MemoryGeometry` or anything with ``sample_shape``
    and ``size`` attributes.
    """
    o = prod(memory.sample_shape) * int(memory.size)
    if model is None or model.head_mode == "incremental":
        return OverheadReport(o, 0, 0, 0)
    counts = model.count_parameters()
    formula = scaler_formula_floats(model.embedding_dim, model.class_counts)
    return OverheadReport(o, counts.scaler_weights, counts.scaler_biases, formula)


# --------------------------------------------------------------------------
# gate growth and timing


def head_count(t: int) -> int:
    """Number of gates after ``t`` tasks with cascaded gates."""
    if t < 1:
        raise ContractError("task index must be at least 1")
    return (1 + (t - 1)) * (t - 1) // 2


def head_count_recursive(t: int) -> int:
    if t < 1:
        raise ContractError("task index must be at least 1")
    total = 0
    for k in range(2, t + 1):
        total += k - 1
    return total


def time_heads(task_count: int = 20, repeats: int = 100, classes_per_task: int = 2,
               embedding_dim: int = 64, batch_size: int = 32, warmup: int = 3, seed: int = 0):
    """Mean head-only forward time per task count for cascaded and incremental heads.

    Returns one dict per task count with times in milliseconds.
    """
    if task_count < 1 or repeats < 10:
        raise ContractError("need task_count >= 1 and repeats >= 10")
    sizes = [embedding_dim, embedding_dim]
    models = {mode: ContinualModel(sizes, mode, seed=seed) for mode in ("incremental", "cascaded_gates")}
    e = Tensor(make_rng(seed).standard_normal((batch_size, embedding_dim)))
    rows = []
    for k in range(1, task_count + 1):
        row = {"tasks": k}
        for mode, model in models.items():
            model.add_task(classes_per_task)
            with no_grad():
                for _ in range(warmup):
                    model.head_forward(e)
                start = time.perf_counter()
                for _ in range(repeats):
                    model.head_forward(e)
                elapsed = time.perf_counter() - start
            row[f"{mode}_ms"] = 1000.0 * elapsed / repeats
        row["gates"] = len(models["cascaded_gates"].scalers)
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# diagnostics


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mean_kl(p: np.ndarray, q: np.ndarray, floor: float = 1e-12) -> float:
    """Batch mean of ``KL(p || q)``; zero when ``p`` and ``q`` are identical."""
    if len(p) == 0:
        return 0.0
    q = np.maximum(q, floor)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0)
    return float(terms.sum(axis=-1).mean())


def predict_probs(model, x: np.ndarray) -> np.ndarray:
    return softmax_rows(model.predict_logits(x))


def kl_drift(model, reference_probs: dict, splits: dict) -> dict:
    """Mean ``KL(current || reference)`` per past task split."""
    return {t: mean_kl(predict_probs(model, splits[t]), reference_probs[t]) for t in reference_probs}


def replay_overfit(model, memory_x: np.ndarray, memory_y: np.ndarray, memory_task: np.ndarray,
                   test_splits: dict) -> dict:
    """One epoch slice of the replay-overfitting diagnostics.

    ``memory_task`` gives the (1-based) task of every stored sample and
    ``test_splits`` maps task index to ``(X, y)``.
    """
    logits = model.predict_logits(memory_x)
    pred = logits.argmax(axis=1)
    out = {
        "gt_logit": float(logits[np.arange(len(memory_y)), memory_y].mean()) if len(memory_y) else 0.0,
        "memory_acc": {},
        "test_acc": {},
    }
    for t, (x, y) in test_splits.items():
        mask = memory_task == t
        out["memory_acc"][t] = float((pred[mask] == memory_y[mask]).mean()) if mask.any() else float("nan")
        out["test_acc"][t] = float((model.predict_logits(x).argmax(axis=1) == y).mean())
    return out


@dataclass
class DiagnosticsStream:
    """Per-epoch series sharing one epoch axis.

    Forgetting of a split is its running peak accuracy minus its current one;
    peaks are seeded when a task ends.
    """

    epochs: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    gt_logit: list = field(default_factory=list)
    memory_acc: dict = field(default_factory=dict)
    test_acc: dict = field(default_factory=dict)
    memory_forgetting: dict = field(default_factory=dict)
    test_forgetting: dict = field(default_factory=dict)
    kl_drift: dict = field(default_factory=dict)
    _peaks: dict = field(default_factory=dict, repr=False)

    def seed_peak(self, task: int, memory_acc: float, test_acc: float) -> None:
        self._peaks[("memory", task)] = memory_acc
        self._peaks[("test", task)] = test_acc

    def _forget(self, kind: str, task: int, value: float) -> float:
        key = (kind, task)
        peak = max(self._peaks.get(key, value), value)
        self._peaks[key] = peak
        return peak - value

    def record(self, epoch: int, task: int, overfit: dict | None = None,
               drift: dict | None = None) -> None:
        self.epochs.append(epoch)
        self.tasks.append(task)
        n = len(self.epochs)
        if overfit is not None:
            self.gt_logit.append(overfit["gt_logit"])
            for t, v in overfit["memory_acc"].items():
                _push(self.memory_acc, t, v, n)
                _push(self.memory_forgetting, t, self._forget("memory", t, v), n)
            for t, v in overfit["test_acc"].items():
                _push(self.test_acc, t, v, n)
                _push(self.test_forgetting, t, self._forget("test", t, v), n)
        else:
            self.gt_logit.append(float("nan"))
        for t, v in (drift or {}).items():
            _push(self.kl_drift, t, v, n)
        for series in (self.memory_acc, self.test_acc, self.memory_forgetting,
                       self.test_forgetting, self.kl_drift):
            for values in series.values():
                values.extend([float("nan")] * (n - len(values)))

    def to_dict(self) -> dict:
        def clean(values):
            return [None if v != v else v for v in values]

        def keyed(d):
            return {str(k): clean(v) for k, v in sorted(d.items())}

        return {
            "epochs": self.epochs,
            "tasks": self.tasks,
            "gt_logit": clean(self.gt_logit),
            "memory_acc": keyed(self.memory_acc),
            "test_acc": keyed(self.test_acc),
            "memory_forgetting": keyed(self.memory_forgetting),
            "test_forgetting": keyed(self.test_forgetting),
            "kl_drift": keyed(self.kl_drift),
        }


def _push(series: dict, key, value: float, length: int) -> None:
    values = series.setdefault(key, [])
    values.extend([float("nan")] * (length - 1 - len(values)))
    values.append(value)
