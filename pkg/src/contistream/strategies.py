"""Task-loop trainers sharing one epoch/batch engine.

Strategies
----------
naive       full-softmax cross-entropy on the current task only
cumulative  the same loss on the union of all training sets so far
replay      current batch plus an equally sized balanced memory batch
ld          current-batch cross-entropy plus ``alpha * KL`` to a teacher on memory
md          ``lam * MD + restricted CE`` on the current batch plus KL on memory
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import SgdState, backward, make_rng, op_add, op_scale, op_slice, op_softmax, sgd_step
from .errors import ContractError
from .losses import LossConfig, compose_md_loss, cross_entropy, kl_regularizer
from .memory import RehearsalMemory
from .metrics import DiagnosticsStream, acc, bwt, empty_r_matrix, kl_drift, mean_kl, predict_probs, replay_overfit
from .models import HEAD_MODES, ContinualModel
from .scenario import Scenario

STRATEGIES = ("naive", "cumulative", "replay", "ld", "md")
MEMORY_STRATEGIES = ("replay", "ld", "md")


@dataclass
class TrainConfig:
    """Optimisation and model settings; defaults follow the C10-5 protocol."""

    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.8
    memory_capacity: int = 200
    lam: float = 0.1
    alpha: float = 0.1
    head_mode: str = "incremental"
    hidden: tuple = (64,)
    embedding_dim: int = 64
    gamma: float = 1.0
    beta: float = 10.0
    seed: int = 0
    diagnostics: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2")
        if self.head_mode not in HEAD_MODES:
            raise ContractError(f"unknown head mode {self.head_mode!r}")
        if self.memory_capacity < 0:
            raise ContractError("memory_capacity must be non-negative")
        LossConfig(self.lam, self.alpha)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.alpha)

    def layer_sizes(self, input_dim: int) -> list:
        return [int(input_dim), *self.hidden, int(self.embedding_dim)]


@dataclass
class RunRecord:
    strategy: str
    config: dict
    scenario: dict
    R: list
    dev_R: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    boundary_kl: list = field(default_factory=list)
    steps_per_task: list = field(default_factory=list)
    parameter_counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def r_matrix(self) -> np.ndarray:
        return np.array([[np.nan if v is None else v for v in row] for row in self.R], dtype=float)

    @property
    def acc(self) -> float:
        return acc(self.r_matrix)

    @property
    def bwt(self) -> float:
        return bwt(self.r_matrix)

    @property
    def forgetting(self) -> float:
        return -self.bwt

    def to_dict(self) -> dict:
        out = asdict(self)
        out["metrics"] = {"acc": self.acc, "bwt": self.bwt, "forgetting": self.forgetting}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        data = {k: v for k, v in data.items() if k != "metrics"}
        return cls(**data)


def _matrix_to_list(R: np.ndarray) -> list:
    return [[None if math.isnan(v) else float(v) for v in row] for row in R]


def _accuracy(model: ContinualModel, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float((model.predict_logits(x).argmax(axis=1) == y).mean())


class ContinualLearner:
    """Stateful trainer: one call to :meth:`learn_task` per task.

    ``y`` passed to :meth:`learn_task` must already be remapped so that the
    new task's classes follow all previously seen ones.
    """

    def __init__(self, strategy: str, config: TrainConfig, input_dim: int):
        if strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {strategy!r}")
        if strategy in MEMORY_STRATEGIES and config.memory_capacity <= 0:
            raise ContractError(f"{strategy} needs a positive memory capacity")
        self.strategy = strategy
        self.config = config
        head_mode = config.head_mode if strategy == "md" else "incremental"
        self.model = ContinualModel(config.layer_sizes(input_dim), head_mode,
                                    config.gamma, config.beta, seed=config.seed)
        self.memory = RehearsalMemory(config.memory_capacity, seed=[config.seed, 2])
        self.rng = make_rng([config.seed, 3])
        self.teacher = None
        self.history: list = []
        self.boundary_kl: list = []
        self.steps_per_task: list = []

    @property
    def task(self) -> int:
        return self.model.task_count

    def memory_task_ids(self, labels: np.ndarray) -> np.ndarray:
        offsets = np.asarray(self.model.class_offsets)
        return np.searchsorted(offsets, labels, side="right")

    def _teacher_probs(self, x: np.ndarray) -> np.ndarray:
        return op_softmax(self.teacher(x)).values

    def _begin_task(self, class_count: int) -> None:
        self.model.add_task(class_count)
        self.teacher = None
        if self.strategy in ("ld", "md") and self.task > 1:
            self.teacher = self.model.snapshot_teacher()
            mx, _ = self.memory.contents()
            student = predict_probs(self.model, mx)
            self.boundary_kl.append(mean_kl(student, predict_probs(self.teacher.model, mx)))

    def batch_loss(self, x: np.ndarray, y: np.ndarray):
        """Scalar loss tensor and a dict of float components for one batch."""
        t = self.task
        model = self.model
        b = len(y)
        cfg = self.config
        if self.strategy in ("naive", "cumulative") or t == 1 and self.strategy != "md":
            loss = cross_entropy(model(x), y)
            return loss, {"total": loss.item(), "ce": loss.item()}
        if self.strategy == "md" and t == 1:
            parts = compose_md_loss(model(x), y, 1, model.class_offsets, model.total_classes, cfg.loss)
            return parts.total, parts.as_floats() | {"hinge_active": 0}
        xm, ym = self.memory.sample_balanced(b)
        if self.strategy == "replay":
            loss = cross_entropy(model(np.vstack([x, xm])), np.concatenate([y, ym]))
            return loss, {"total": loss.item(), "ce": loss.item()}
        out = model(np.vstack([x, xm]))
        cur = op_slice(out, 0, b, axis=0)
        mem = op_slice(out, b, 2 * b, axis=0)
        teacher = self._teacher_probs(xm)
        if self.strategy == "ld":
            ce = cross_entropy(cur, y)
            kl = kl_regularizer(op_softmax(mem), teacher)
            loss = op_add(ce, op_scale(kl, cfg.alpha))
            return loss, {"total": loss.item(), "ce": ce.item(), "kl": kl.item()}
        parts = compose_md_loss(cur, y, t, model.class_offsets, model.total_classes, cfg.loss,
                                memory_logits=mem, teacher_memory_probs=teacher)
        return parts.total, parts.as_floats() | {"hinge_active": parts.hinge_active}

    def learn_task(self, x: np.ndarray, y: np.ndarray, class_count: int,
                   on_begin: Optional[Callable[["ContinualLearner"], None]] = None,
                   on_epoch: Optional[Callable[["ContinualLearner", int], None]] = None) -> list:
        """Train one task; returns the per-epoch log entries.

        ``on_begin`` runs once the new head (and teacher) exist, before the
        first step; ``on_epoch`` runs after every epoch.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        start = self.model.total_classes
        if np.any(y < start) or np.any(y >= start + class_count):
            raise ContractError(f"task labels must lie in [{start}, {start + class_count})")
        self._begin_task(class_count)
        if on_begin is not None:
            on_begin(self)
        if self.strategy == "cumulative":
            self.history.append((x, y))
            x = np.vstack([h[0] for h in self.history])
            y = np.concatenate([h[1] for h in self.history])
        params = self.model.parameters()
        opt = SgdState.create(params, self.config.learning_rate, self.config.momentum)
        bs = self.config.batch_size
        log = []
        steps = 0
        for epoch in range(self.config.epochs):
            order = self.rng.permutation(len(y))
            sums: dict = {}
            batches = 0
            for lo in range(0, len(y), bs):
                idx = order[lo:lo + bs]
                loss, parts = self.batch_loss(x[idx], y[idx])
                backward(loss)
                sgd_step(params, opt)
                steps += 1
                batches += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
            entry = {"task": self.task, "epoch": epoch + 1}
            for k, v in sums.items():
                entry[k] = v / len(y) if k == "hinge_active" else v / batches
            if "hinge_active" in entry:
                entry["hinge_rate"] = entry.pop("hinge_active")
            log.append(entry)
            if on_epoch is not None:
                on_epoch(self, epoch + 1)
        self.steps_per_task.append(steps)
        if self.strategy in MEMORY_STRATEGIES:
            self.memory.update_after_task(np.asarray(x), y, self.model.total_classes)
        return log


def evaluate(model: ContinualModel, scenario: Scenario, upto_task: int, split: str = "test") -> list:
    """Accuracy on each seen task's split, predicting by argmax over all outputs."""
    return [_accuracy(model, *scenario.split(j, split)) for j in range(1, upto_task + 1)]


def train_strategy(strategy: str, scenario: Scenario, config: TrainConfig) -> RunRecord:
    learner = ContinualLearner(strategy, config, scenario.feature_dim)
    T = scenario.task_count
    R = empty_r_matrix(T)
    dev_R = empty_r_matrix(T)
    diag = DiagnosticsStream()
    epoch_log = []
    timings = []
    test = {t: scenario.split(t, "test") for t in range(1, T + 1)}
    track = config.diagnostics and strategy in MEMORY_STRATEGIES
    reference: dict = {}

    def snapshot(lrn: ContinualLearner, t: int, epoch_index: float):
        past = {j: test[j] for j in range(1, t)}
        mx, my = lrn.memory.contents()
        overfit = replay_overfit(lrn.model, mx, my, lrn.memory_task_ids(my), past) if len(my) else None
        drift = kl_drift(lrn.model, reference, {j: past[j][0] for j in reference})
        diag.record(epoch_index, t, overfit, drift)

    for t in range(1, T + 1):
        x, y = scenario.split(t, "train")
        task = scenario.tasks[t - 1]
        started = time.perf_counter()
        if track and t > 1:
            def on_begin(lrn, t=t):
                reference.clear()
                for j in range(1, t):
                    reference[j] = predict_probs(lrn.model, test[j][0])
                snapshot(lrn, t, (t - 1) * config.epochs)

            def on_epoch(lrn, epoch, t=t):
                snapshot(lrn, t, (t - 1) * config.epochs + epoch)

            epoch_log += learner.learn_task(x, y, task.class_count, on_begin, on_epoch)
        else:
            epoch_log += learner.learn_task(x, y, task.class_count)
        timings.append(time.perf_counter() - started)
        R[t - 1, :t] = evaluate(learner.model, scenario, t, "test")
        dev_R[t - 1, :t] = evaluate(learner.model, scenario, t, "dev")
        if track:
            mx, my = learner.memory.contents()
            ids = learner.memory_task_ids(my)
            mask = ids == t
            mem_acc = _accuracy(learner.model, mx[mask], my[mask])
            diag.seed_peak(t, mem_acc, R[t - 1, t - 1])

    desc = {
        "seed": scenario.seed,
        "task_count": T,
        "total_classes": scenario.total_classes,
        "feature_dim": scenario.feature_dim,
        "class_order": [int(c) for c in scenario.class_order],
    }
    counts = learner.model.count_parameters()
    return RunRecord(
        strategy=strategy,
        config=asdict(config) | {"hidden": list(config.hidden)},
        scenario=desc,
        R=_matrix_to_list(R),
        dev_R=_matrix_to_list(dev_R),
        epoch_log=epoch_log,
        diagnostics=diag.to_dict() if track else {},
        boundary_kl=learner.boundary_kl,
        steps_per_task=learner.steps_per_task,
        parameter_counts=asdict(counts),
        timings={"per_task_seconds": timings},
    )


def train_naive(scenario: Scenario, config: TrainConfig) -> RunRecord:
    return train_strategy("naive", scenario, config)


def train_cumulative(scenario: Scenario, config: TrainConfig) -> RunRecord:
    return train_strategy("cumulative", scenario, config)


def train_replay(scenario: Scenario, config: TrainConfig) -> RunRecord:
    return train_strategy("replay", scenario, config)


def train_ld(scenario: Scenario, config: TrainConfig) -> RunRecord:
    return train_strategy("ld", scenario, config)


def train_md(scenario: Scenario, config: TrainConfig) -> RunRecord:
    return train_strategy("md", scenario, config)
