"""Training objectives: margin-dampening hinge, restricted cross-entropy and
teacher KL, plus their composition.

All batch reductions are arithmetic means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    op_add,
    op_log,
    op_log_softmax,
    op_max,
    op_mean,
    op_mul,
    op_relu,
    op_scale,
    op_slice,
    op_softmax,
    op_sub,
    op_sum,
    op_take,
)
from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

TEACHER_FLOOR = 1e-12
# incremented whenever a teacher probability is floored
clamp_events = 0


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    alpha: float = 0.1
    margin_override: Optional[float] = None

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ContractError("lambda and alpha must be non-negative")


@dataclass
class LossBreakdown:
    md: Tensor
    ce_current: Tensor
    kl: Tensor
    total: Tensor
    hinge_active: int = 0
    batch_size: int = 0

    def as_floats(self) -> dict:
        return {
            "md": self.md.item(),
            "ce": self.ce_current.item(),
            "kl": self.kl.item(),
            "total": self.total.item(),
        }


def margin_value(total_classes_seen: int) -> float:
    """Adaptive margin ``1 / (classes_seen - 1)``."""
    if total_classes_seen < 2:
        raise ContractError("the margin needs at least two classes")
    return 1.0 / (total_classes_seen - 1)


def _labels(labels, batch: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {batch}")
    return labels


def md_terms(full_probs: Tensor, labels, past_class_count: int, margin: float) -> Tensor:
    """Per-sample hinge ``max(0, max(p[:past]) - p[y] + margin)``."""
    batch, classes = full_probs.shape
    labels = _labels(labels, batch)
    if not 1 <= past_class_count < classes:
        raise ContractError(f"past_class_count {past_class_count} invalid for {classes} classes")
    if np.any(labels < past_class_count) or np.any(labels >= classes):
        raise ContractError("margin dampening applies to current-task labels only")
    past_max = op_max(op_slice(full_probs, 0, past_class_count), axis=-1)
    truth = op_take(full_probs, labels)
    return op_relu(op_add(op_sub(past_max, truth), Tensor(float(margin))))


def md_loss(full_probs: Tensor, labels, past_class_count: int, margin: float) -> Tensor:
    return op_mean(md_terms(full_probs, labels, past_class_count, margin))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of a full softmax over ``logits``."""
    labels = _labels(labels, logits.shape[0])
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise ContractError("label outside the logit range")
    return op_scale(op_mean(op_take(op_log_softmax(logits), labels)), -1.0)


def current_task_ce(full_logits: Tensor, labels, current_range) -> Tensor:
    """Cross-entropy over the current task's logits only."""
    start, stop = current_range
    labels = _labels(labels, full_logits.shape[0])
    if np.any(labels < start) or np.any(labels >= stop):
        raise ContractError(f"labels must lie in [{start}, {stop})")
    return cross_entropy(op_slice(full_logits, start, stop), labels - start)


def kl_regularizer(student_probs: Tensor, teacher_probs) -> Tensor:
    """Batch mean of ``sum_c p_c log(p_c / q_c)`` with the student first."""
    global clamp_events
    teacher = teacher_probs.values if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, float)
    if teacher.shape != student_probs.shape:
        raise DimensionError(f"student {student_probs.shape} vs teacher {teacher.shape}")
    low = teacher < TEACHER_FLOOR
    if np.any(low):
        clamp_events += int(low.sum())
        logger.debug("floored %d teacher probabilities at %g", int(low.sum()), TEACHER_FLOOR)
        teacher = np.maximum(teacher, TEACHER_FLOOR)
    log_ratio = op_sub(op_log(student_probs), Tensor(np.log(teacher)))
    return op_mean(op_sum(op_mul(student_probs, log_ratio), axis=-1))


def compose_md_loss(current_logits: Tensor, labels, task_index: int, class_offsets,
                    total_classes: int, config: LossConfig,
                    memory_logits: Tensor | None = None, teacher_memory_probs=None) -> LossBreakdown:
    """Piecewise objective: plain CE at the first task, ``lam*MD + CE + KL`` later."""
    labels = _labels(labels, current_logits.shape[0])
    zero = Tensor(0.0)
    if task_index == 1:
        ce = current_task_ce(current_logits, labels, (0, total_classes))
        return LossBreakdown(zero, ce, zero, ce, 0, len(labels))
    if memory_logits is None or teacher_memory_probs is None or memory_logits.shape[0] == 0:
        raise ContractError("tasks after the first need a memory batch")
    past = int(class_offsets[task_index - 1])
    margin = config.margin_override if config.margin_override is not None else margin_value(total_classes)
    probs = op_softmax(current_logits)
    hinge = md_terms(probs, labels, past, margin)
    md = op_mean(hinge)
    ce = current_task_ce(current_logits, labels, (past, total_classes))
    kl = kl_regularizer(op_softmax(memory_logits), teacher_memory_probs)
    total = op_add(op_add(op_scale(md, config.lam), ce), kl)
    return LossBreakdown(md, ce, kl, total, int(np.count_nonzero(hinge.values > 0)), len(labels))
