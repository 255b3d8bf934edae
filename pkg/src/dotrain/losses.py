"""Task loss, temperature-softened distillation loss and their weighted sum."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import Node, as_node, log_softmax, mean, mul, pick, scale, softmax, sub, total


class KLOrder(str, enum.Enum):
    # KL(teacher || student): the usual distillation signal.
    TEACHER_FIRST = "teacher_first"
    # KL(student || teacher): argument order as literally printed in the KD objective.
    STUDENT_FIRST = "student_first"


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.1
    temperature: float = 4.0
    kl_order: KLOrder = KLOrder.TEACHER_FIRST
    t_square_scaling: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kl_order", KLOrder(self.kl_order))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


class LossTerms(NamedTuple):
    total: Node
    task: Node
    distill: Node


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits, labels: Sequence[int]) -> Node:
    """Batch mean of ``-log softmax(logits)[label]``."""
    logits = as_node(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [B, C], got {logits.shape}")
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -mean(pick(log_softmax(logits), labels))


def kd_divergence(student_logits, teacher_logits, cfg: DistillConfig = DistillConfig()) -> Node:
    """Batch mean KL between softened student and teacher distributions.

    The teacher side is always a constant, so no gradient reaches it.
    """
    student = as_node(student_logits)
    teacher = np.asarray(
        teacher_logits.data if isinstance(teacher_logits, Node) else teacher_logits,
        dtype=np.float64,
    )
    if student.shape != teacher.shape or student.data.ndim != 2:
        raise ValueError(f"student logits {student.shape} and teacher logits {teacher.shape} must match as [B, C]")
    t = cfg.temperature
    log_q = log_softmax(teacher, t).data
    log_p = log_softmax(student, t)
    if cfg.kl_order is KLOrder.TEACHER_FIRST:
        per_element = mul(np.exp(log_q), sub(log_q, log_p))
    else:
        per_element = mul(softmax(student, t), sub(log_p, log_q))
    factor = t * t if cfg.t_square_scaling else 1.0
    return scale(total(per_element), factor / student.shape[0])


def combined_loss(student_logits, labels, teacher_logits, cfg: DistillConfig = DistillConfig()) -> LossTerms:
    """``alpha * CE + (1 - alpha) * KD``, with both components kept separately differentiable."""
    task = cross_entropy(student_logits, labels)
    distill = kd_divergence(student_logits, teacher_logits, cfg)
    weighted = scale(task, cfg.alpha) + scale(distill, 1.0 - cfg.alpha)
    return LossTerms(weighted, task, distill)
