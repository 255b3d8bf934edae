"""Momentum SGD and the dual-buffer distillation-oriented variant.

Both steps are pure: they return fresh parameter and state objects and never
touch their inputs.  The update order is always "buffer, then parameters"
with no dampening and no Nesterov correction.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .tensor import ParameterSet

Gradients = Mapping[str, np.ndarray]


class IdentityViolation(AssertionError):
    """The two routes to the DOT/SGD buffer difference disagree."""


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    delta: float = 0.075
    weight_decay: float = 0.0
    # Fraction of the decay term added to the task stream; the rest goes to the distill stream.
    decay_task_share: float = 1.0

    def __post_init__(self):
        mu, d = self.momentum, self.delta
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 < mu < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {mu}")
        if not (mu + d < 1.0 and mu - d > -1.0):
            raise ValueError(f"need mu + delta < 1 and mu - delta > -1, got mu={mu}, delta={d}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if not 0.0 <= self.decay_task_share <= 1.0:
            raise ValueError(f"decay_task_share must lie in [0, 1], got {self.decay_task_share}")


@dataclass
class SgdState:
    buffers: Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "SgdState":
        return cls({name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()})

    def tensors(self) -> Dict[str, np.ndarray]:
        return {f"{name}.v": v for name, v in self.buffers.items()}


@dataclass
class DotState:
    ce_buffers: Dict[str, np.ndarray]
    kd_buffers: Dict[str, np.ndarray]
    shared_mask: Dict[str, bool] = field(default_factory=dict)

    @classmethod
    def zeros_like(
        cls, params: Mapping[str, np.ndarray], shared_mask: Optional[Mapping[str, bool]] = None
    ) -> "DotState":
        mask = {name: True for name in params} if shared_mask is None else dict(shared_mask)
        if set(mask) != set(params):
            raise ValueError("shared_mask must cover exactly the parameter names")
        return cls(
            {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()},
            {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()},
            mask,
        )

    def total_buffers(self) -> Dict[str, np.ndarray]:
        return {name: self.ce_buffers[name] + self.kd_buffers[name] for name in self.ce_buffers}

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.ce_buffers:
            out[f"{name}.v_ce"] = self.ce_buffers[name]
            out[f"{name}.v_kd"] = self.kd_buffers[name]
        return out


@dataclass(frozen=True)
class DualGradient:
    g_ce: Mapping[str, np.ndarray]
    g_kd: Mapping[str, np.ndarray]

    def ce(self, name: str, like: np.ndarray) -> np.ndarray:
        return _grad_or_zero(self.g_ce, name, like)

    def kd(self, name: str, like: np.ndarray) -> np.ndarray:
        return _grad_or_zero(self.g_kd, name, like)

    def summed(self, names: Iterable[str], like: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return {n: self.ce(n, like[n]) + self.kd(n, like[n]) for n in names}


def _grad_or_zero(grads: Gradients, name: str, like: np.ndarray) -> np.ndarray:
    g = grads.get(name)
    if g is None:
        return np.zeros_like(like, dtype=np.float64)
    if np.shape(g) != np.shape(like):
        raise ValueError(f"{name}: gradient shape {np.shape(g)} does not match parameter shape {np.shape(like)}")
    return g


def _check_shape(name: str, a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{name}: {what} shape {np.shape(b)} does not match parameter shape {np.shape(a)}")


def sgd_step(
    params: Mapping[str, np.ndarray],
    grad_total: Gradients,
    state: SgdState,
    cfg: TrainerConfig,
    lr: Optional[float] = None,
) -> Tuple[ParameterSet, SgdState]:
    """``v <- g + mu v`` then ``theta <- theta - lr v``; decay enters as ``g + wd theta``."""
    lr = cfg.learning_rate if lr is None else lr
    mu = cfg.momentum
    new_params, new_buffers = {}, {}
    for name, theta in params.items():
        g = _grad_or_zero(grad_total, name, theta)
        v = state.buffers[name]
        _check_shape(name, theta, v, "buffer")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        v = g + mu * v
        new_buffers[name] = v
        new_params[name] = theta - lr * v
    return new_params, SgdState(new_buffers)


def dot_step(
    params: Mapping[str, np.ndarray],
    grads: DualGradient,
    state: DotState,
    cfg: TrainerConfig,
    lr: Optional[float] = None,
) -> Tuple[ParameterSet, DotState]:
    """Separate task/distill buffers with momenta ``mu - delta`` and ``mu + delta``.

    Parameters outside ``state.shared_mask`` use ``mu`` for both buffers.
    """
    lr = cfg.learning_rate if lr is None else lr
    mu, delta = cfg.momentum, cfg.delta
    new_params, new_ce, new_kd = {}, {}, {}
    for name, theta in params.items():
        g_ce = grads.ce(name, theta)
        g_kd = grads.kd(name, theta)
        v_ce, v_kd = state.ce_buffers[name], state.kd_buffers[name]
        _check_shape(name, theta, v_ce, "task buffer")
        _check_shape(name, theta, v_kd, "distill buffer")
        if cfg.weight_decay:
            share = cfg.decay_task_share
            g_ce = g_ce + share * cfg.weight_decay * theta
            if share < 1.0:
                g_kd = g_kd + (1.0 - share) * cfg.weight_decay * theta
        if state.shared_mask.get(name, True):
            m_ce, m_kd = mu - delta, mu + delta
        else:
            m_ce = m_kd = mu
        v_ce = g_ce + m_ce * v_ce
        v_kd = g_kd + m_kd * v_kd
        new_ce[name], new_kd[name] = v_ce, v_kd
        new_params[name] = theta - lr * (v_ce + v_kd)
    return new_params, DotState(new_ce, new_kd, dict(state.shared_mask))


def vdiff_identity(
    state_before: DotState,
    grads: DualGradient,
    cfg: TrainerConfig,
    atol: float = 1e-12,
) -> Dict[str, np.ndarray]:
    """Buffer difference between one DOT step and one SGD step from the same buffers.

    The SGD step uses the single buffer ``v_ce + v_kd`` and summed gradients.
    The run-both-rules difference is checked against the closed form
    ``delta * (v_kd - v_ce)`` (zero on non-shared parameters); a mismatch
    beyond ``atol`` raises :class:`IdentityViolation`.
    """
    probe = {name: np.zeros_like(v) for name, v in state_before.ce_buffers.items()}
    no_decay = TrainerConfig(
        learning_rate=1.0, momentum=cfg.momentum, delta=cfg.delta, weight_decay=0.0
    )
    _, dot_after = dot_step(probe, grads, state_before, no_decay)
    sgd_before = SgdState(state_before.total_buffers())
    _, sgd_after = sgd_step(probe, grads.summed(probe, probe), sgd_before, no_decay)

    diffs = {}
    for name in probe:
        v_dot = dot_after.ce_buffers[name] + dot_after.kd_buffers[name]
        routed = v_dot - sgd_after.buffers[name]
        if state_before.shared_mask.get(name, True):
            closed = cfg.delta * (state_before.kd_buffers[name] - state_before.ce_buffers[name])
        else:
            closed = np.zeros_like(routed)
        err = np.max(np.abs(routed - closed), initial=0.0)
        if err > atol:
            raise IdentityViolation(f"{name}: buffer difference off by {err:.3e} (tolerance {atol:g})")
        diffs[name] = routed
    return diffs


def compute_shared_mask(
    param_names: Iterable[str],
    loss_topology: Optional[Mapping[str, Iterable[str]]] = None,
) -> Dict[str, bool]:
    """Mark parameters reached by both the task and the distillation loss.

    ``loss_topology`` maps ``"task"`` and ``"distill"`` to the parameter names
    each loss reaches.  ``None`` means plain logit distillation, where every
    parameter is reached by both.
    """
    names = list(param_names)
    if loss_topology is None:
        return {name: True for name in names}
    task = set(loss_topology.get("task", ()))
    distill = set(loss_topology.get("distill", ()))
    return {name: name in task and name in distill for name in names}


def lr_schedule(epoch: int, base_lr: float, milestones, gamma_decay: float = 0.1) -> float:
    """Step decay: ``base_lr * gamma_decay ** #{m in milestones : m <= epoch}``."""
    milestones = list(milestones)
    if milestones != sorted(milestones):
        raise ValueError(f"milestones must be sorted ascending, got {milestones}")
    return base_lr * gamma_decay ** bisect.bisect_right(milestones, epoch)
