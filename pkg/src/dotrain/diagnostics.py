"""Optimization diagnostics: momentum cosines, loss-landscape probes, logit fidelity."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .data import LabeledDataset
from .losses import cross_entropy
from .models import NetworkSpec, forward
from .optim import DotState, SgdState
from .tensor import ParameterSet, flatten

Buffers = Union[Mapping[str, np.ndarray], Sequence[np.ndarray], np.ndarray]
Seed = Union[int, Sequence[int]]


@dataclass
class RunRecord:
    iteration: int
    epoch: int
    train_task_loss: float
    train_distill_loss: float
    cos_kd: Optional[float] = None
    cos_ce: Optional[float] = None
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    learning_rate: Optional[float] = None

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LandscapeSlice:
    radii: np.ndarray
    loss_values: np.ndarray
    direction_seed: Optional[Seed] = None
    normalization: str = "filter"


def _as_vector(buffers: Buffers) -> np.ndarray:
    if isinstance(buffers, np.ndarray):
        return buffers.reshape(-1).astype(np.float64)
    if isinstance(buffers, Mapping):
        return flatten(buffers.values())
    return flatten(buffers)


def cosine_similarity(a: Buffers, b: Buffers) -> float:
    """Cosine of two flattened buffer collections; 0 when either is all-zero."""
    if isinstance(a, Mapping) and isinstance(b, Mapping) and list(a) != list(b):
        raise ValueError("buffer collections must share names in the same order")
    va, vb = _as_vector(a), _as_vector(b)
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.size} vs {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def momentum_cosines(state: DotState) -> Tuple[float, float]:
    """``(cos(v_kd, v), cos(v_ce, v))`` with ``v = v_ce + v_kd``, over shared parameters in name order."""
    names = sorted(n for n, shared in state.shared_mask.items() if shared)
    v_ce = [state.ce_buffers[n] for n in names]
    v_kd = [state.kd_buffers[n] for n in names]
    v = [c + k for c, k in zip(v_ce, v_kd)]
    return cosine_similarity(v_kd, v), cosine_similarity(v_ce, v)


def record_iteration(
    state: Union[DotState, SgdState],
    *,
    iteration: int,
    epoch: int,
    task_loss: float,
    distill_loss: float,
    train_accuracy: Optional[float] = None,
    test_accuracy: Optional[float] = None,
    learning_rate: Optional[float] = None,
    cosines: bool = True,
) -> RunRecord:
    """One log row; cosines come from the post-update DOT buffers and are absent for vanilla runs."""
    cos_kd = cos_ce = None
    if cosines and isinstance(state, DotState):
        cos_kd, cos_ce = momentum_cosines(state)
    return RunRecord(
        iteration=iteration,
        epoch=epoch,
        train_task_loss=float(task_loss),
        train_distill_loss=float(distill_loss),
        cos_kd=cos_kd,
        cos_ce=cos_ce,
        train_accuracy=train_accuracy,
        test_accuracy=test_accuracy,
        learning_rate=learning_rate,
    )


# ---------------------------------------------------------------------------
# landscape


def filter_normalized_direction(params: Mapping[str, np.ndarray], seed: Seed) -> Dict[str, np.ndarray]:
    """Gaussian direction rescaled filter by filter to the parameter norms.

    Weights are laid out [fan_in, fan_out], so an output neuron's filter is a
    column.  Bias vectors (and any other 1-d tensor) are rescaled as a whole.
    """
    rng = np.random.default_rng(seed)
    direction = {}
    for name in sorted(params):
        theta = np.asarray(params[name], dtype=np.float64)
        d = rng.standard_normal(theta.shape)
        if theta.ndim >= 2:
            axes = tuple(range(theta.ndim - 1))
            target = np.linalg.norm(theta, axis=axes, keepdims=True)
            current = np.linalg.norm(d, axis=axes, keepdims=True)
        else:
            target = np.linalg.norm(theta)
            current = np.linalg.norm(d)
        d = np.where(target > 0.0, d * (target / np.where(current > 0.0, current, 1.0)), 0.0)
        direction[name] = d
    return {name: direction[name] for name in params}


def perturb(params: Mapping[str, np.ndarray], direction: Mapping[str, np.ndarray], radius: float) -> ParameterSet:
    return {name: theta + radius * direction[name] for name, theta in params.items()}


def task_loss(params: Mapping[str, np.ndarray], spec: NetworkSpec, dataset: LabeledDataset) -> float:
    """Mean cross-entropy over the whole dataset."""
    return cross_entropy(forward(params, spec, dataset.inputs), dataset.labels).item()


def slice_losses(
    loss_fn: Callable[[ParameterSet], float],
    params: Mapping[str, np.ndarray],
    direction: Mapping[str, np.ndarray],
    radii: Sequence[float],
) -> np.ndarray:
    # radius 0 evaluates the untouched parameters so it matches the plain loss exactly
    return np.array([
        loss_fn(dict(params)) if r == 0 else loss_fn(perturb(params, direction, r))
        for r in radii
    ])


def landscape_slice(
    params: Mapping[str, np.ndarray],
    spec: NetworkSpec,
    dataset: LabeledDataset,
    direction: Mapping[str, np.ndarray],
    radii: Sequence[float],
    direction_seed: Optional[Seed] = None,
) -> LandscapeSlice:
    radii = np.sort(np.asarray(radii, dtype=np.float64))
    if not np.any(radii == 0.0):
        raise ValueError("radii must include 0")
    losses = slice_losses(lambda p: task_loss(p, spec, dataset), params, direction, radii)
    return LandscapeSlice(radii, losses, direction_seed)


def landscape_surface(
    params: Mapping[str, np.ndarray],
    spec: NetworkSpec,
    dataset: LabeledDataset,
    seed: int,
    xs: Sequence[float],
    ys: Sequence[float],
) -> np.ndarray:
    """Task loss on a 2-D grid spanned by two orthogonalized filter-normalized directions.

    Returns an array of shape ``[len(ys), len(xs)]``.
    """
    d1 = filter_normalized_direction(params, [seed, 0])
    d2 = filter_normalized_direction(params, [seed, 1])
    v1, v2 = flatten(d1.values()), flatten(d2.values())
    n2 = np.linalg.norm(v2)
    if np.dot(v1, v1) > 0:
        v2 = v2 - np.dot(v1, v2) / np.dot(v1, v1) * v1
        if np.linalg.norm(v2) > 0:
            v2 *= n2 / np.linalg.norm(v2)
    d2 = _unflatten(v2, params)
    grid = np.empty((len(ys), len(xs)))
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            shifted = {n: params[n] + x * d1[n] + y * d2[n] for n in params}
            grid[i, j] = task_loss(shifted, spec, dataset)
    return grid


def _unflatten(vector: np.ndarray, like: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, value in like.items():
        size = np.size(value)
        out[name] = vector[offset:offset + size].reshape(np.shape(value))
        offset += size
    return out


def sharpness_of(
    loss_fn: Callable[[ParameterSet], float],
    params: Mapping[str, np.ndarray],
    num_directions: int,
    radius: float,
    seed: int,
) -> float:
    if num_directions < 1:
        raise ValueError("num_directions must be >= 1")
    base = loss_fn(dict(params))
    rises = []
    for i in range(num_directions):
        d = filter_normalized_direction(params, [seed, i])
        rises.append(loss_fn(perturb(params, d, radius)) - base if radius else 0.0)
    return float(max(rises))


def sharpness(
    params: Mapping[str, np.ndarray],
    spec: NetworkSpec,
    dataset: LabeledDataset,
    num_directions: int = 10,
    radius: float = 0.5,
    seed: int = 0,
) -> float:
    """Worst rise of the task loss over random filter-normalized directions at a fixed radius."""
    return sharpness_of(lambda p: task_loss(p, spec, dataset), params, num_directions, radius, seed)


# ---------------------------------------------------------------------------
# fidelity


def logit_correlation(logits: np.ndarray) -> Tuple[np.ndarray, int]:
    """Pearson correlation between logit columns; constant columns zeroed. Returns (matrix, #constant)."""
    z = np.asarray(logits, dtype=np.float64)
    centered = z - z.mean(axis=0, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    constant = norms == 0.0
    safe = np.where(constant, 1.0, norms)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, np.where(constant, 0.0, 1.0))
    return np.clip(corr, -1.0, 1.0), int(constant.sum())


def fidelity_difference(student_logits, teacher_logits) -> Tuple[np.ndarray, float]:
    """Elementwise ``|corr(student) - corr(teacher)|`` over logit dimensions, and its mean."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError(f"student {s.shape} and teacher {t.shape} logits must match as [N, C]")
    if s.shape[0] < 2:
        raise ValueError("need at least 2 samples to correlate")
    cs, ns = logit_correlation(s)
    ct, nt = logit_correlation(t)
    if ns or nt:
        warnings.warn(
            f"{ns + nt} constant logit column(s); their correlations were set to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    diff = np.abs(cs - ct)
    return diff, float(diff.mean())
