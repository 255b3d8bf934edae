"""Deterministic synthetic classification datasets, splits and batch orders."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise ValueError(f"inputs {inputs.shape} and labels {labels.shape} disagree")
        if inputs.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)


def spiral_arm(k: int, num_classes: int, t: np.ndarray, turns: float = 1.0, angle_noise=0.0) -> np.ndarray:
    """Points of arm ``k`` at parameters ``t`` in [0, 1]; radius ``t``, angle offset per point ``angle_noise``."""
    angle = 2.0 * math.pi * (k / num_classes + turns * t) + angle_noise
    return np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)


def gen_spirals(
    num_classes: int = 3,
    points_per_class: int = 500,
    noise_std: float = 0.2,
    seed: int = 0,
    turns: float = 1.0,
) -> LabeledDataset:
    """Interleaved 2-D spiral arms, one per class.

    Gaussian noise of scale ``noise_std`` (radians) jitters each point's angle
    along its arm, so the inner region is where arms overlap.
    """
    if num_classes < 2 or points_per_class < 1 or noise_std < 0:
        raise ValueError("need num_classes >= 2, points_per_class >= 1, noise_std >= 0")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, points_per_class)
    xs, ys = [], []
    for k in range(num_classes):
        xs.append(spiral_arm(k, num_classes, t, turns, noise_std * rng.standard_normal(points_per_class)))
        ys.append(np.full(points_per_class, k))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), num_classes)


def gen_gaussian_blobs(
    num_classes: int = 3,
    points_per_class: int = 100,
    center_spread: float = 10.0,
    cluster_std: float = 0.5,
    seed: int = 0,
    dim: int = 2,
) -> LabeledDataset:
    """One isotropic Gaussian cluster per class around centers uniform in ``[-spread, spread]^dim``."""
    if num_classes < 2 or points_per_class < 1 or cluster_std < 0 or center_spread <= 0:
        raise ValueError("invalid blob parameters")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_spread, center_spread, size=(num_classes, dim))
    noise = rng.standard_normal((num_classes, points_per_class, dim))
    inputs = (centers[:, None, :] + cluster_std * noise).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), points_per_class)
    return LabeledDataset(inputs, labels, num_classes)


def split(dataset: LabeledDataset, train_fraction: float, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified shuffled split; each class contributes ``round(fraction * n_class)`` training rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        cut = int(round(train_fraction * members.size))
        train_idx.append(members[:cut])
        test_idx.append(members[cut:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    if train_idx.size == 0 or test_idx.size == 0:
        raise ValueError(f"train_fraction={train_fraction} leaves an empty split")
    return dataset.subset(train_idx), dataset.subset(test_idx)


def batches(num_rows: int, batch_size: int, seed: int, epoch: int = 0) -> List[np.ndarray]:
    """Index batches for one epoch; a fresh permutation per ``(seed, epoch)``, last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(num_rows)
    return [order[i:i + batch_size] for i in range(0, num_rows, batch_size)]


def load_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """Read ``f0,f1,...,label`` rows; ``num_classes`` defaults to ``max(label) + 1``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last header column must be 'label', got {header}")
        rows = [row for row in reader if row]
    inputs = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64)
    labels = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    return LabeledDataset(inputs.reshape(len(rows), len(header) - 1), labels, num_classes)


def save_csv(dataset: LabeledDataset, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            writer.writerow(["%.17g" % v for v in x] + [int(y)])
