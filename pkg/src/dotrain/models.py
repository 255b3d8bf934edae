"""Multilayer perceptron classifiers used for both teacher and student."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import Node, ParameterSet, Tape, affine, relu


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...] = field(default_factory=tuple)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"layer widths must be positive: {self}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def layer_dims(self) -> list[Tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for k, (fan_in, fan_out) in enumerate(self.layer_dims):
            shapes[f"layer{k}.weight"] = (fan_in, fan_out)
            shapes[f"layer{k}.bias"] = (fan_out,)
        return shapes


def init_network(spec: NetworkSpec, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases; a pure function of ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for k, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"layer{k}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"layer{k}.bias"] = np.zeros(fan_out)
    return params


def check_params(params: Mapping[str, np.ndarray], spec: NetworkSpec) -> None:
    expected = spec.parameter_shapes()
    if set(params) != set(expected):
        raise ValueError(f"parameter names {sorted(params)} do not match spec {sorted(expected)}")
    for name, shape in expected.items():
        if np.shape(params[name]) != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")


def forward(
    params: Mapping[str, np.ndarray],
    spec: NetworkSpec,
    inputs,
    tape: Optional[Tape] = None,
) -> Node:
    """Raw logits for a batch.

    With a ``tape`` the parameters are watched on it, so the result can be
    differentiated; without one the pass is untracked.
    """
    x = inputs if isinstance(inputs, Node) else Node(inputs)
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch inputs of shape {x.shape} do not match input_dim={spec.input_dim}"
        )
    weights = tape.watch_all(params) if tape is not None else params
    h = x
    last = spec.num_layers - 1
    for k in range(spec.num_layers):
        h = affine(h, weights[f"layer{k}.weight"], weights[f"layer{k}.bias"])
        if k < last:
            h = relu(h)
    return h


def predict(params: Mapping[str, np.ndarray], spec: NetworkSpec, inputs) -> np.ndarray:
    return forward(params, spec, inputs).data


def accuracy(logits, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits.data if isinstance(logits, Node) else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    if labels.size == 0:
        return 0.0
    # np.argmax returns the first maximal index.
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# flat text tensor format: "name shape_csv value_csv" per line


def format_float(x: float) -> str:
    return "%.17g" % x


def dumps_tensors(tensors: Mapping[str, np.ndarray]) -> str:
    lines = []
    for name, value in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(value, dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape)
        values = ",".join(format_float(v) for v in arr.reshape(-1))
        lines.append(f"{name} {shape} {values}\n")
    return "".join(lines)


def loads_tensors(text: str) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'name shape values'")
        name, shape_csv, values_csv = parts
        shape = tuple(int(d) for d in shape_csv.split(",")) if shape_csv else ()
        values = [float(v) for v in values_csv.split(",")] if values_csv else []
        if math.prod(shape) != len(values):
            raise ValueError(f"line {lineno}: shape {shape} needs {math.prod(shape)} values, got {len(values)}")
        tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
    return tensors


def save_tensors(tensors: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_text(dumps_tensors(tensors), encoding="ascii")


def load_tensors(path) -> Dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_text(encoding="ascii"))
