"""Dense float64 arrays with a small tape-based reverse-mode differentiator.

Only the primitives needed by multilayer perceptron classifiers and their
losses are provided.  A :class:`Tape` records every primitive whose operands
include a tracked node; :func:`backward` replays it in reverse.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

ParameterSet = Dict[str, np.ndarray]


class Node:
    """A value computed on (or fed into) a tape.

    Nodes with ``tape is None`` are constants: they take part in arithmetic
    but never receive gradients.
    """

    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: Optional["Tape"] = None, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else "tracked"
        label = f" {self.name!r}" if self.name else ""
        return f"Node({kind}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Entry:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Node, inputs: Tuple[Node, ...], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.leaves: Dict[str, Node] = {}

    def watch(self, name: str, array) -> Node:
        """Register a named leaf whose gradient :func:`backward` will report."""
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already registered on this tape")
        node = Node(array, self, name)
        self.leaves[name] = node
        return node

    def watch_all(self, params: Mapping[str, np.ndarray]) -> Dict[str, Node]:
        return {name: self.watch(name, value) for name, value in params.items()}

    def __len__(self) -> int:
        return len(self.entries)


def as_node(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _record(out_data: np.ndarray, inputs: Tuple[Node, ...], vjp: Callable) -> Node:
    tape = None
    for node in inputs:
        if node.tape is not None:
            if tape is not None and node.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = node.tape
    out = Node(out_data, tape)
    if tape is not None:
        tape.entries.append(_Entry(out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # Sum out dimensions introduced by numpy broadcasting.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def affine(x, weight, bias) -> Node:
    """``x @ weight + bias`` for ``x`` of shape [B, I], ``weight`` [I, O], ``bias`` [O]."""
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError(
            f"affine expects input [B, I], weight [I, O], bias [O]; got "
            f"input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"affine shape mismatch: input {x.shape} vs weight {weight.shape}")
    if weight.shape[1] != bias.shape[0]:
        raise ValueError(f"affine shape mismatch: weight {weight.shape} vs bias {bias.shape}")
    xd, wd = x.data, weight.data

    def vjp(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(xd @ wd + bias.data, (x, weight, bias), vjp)


def relu(x) -> Node:
    x = as_node(x)
    mask = x.data > 0.0  # subgradient at 0 is 0

    def vjp(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), vjp)


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(logits, temperature: float = 1.0) -> Node:
    """Row-wise log of ``softmax(logits / temperature)``."""
    temperature = _check_temperature(temperature)
    logits = as_node(logits)
    out = _log_softmax_rows(logits.data / temperature)
    probs = np.exp(out)

    def vjp(g):
        return ((g - probs * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record(out, (logits,), vjp)


def softmax(logits, temperature: float = 1.0) -> Node:
    """Row-wise ``softmax(logits / temperature)``, max-shifted for stability."""
    temperature = _check_temperature(temperature)
    logits = as_node(logits)
    z = logits.data / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner) / temperature,)

    return _record(probs, (logits,), vjp)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), vjp)


def scale(x, factor: float) -> Node:
    x = as_node(x)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _record(x.data * factor, (x,), vjp)


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (x,), vjp)


def log(x) -> Node:
    x = as_node(x)
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return _record(np.log(xd), (x,), vjp)


def total(x) -> Node:
    """Sum of every element, as a 0-d node."""
    x = as_node(x)
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum()), (x,), vjp)


def mean(x) -> Node:
    x = as_node(x)
    return scale(total(x), 1.0 / x.data.size)


def pick(x, indices: Sequence[int]) -> Node:
    """Select ``x[b, indices[b]]`` for every row ``b``; returns shape [B]."""
    x = as_node(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ValueError(f"pick expects [B, C] input and B indices; got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _record(x.data[rows, idx], (x,), vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, output: Node) -> Dict[str, np.ndarray]:
    """Gradient of a 0-d ``output`` with respect to every watched leaf of ``tape``.

    Gradients accumulate in a scratch table local to this call, so the same
    tape may be differentiated from several outputs (one per loss).
    Leaves that ``output`` does not reach get zero arrays.
    """
    if not isinstance(output, Node) or output.data.ndim != 0:
        shape = getattr(output, "shape", None)
        raise ValueError(f"backward needs a scalar (0-d) output, got shape {shape}")
    if output.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    grads: Dict[int, np.ndarray] = {id(output): np.ones(())}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for node, gi in zip(entry.inputs, entry.vjp(g)):
            if node.tape is None:
                continue
            key = id(node)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return {
        name: np.array(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64)
        for name, leaf in tape.leaves.items()
    }


def reachable_leaves(tape: Tape, output: Node) -> set[str]:
    """Names of leaves that ``output`` structurally depends on."""
    live = {id(output)}
    for entry in reversed(tape.entries):
        if id(entry.output) in live:
            live.update(id(node) for node in entry.inputs if node.tape is not None)
    return {name for name, leaf in tape.leaves.items() if id(leaf) in live}


def finite_difference_gradient(
    loss_fn: Callable[[ParameterSet], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-6,
) -> Dict[str, np.ndarray]:
    """Central-difference estimate of ``d loss_fn / d params``, one coordinate at a time."""
    if not step > 0.0:
        raise ValueError(f"step must be positive, got {step}")
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    grads = {}
    for name, value in work.items():
        grad = np.zeros_like(value)
        flat, gflat = value.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(work))
            flat[i] = orig - step
            down = float(loss_fn(work))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = grad
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def flatten(arrays: Iterable[np.ndarray]) -> np.ndarray:
    parts = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    return np.concatenate(parts) if parts else np.zeros(0)
