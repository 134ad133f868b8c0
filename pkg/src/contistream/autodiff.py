"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable primitive builds its output with :func:`_record`, which
stamps a :class:`Node` with a global sequence number. :func:`backward`
collects the nodes reachable from a scalar loss into a :class:`Tape` ordered
by that sequence number (i.e. execution order) and replays it in reverse,
visiting each node exactly once.

Random numbers come from numpy's ``PCG64`` bit generator (a documented,
platform-independent 64-bit permuted congruential generator), created
through :func:`make_rng`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

_sequence = itertools.count()
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def make_rng(seed) -> np.random.Generator:
    """Seeded generator backed by PCG64."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __slots__ = ("values", "requires_grad", "grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return op_add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return op_sub(self, _lift(other))

    def __rsub__(self, other):
        return op_sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return op_scale(self, other)
        return op_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return op_scale(self, -1.0)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


@dataclass(eq=False)
class Node:
    seq: int
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Nodes reachable from a loss, in execution order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [output]
        while stack:
            tensor = stack.pop()
            node = tensor.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(node.inputs)
        found.sort(key=lambda n: n.seq)
        return cls(found)


def _record(values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = requires
    out.grad = None
    out.name = None
    out.node = Node(next(_sequence), inputs, out, backward_fn) if requires else None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.values)
    if loss.node is None:
        loss.accumulate(seed)
        return
    pending = {id(loss): seed}
    for node in reversed(Tape.from_output(loss).nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward_fn(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.node is None:
                tensor.accumulate(grad)
            elif id(tensor) in pending:
                pending[id(tensor)] = pending[id(tensor)] + grad
            else:
                pending[id(tensor)] = grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------------
# primitives


def op_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x[B, I], weight[I, O], bias[O]."""
    if x.values.ndim != 2 or weight.values.ndim != 2:
        raise DimensionError(f"affine expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"inner dimensions differ: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    xv, wv = x.values, weight.values

    def grads(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _record(xv @ wv + bias.values, (x, weight, bias), grads)


def op_add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def grads(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.values + b.values, (a, b), grads)


def op_sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def grads(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(a.values - b.values, (a, b), grads)


def op_mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    av, bv = a.values, b.values

    def grads(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _record(av * bv, (a, b), grads)


def op_scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(x.values * factor, (x,), lambda g: (g * factor,))


def op_relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _record(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def op_sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def op_log(x: Tensor) -> Tensor:
    if np.any(~(x.values > 0)):
        raise DomainError("log requires strictly positive inputs")
    xv = x.values
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def op_exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _record(out, (x,), lambda g: (g * out,))


def op_concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis`` (the class axis by default)."""
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].values.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = list(t.shape)
        first = list(tensors[0].shape)
        if t.values.ndim != ndim or other[:axis] + other[axis + 1:] != first[:axis] + first[axis + 1:]:
            raise DimensionError(f"cannot concat {tensors[0].shape} with {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grads(g):
        return np.split(g, bounds, axis=axis)

    return _record(np.concatenate([t.values for t in tensors], axis=axis), tensors, grads)


def op_slice(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous range ``[start, stop)`` along ``axis``."""
    size = x.shape[axis]
    if not 0 <= start < stop <= size:
        raise DimensionError(f"slice [{start}, {stop}) out of range for axis of size {size}")
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grads(g):
        full = np.zeros_like(x.values)
        full[index] = g
        return (full,)

    return _record(x.values[index], (x,), grads)


def op_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def grads(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.values.sum(axis=axis)), (x,), grads)


def op_mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.values.size if axis is None else x.shape[axis]
    return op_scale(op_sum(x, axis), 1.0 / count)


def op_max(x: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    arg = np.argmax(x.values, axis=axis)
    out = np.take_along_axis(x.values, np.expand_dims(arg, axis), axis=axis)

    def grads(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(np.squeeze(out, axis=axis), (x,), grads)


def op_take(x: Tensor, index) -> Tensor:
    """Row-wise pick: ``out[b] = x[b, index[b]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"take expects x[B, C] and index[B], got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def grads(g):
        full = np.zeros_like(x.values)
        full[rows, index] = g
        return (full,)

    return _record(x.values[rows, index], (x,), grads)


def _check_logits(logits: Tensor) -> None:
    if logits.values.ndim < 1 or logits.shape[-1] < 1:
        raise DimensionError("softmax needs at least one class")
    if not np.all(np.isfinite(logits.values)):
        raise NumericError("softmax received non-finite logits")


def op_softmax(logits: Tensor) -> Tensor:
    """Row softmax with max subtraction."""
    _check_logits(logits)
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grads(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (logits,), grads)


def op_log_softmax(logits: Tensor) -> Tensor:
    _check_logits(logits)
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def grads(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (logits,), grads)


# --------------------------------------------------------------------------
# initialisation and optimisation


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def init_bias(size: int) -> Tensor:
    return parameter(np.zeros(size))


@dataclass
class SgdState:
    """Classical momentum SGD; one zeroed velocity buffer per parameter."""

    learning_rate: float
    momentum: float
    velocity: list

    @classmethod
    def create(cls, params: Iterable[Tensor], learning_rate: float = 0.01, momentum: float = 0.8):
        if not learning_rate > 0:
            raise ContractError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        return cls(learning_rate, momentum, [np.zeros_like(p.values) for p in params])


def sgd_step(params: Sequence[Tensor], state: SgdState) -> None:
    """``v <- mu v + g``; ``theta <- theta - lr v``; then clear gradients."""
    params = list(params)
    if len(params) != len(state.velocity):
        raise ContractError("parameter set does not match optimiser state")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i} has no gradient")
    for p, v in zip(params, state.velocity):
        v *= state.momentum
        v += p.grad
        p.values -= state.learning_rate * v
        p.grad = None


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``tensor``."""
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn()
        flat[i] = keep - h
        down = fn()
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad
