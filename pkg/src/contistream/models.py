"""Continual model: MLP backbone, per-task heads and gated scaler heads.

Three head modes are supported:

``incremental``
    Plain concatenation of the task heads.
``cascaded_gates``
    Every new task ``t`` adds one scaler per past task ``i``; past logits are
    multiplied by the product of all gates created after them.
``single_gate``
    Each past task owns exactly one gate, created when the next task arrives.

Checkpoint layout (little-endian)::

    b"CLM1" | uint8 mode | uint32 task_count | uint32 class_count * task_count
    | float64 parameter blocks in ``ContinualModel.parameters()`` order
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    init_bias,
    init_weight,
    make_rng,
    no_grad,
    op_add,
    op_affine,
    op_concat,
    op_mul,
    op_relu,
    op_scale,
    op_sigmoid,
    parameter,
)
from .errors import ContractError, FormatError

HEAD_MODES = ("incremental", "cascaded_gates", "single_gate")
CHECKPOINT_MAGIC = b"CLM1"


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return op_affine(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


class Backbone:
    """Rectified MLP; every layer (the last one included) is followed by ReLU."""

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"invalid backbone sizes {layer_sizes!r}")
        self.layer_sizes = sizes
        self.layers = [
            Linear(init_weight(rng, a, b), init_bias(b)) for a, b in zip(sizes[:-1], sizes[1:])
        ]

    @property
    def embedding_dim(self) -> int:
        return self.layer_sizes[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = op_relu(layer(x))
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class TaskHead(Linear):
    def __init__(self, task_index: int, weight: Tensor, bias: Tensor):
        super().__init__(weight, bias)
        self.task_index = task_index


class ScalerHead:
    """Gate ``sigmoid(gamma * (e @ W + b) + beta)`` over the classes of ``target``.

    Weights and bias start at zero, so a fresh gate equals ``sigmoid(beta)``.
    """

    def __init__(self, owner: int, target: int, embedding_dim: int, width: int,
                 gamma: float = 1.0, beta: float = 10.0):
        if not target < owner:
            raise ContractError("a scaler must target an earlier task")
        self.owner = owner
        self.target = target
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.weight = parameter(np.zeros((embedding_dim, width)))
        self.bias = parameter(np.zeros(width))

    def __call__(self, e: Tensor) -> Tensor:
        pre = op_scale(op_affine(e, self.weight, self.bias), self.gamma)
        return op_sigmoid(op_add(pre, Tensor(self.beta)))

    def parameters(self):
        return [self.weight, self.bias]


@dataclass(frozen=True)
class ParameterCount:
    backbone: int
    heads: int
    scaler_weights: int
    scaler_biases: int

    @property
    def scalers(self) -> int:
        return self.scaler_weights + self.scaler_biases

    @property
    def total(self) -> int:
        return self.backbone + self.heads + self.scalers


class ContinualModel:
    """Backbone plus an expanding set of task heads and gates.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``(input_dim, hidden..., embedding_dim)``.
    head_mode : {"incremental", "cascaded_gates", "single_gate"}
    gamma, beta : float
        Slope and offset of every gate's sigmoid.
    seed : int
        Seed for backbone and head initialisation.
    """

    def __init__(self, layer_sizes: Sequence[int], head_mode: str = "incremental",
                 gamma: float = 1.0, beta: float = 10.0, seed: int = 0):
        if head_mode not in HEAD_MODES:
            raise ContractError(f"unknown head mode {head_mode!r}")
        self.head_mode = head_mode
        self.gamma = float(gamma)
        self.beta = float(beta)
        self._rng = make_rng(seed)
        self.backbone = Backbone(layer_sizes, self._rng)
        self.heads: list[TaskHead] = []
        self.scalers: list[ScalerHead] = []
        # test hook: replace every gate by this constant
        self.forced_gate: float | None = None

    @property
    def layer_sizes(self) -> list:
        return list(self.backbone.layer_sizes)

    @property
    def embedding_dim(self) -> int:
        return self.backbone.embedding_dim

    @property
    def task_count(self) -> int:
        return len(self.heads)

    @property
    def class_counts(self) -> list:
        return [h.out_features for h in self.heads]

    @property
    def class_offsets(self) -> list:
        """Start index of every task's block in the concatenated output."""
        return [int(v) for v in np.cumsum([0] + self.class_counts[:-1])] if self.heads else []

    @property
    def total_classes(self) -> int:
        return sum(self.class_counts)

    def add_task(self, class_count: int) -> None:
        if class_count < 2:
            raise ContractError("every task needs at least two classes")
        t = self.task_count + 1
        dim = self.embedding_dim
        self.heads.append(TaskHead(t, init_weight(self._rng, dim, class_count), init_bias(class_count)))
        if self.head_mode == "cascaded_gates":
            for i in range(1, t):
                self.scalers.append(self._new_scaler(t, i))
        elif self.head_mode == "single_gate":
            gated = {s.target for s in self.scalers}
            for i in range(1, t):
                if i not in gated:
                    self.scalers.append(self._new_scaler(t, i))

    def _new_scaler(self, owner: int, target: int) -> ScalerHead:
        width = self.heads[target - 1].out_features
        return ScalerHead(owner, target, self.embedding_dim, width, self.gamma, self.beta)

    def embed(self, x) -> Tensor:
        return self.backbone(x if isinstance(x, Tensor) else Tensor(x))

    def gates_for(self, target: int) -> list:
        return [s for s in self.scalers if s.target == target]

    def _gate(self, scaler: ScalerHead, e: Tensor) -> Tensor:
        if self.forced_gate is not None:
            return Tensor(np.full((e.shape[0], self.heads[scaler.target - 1].out_features),
                                  self.forced_gate))
        return scaler(e)

    def head_forward(self, e: Tensor) -> Tensor:
        """Concatenated (and, depending on the mode, gated) logits from embeddings."""
        if not self.heads:
            raise ContractError("the model has no tasks yet")
        blocks = []
        for head in self.heads:
            out = head(e)
            if self.head_mode != "incremental":
                for scaler in self.gates_for(head.task_index):
                    out = op_mul(out, self._gate(scaler, e))
            blocks.append(out)
        return blocks[0] if len(blocks) == 1 else op_concat(blocks, axis=-1)

    def forward(self, x) -> Tensor:
        if not self.heads:
            raise ContractError("the model has no tasks yet")
        return self.head_forward(self.embed(x))

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        with no_grad():
            chunks = [self.forward(x[i:i + batch_size]).values for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.total_classes))

    def parameters(self) -> list:
        params = self.backbone.parameters()
        for head in self.heads:
            params += head.parameters()
        for scaler in self.scalers:
            params += scaler.parameters()
        return params

    def count_parameters(self) -> ParameterCount:
        return ParameterCount(
            backbone=sum(p.size for p in self.backbone.parameters()),
            heads=sum(p.size for h in self.heads for p in h.parameters()),
            scaler_weights=sum(s.weight.size for s in self.scalers),
            scaler_biases=sum(s.bias.size for s in self.scalers),
        )

    def snapshot_teacher(self) -> "TeacherSnapshot":
        return TeacherSnapshot(self)

    def save(self, path) -> None:
        write_checkpoint(self, path)


class TeacherSnapshot:
    """Frozen deep copy of a model taken at a task boundary."""

    def __init__(self, model: ContinualModel):
        frozen = copy.deepcopy(model)
        for p in frozen.parameters():
            p.requires_grad = False
            p.grad = None
        frozen.forced_gate = None
        self.model = frozen
        self.task_count = frozen.task_count

    @property
    def total_classes(self) -> int:
        return self.model.total_classes

    def forward(self, x) -> Tensor:
        with no_grad():
            return self.model.forward(x)

    __call__ = forward


def count_parameters(model: ContinualModel) -> ParameterCount:
    return model.count_parameters()


def snapshot_teacher(model: ContinualModel) -> TeacherSnapshot:
    return model.snapshot_teacher()


def write_checkpoint(model: ContinualModel, path) -> None:
    counts = model.class_counts
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<BI{len(counts)}I", HEAD_MODES.index(model.head_mode), len(counts), *counts
    )
    body = b"".join(p.values.astype("<f8").tobytes() for p in model.parameters())
    Path(path).write_bytes(header + body)


def read_checkpoint(path, layer_sizes: Sequence[int], gamma: float = 1.0,
                    beta: float = 10.0) -> ContinualModel:
    """Rebuild a model from a checkpoint; the backbone geometry is not stored."""
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    mode, task_count = struct.unpack_from("<BI", data, 4)
    if mode >= len(HEAD_MODES):
        raise FormatError(f"unknown head mode byte {mode}")
    offset = 9 + 4 * task_count
    if len(data) < offset:
        raise FormatError("truncated checkpoint header")
    counts = struct.unpack_from(f"<{task_count}I", data, 9)
    model = ContinualModel(layer_sizes, HEAD_MODES[mode], gamma, beta)
    for c in counts:
        model.add_task(c)
    params = model.parameters()
    expected = sum(p.size for p in params)
    floats = np.frombuffer(data, dtype="<f8", offset=offset) if len(data) > offset else np.zeros(0)
    if (len(data) - offset) % 8 or floats.size != expected:
        raise FormatError(f"checkpoint holds {(len(data) - offset) / 8:g} floats, expected {expected}")
    pos = 0
    for p in params:
        p.values = floats[pos:pos + p.size].reshape(p.shape).astype(np.float64)
        pos += p.size
    return model
