"""Adaptive spatio-temporal unitized cells.

A cell owns one low-rank map and a scalar gate ``g = sigmoid(gate_logit)``.
Given the block input ``X`` of shape (B, s, N, d) and the state carried from the
previous cell, it computes

    G = g * relu(Mix(X + G_prev)) + (1 - g) * G_prev

where a time cell mixes each node's (s*d) slab and a space cell mixes each time
step's (N*d) slab. ``memory_merge`` joins the last temporal and spatial carriers
through a learned per-feature retain gate.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .lowrank import LowRankLinear
from .nn import Module, parameter
from .tensor import Tensor

AXES = ("time", "space")
MERGE_FORMS = ("sum", "concat")


def logit(p: float) -> float:
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p / (1.0 - p))


class AstucCell(Module):
    def __init__(
        self,
        axis: str,
        steps: int,
        nodes: int,
        dim: int,
        rank: int,
        rng: np.random.Generator,
        gate_init: float = 0.5,
        lora_scale: float = 1.0,
        lora_eps: float = 1e-8,
        convention: str = "paper",
        train_base_weight: bool = False,
        dtype=np.float64,
    ):
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
        self.axis = axis
        self.steps, self.nodes, self.dim = steps, nodes, dim
        width = steps * dim if axis == "time" else nodes * dim
        self.map = LowRankLinear(
            width,
            width,
            min(rank, width),
            rng,
            lora_scale=lora_scale,
            eps=lora_eps,
            convention=convention,
            train_base_weight=train_base_weight,
            dtype=dtype,
        )
        self.gate_logit = parameter([logit(gate_init)], dtype=dtype)

    @property
    def gate(self) -> Tensor:
        return T.sigmoid(self.gate_logit)

    def mix(self, x: Tensor) -> Tensor:
        """Apply the low-rank map along this cell's axis; shape is preserved."""
        b, s, n, d = x.shape
        if self.axis == "time":
            slab = T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, s * d))
            out = self.map(slab)
            return T.permute(T.reshape(out, (b, n, s, d)), (0, 2, 1, 3))
        slab = T.reshape(x, (b, s, n * d))
        return T.reshape(self.map(slab), (b, s, n, d))

    def __call__(self, x: Tensor, carried: Tensor | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.steps, self.nodes, self.dim):
            raise ShapeMismatch(
                f"{self.axis} cell expects (B, {self.steps}, {self.nodes}, {self.dim}), got {x.shape}"
            )
        if carried is not None and carried.shape != x.shape:
            raise ShapeMismatch(f"carried state {carried.shape} vs input {x.shape}")
        pre = self.mix(x if carried is None else T.add(x, carried))
        return T.gated_relu_blend(self.gate, pre, carried)

    def trainable_param_count(self) -> int:
        return self.map.trainable_param_count() + self.gate_logit.size

    def dense_equivalent_count(self) -> int:
        return self.map.dense_equivalent_count() + self.gate_logit.size


def update_time(cell: AstucCell, x: Tensor, g_s_prev: Tensor | None) -> Tensor:
    if cell.axis != "time":
        raise ValueError("update_time needs a time cell")
    return cell(x, g_s_prev)


def update_space(cell: AstucCell, x: Tensor, g_t: Tensor) -> Tensor:
    if cell.axis != "space":
        raise ValueError("update_space needs a space cell")
    return cell(x, g_t)


def memory_merge(g_t: Tensor, g_s: Tensor, retain: Tensor, bias: Tensor) -> Tensor:
    """``retain * (g_t + g_s) + bias`` with ``retain`` already squashed to [0, 1]."""
    if g_t.shape != g_s.shape:
        raise ShapeMismatch(f"temporal {g_t.shape} vs spatial {g_s.shape}")
    return T.add(T.mul(retain, T.add(g_t, g_s)), bias)


class MemoryMerge(Module):
    """Learned retain gate over the joined temporal/spatial carriers.

    ``form="sum"`` joins by elementwise sum; ``form="concat"`` concatenates on
    the feature axis and projects back to ``dim`` (done as two d x d products).
    """

    def __init__(self, dim: int, rng: np.random.Generator, retain_init: float = 0.9,
                 form: str = "sum", dtype=np.float64):
        if form not in MERGE_FORMS:
            raise ValueError(f"merge form must be one of {MERGE_FORMS}, got {form!r}")
        self.form = form
        self.retain_logit = parameter(np.full(dim, logit(retain_init)), dtype=dtype)
        self.bias = parameter(np.zeros(dim), dtype=dtype)
        if form == "concat":
            bound = 1.0 / math.sqrt(2 * dim)
            self.proj_t = parameter(rng.uniform(-bound, bound, (dim, dim)), dtype=dtype)
            self.proj_s = parameter(rng.uniform(-bound, bound, (dim, dim)), dtype=dtype)

    @property
    def retain(self) -> Tensor:
        return T.sigmoid(self.retain_logit)

    def __call__(self, g_t: Tensor, g_s: Tensor) -> Tensor:
        if self.form == "sum":
            return memory_merge(g_t, g_s, self.retain, self.bias)
        if g_t.shape != g_s.shape:
            raise ShapeMismatch(f"temporal {g_t.shape} vs spatial {g_s.shape}")
        joined = T.add(T.matmul(g_t, self.proj_t), T.matmul(g_s, self.proj_s))
        return T.add(T.mul(self.retain, joined), self.bias)
