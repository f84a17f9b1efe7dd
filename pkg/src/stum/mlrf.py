"""Multi-layer residual fusion blocks built from alternating time/space cells."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .astuc import AstucCell, MemoryMerge
from .errors import ShapeMismatch
from .nn import Module, dropout, parameter
from .tensor import Tensor


class MlrfBlock(Module):
    """RMS-normalize, run K alternating cells, merge, Add&Norm, residual carry.

    Cells alternate time, space, time, space, ... and the spatial carrier of
    one pair feeds the temporal cell of the next. The first temporal cell
    starts from an all-zero carrier.
    """

    def __init__(
        self,
        steps: int,
        nodes: int,
        dim: int,
        num_cells: int,
        rank: int,
        rng: np.random.Generator,
        *,
        block_index: int = 0,
        dropout_rate: float = 0.1,
        norm_variant: str = "rms",
        norm_eps: float = 1e-6,
        cell_gate_init: float = 0.5,
        retain_init: float = 0.9,
        merge_form: str = "sum",
        lora_scale: float = 1.0,
        lora_eps: float = 1e-8,
        lora_convention: str = "paper",
        train_base_weight: bool = False,
        dtype=np.float64,
    ):
        if num_cells < 2 or num_cells % 2:
            raise ValueError(f"cell count must be even and >= 2, got {num_cells}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.block_index = block_index
        self.steps, self.nodes, self.dim = steps, nodes, dim
        self.dropout_rate = dropout_rate
        self.norm_variant = norm_variant
        self.norm_eps = norm_eps
        self.norm_weight = parameter(np.ones(dim), dtype=dtype)
        self.cells = [
            AstucCell(
                "time" if i % 2 == 0 else "space",
                steps,
                nodes,
                dim,
                rank,
                rng,
                gate_init=cell_gate_init,
                lora_scale=lora_scale,
                lora_eps=lora_eps,
                convention=lora_convention,
                train_base_weight=train_base_weight,
                dtype=dtype,
            )
            for i in range(num_cells)
        ]
        self.merge = MemoryMerge(dim, rng, retain_init=retain_init, form=merge_form, dtype=dtype)
        self.out_norm_weight = parameter(np.ones(dim), dtype=dtype)
        self.rng: np.random.Generator | None = None

    def carriers(self, x_hat: Tensor) -> tuple[Tensor, Tensor]:
        g_s = None
        for time_cell, space_cell in zip(self.cells[0::2], self.cells[1::2]):
            g_t = time_cell(x_hat, g_s)
            g_s = space_cell(x_hat, g_t)
        return g_t, g_s

    def __call__(self, x_in: Tensor, training: bool | None = None) -> tuple[Tensor, Tensor]:
        if training is None:
            training = self.training
        if x_in.ndim != 4 or x_in.shape[1:] != (self.steps, self.nodes, self.dim):
            raise ShapeMismatch(
                f"block expects (B, {self.steps}, {self.nodes}, {self.dim}), got {x_in.shape}"
            )
        x_hat = T.rms_norm(x_in, self.norm_weight, self.norm_eps, self.norm_variant)
        g_t, g_s = self.carriers(x_hat)
        delta = T.rms_norm(self.merge(g_t, g_s), self.out_norm_weight, self.norm_eps, self.norm_variant)
        rng = self.rng if self.rng is not None else np.random.default_rng(0)
        return T.add(x_in, dropout(delta, self.dropout_rate, rng, training)), delta

    def astuc_param_count(self) -> int:
        return sum(c.trainable_param_count() for c in self.cells)


def block_forward(block: MlrfBlock, x_in: Tensor, training: bool) -> tuple[Tensor, Tensor]:
    return block(x_in, training)


class MlrfStack(Module):
    def __init__(self, blocks: list[MlrfBlock]):
        if not blocks:
            raise ValueError("an MLRF stack needs at least one block")
        shapes = {(b.steps, b.nodes, b.dim) for b in blocks}
        if len(shapes) != 1:
            raise ShapeMismatch(f"blocks disagree on interface shape: {sorted(shapes)}")
        self.blocks = blocks

    def __call__(self, x0: Tensor, training: bool | None = None) -> tuple[Tensor, Tensor]:
        h = x0
        delta = None
        for block in self.blocks:
            h, delta = block(h, training)
        return h, delta

    def astuc_param_count(self) -> int:
        return sum(b.astuc_param_count() for b in self.blocks)


def stack_forward(stack: MlrfStack, x0: Tensor, training: bool) -> tuple[Tensor, Tensor]:
    return stack(x0, training)
