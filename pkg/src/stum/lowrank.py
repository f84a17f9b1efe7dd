"""Low-rank adaptive linear layer: a frozen base weight plus a trainable rank-r update."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .nn import Module, parameter
from .tensor import Tensor

ACTIVATIONS = ("identity", "relu")


def default_rank(embed_dim: int) -> int:
    return max(1, math.ceil(embed_dim / 4))


class LowRankLinear(Module):
    """``y = act(x @ (W + dW) + b)`` with ``dW = A @ B.T * scale``.

    ``W`` has shape (n_in, n_out) and never trains unless ``train_base_weight``;
    ``A`` is (n_in, r), ``B`` is (n_out, r). With the ``"paper"`` convention
    ``scale = r / (lora_scale + eps)``; ``"alpha_over_r"`` uses ``lora_scale / r``.
    ``B`` starts at zero so the layer initially behaves as its frozen base.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rank: int,
        rng: np.random.Generator,
        lora_scale: float = 1.0,
        eps: float = 1e-8,
        convention: str = "paper",
        activation: str = "identity",
        train_base_weight: bool = False,
        dtype=np.float64,
    ):
        if rank < 0 or rank > min(n_in, n_out):
            raise ValueError(f"rank {rank} outside [0, min({n_in}, {n_out})]")
        if convention not in ("paper", "alpha_over_r"):
            raise ValueError(f"unknown lora scale convention {convention!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.rank = rank
        self.lora_scale = float(lora_scale)
        self.eps = float(eps)
        self.convention = convention
        self.activation = activation
        bound = 1.0 / math.sqrt(n_in)
        self.W = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), trainable=train_base_weight, dtype=dtype)
        self.A = parameter(rng.uniform(-bound, bound, size=(n_in, rank)), dtype=dtype)
        self.B = parameter(np.zeros((n_out, rank)), dtype=dtype)
        self.bias = parameter(np.zeros(n_out), dtype=dtype)

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    @property
    def scale(self) -> float:
        if self.convention == "paper":
            return self.rank / (self.lora_scale + self.eps)
        return self.lora_scale / self.rank if self.rank else 0.0

    def delta_weight(self) -> Tensor:
        return T.scale(T.matmul(self.A, T.transpose(self.B)), self.scale)

    def effective_weight(self) -> Tensor:
        return T.add(self.W, self.delta_weight())

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"expected last extent {self.n_in}, got {x.shape}")
        y = T.add(T.matmul(x, self.effective_weight()), self.bias)
        if self.activation == "relu":
            y = T.relu(y)
        return y

    def trainable_param_count(self) -> int:
        count = self.rank * (self.n_in + self.n_out) + self.n_out
        if self.W.requires_grad:
            count += self.n_in * self.n_out
        return count

    def dense_equivalent_count(self) -> int:
        return self.n_in * self.n_out + self.n_out


def delta_weight(layer: LowRankLinear) -> Tensor:
    return layer.delta_weight()


def trainable_param_count(layer: LowRankLinear) -> int:
    return layer.trainable_param_count()
