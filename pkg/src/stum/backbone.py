"""Backbone extractors producing the global forecast ``z_b`` of shape (B, h, N, c_out).

Any object with a ``__call__(x, graph)`` honoring that shape contract can stand
in; the two shipped here are a node-wise MLP and a one-hop graph convolution
that aggregates with ``D^-1 (A + I)`` before the same MLP head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TrafficGraph
from .errors import MissingGraph, ShapeMismatch
from .nn import Linear, Module
from .tensor import Tensor

KINDS = ("mlp", "graphconv")


@dataclass
class BackboneSpec:
    kind: str = "mlp"
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])

    @property
    def uses_adjacency(self) -> bool:
        return self.kind == "graphconv"


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.float64) + np.eye(adjacency.shape[0])
    return a / a.sum(axis=1, keepdims=True)


class Backbone(Module):
    def __init__(
        self,
        spec: BackboneSpec,
        steps: int,
        channels: int,
        horizon: int,
        out_channels: int,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        if spec.kind not in KINDS:
            raise ValueError(f"backbone kind must be one of {KINDS}, got {spec.kind!r}")
        self.kind = spec.kind
        self.steps, self.channels = steps, channels
        self.horizon, self.out_channels = horizon, out_channels
        widths = [steps * channels, *spec.hidden_dims]
        self.hidden = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.head = Linear(widths[-1], horizon * out_channels, rng, dtype)
        self._adj_cache: tuple[int, Tensor] | None = None

    def aggregation(self, graph: TrafficGraph) -> Tensor:
        key = id(graph)
        if self._adj_cache is None or self._adj_cache[0] != key:
            dtype = self.head.weight.dtype
            self._adj_cache = (key, Tensor(normalized_adjacency(graph.adjacency), dtype=dtype))
        return self._adj_cache[1]

    def __call__(self, x: Tensor, graph: TrafficGraph | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.steps or x.shape[3] != self.channels:
            raise ShapeMismatch(f"backbone expects (B, {self.steps}, N, {self.channels}), got {x.shape}")
        if self.kind == "graphconv":
            if graph is None:
                raise MissingGraph("graphconv backbone needs a traffic graph")
            if graph.num_nodes != x.shape[2]:
                raise ShapeMismatch(f"graph has {graph.num_nodes} nodes, input has {x.shape[2]}")
            x = T.matmul(self.aggregation(graph), x)
        b, s, n, c = x.shape
        z = T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, s * c))
        for layer in self.hidden:
            z = T.relu(layer(z))
        z = T.reshape(self.head(z), (b, n, self.horizon, self.out_channels))
        return T.permute(z, (0, 2, 1, 3))


def backbone_forward(backbone: Backbone, x: Tensor, graph: TrafficGraph | None = None) -> Tensor:
    return backbone(x, graph)
