"""STUM assembly: dual extraction, MLRF stack, predictor head and gated fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .astuc import logit
from .backbone import Backbone, BackboneSpec
from .data import TrafficGraph
from .errors import ConfigError, ShapeMismatch
from .lowrank import LowRankLinear, default_rank
from .mlrf import MlrfBlock, MlrfStack
from .nn import Linear, Module, parameter
from .tensor import Tensor

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class StumConfig:
    input_len: int = 12
    horizon: int = 12
    num_nodes: int = 0  # 0: taken from the data
    in_channels: int = 1
    embed_dim: int = 16
    num_mlrf: int = 4
    astucs_per_block: int = 8
    rank: int = 0  # 0: ceil(embed_dim / 4)
    lora_scale: float = 1.0
    lora_eps: float = 1e-8
    lora_scale_convention: str = "paper"
    train_base_weight: bool = False
    gate_init: float = 0.5
    gate_shape: str = "scalar"
    cell_gate_init: float = 0.5
    retain_init: float = 0.9
    merge_form: str = "sum"
    head_activation: str = "relu"
    norm_variant: str = "rms"
    norm_eps: float = 1e-6
    dropout_rate: float = 0.1
    use_mlrf: bool = True
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    seed: int = 0
    dtype: str = "float64"

    @property
    def effective_rank(self) -> int:
        return self.rank if self.rank > 0 else default_rank(self.embed_dim)

    def validate(self) -> None:
        counts = {
            "input_len": self.input_len,
            "horizon": self.horizon,
            "num_nodes": self.num_nodes,
            "in_channels": self.in_channels,
            "embed_dim": self.embed_dim,
            "num_mlrf": self.num_mlrf,
            "astucs_per_block": self.astucs_per_block,
        }
        for key, value in counts.items():
            if value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if self.astucs_per_block % 2:
            raise ConfigError(f"astucs_per_block must be even, got {self.astucs_per_block}")
        if self.gate_shape not in ("scalar", "per_channel"):
            raise ConfigError(f"gate_shape must be scalar or per_channel, got {self.gate_shape!r}")
        if self.head_activation not in ("relu", "softmax", "identity"):
            raise ConfigError(f"unknown head activation {self.head_activation!r}")
        if self.norm_variant not in ("rms", "paper_eq9"):
            raise ConfigError(f"unknown norm variant {self.norm_variant!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        for key in ("gate_init", "cell_gate_init", "retain_init"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {getattr(self, key)}")


@dataclass
class DualFeatures:
    z_b: Tensor  # (B, h, N, c_out)
    x_embed: Tensor  # (B, s, N, m)


@dataclass
class Forward:
    """Every intermediate of one pass, for inspection and tests."""

    z_b: Tensor
    x_embed: Tensor | None
    hidden: Tensor | None
    delta: Tensor | None
    z_t: Tensor | None
    alpha: Tensor | None
    out: Tensor


class FusionGate(Module):
    """``Z = (1 - alpha) * z_b + alpha * z_t`` with ``alpha = sigmoid(raw_gate)``.

    Setting ``raw_gate`` to -inf or +inf pins alpha at exactly 0 or 1.
    """

    def __init__(self, init: float = 0.5, width: int = 1, dtype=np.float64):
        self.raw_gate = parameter(np.full(width, logit(init)), dtype=dtype)

    @property
    def alpha(self) -> Tensor:
        return T.sigmoid(self.raw_gate)

    def force(self, value: float) -> None:
        self.raw_gate.data = np.full_like(self.raw_gate.data, logit(value))

    def __call__(self, z_b: Tensor, z_t: Tensor) -> Tensor:
        return fuse(z_b, z_t, self.alpha)


def fuse(z_b: Tensor, z_t: Tensor, alpha: Tensor) -> Tensor:
    if z_b.shape != z_t.shape:
        raise ShapeMismatch(f"backbone output {z_b.shape} vs head output {z_t.shape}")
    return T.add(T.mul(T.sub(1.0, alpha), z_b), T.mul(alpha, z_t))


class StumModel(Module):
    def __init__(self, config: StumConfig):
        config.validate()
        self.config = config
        dtype = DTYPES[config.dtype]
        rng = np.random.default_rng(config.seed)
        s, h, n, c, d = (
            config.input_len,
            config.horizon,
            config.num_nodes,
            config.in_channels,
            config.embed_dim,
        )
        self.backbone = Backbone(config.backbone, s, c, h, c, rng, dtype)
        if config.use_mlrf:
            r = config.effective_rank
            lora = dict(
                lora_scale=config.lora_scale,
                lora_eps=config.lora_eps,
                lora_convention=config.lora_scale_convention,
                train_base_weight=config.train_base_weight,
            )
            self.embed = LowRankLinear(
                c,
                d,
                min(r, c, d),
                rng,
                lora_scale=config.lora_scale,
                eps=config.lora_eps,
                convention=config.lora_scale_convention,
                train_base_weight=config.train_base_weight,
                dtype=dtype,
            )
            blocks = [
                MlrfBlock(
                    s,
                    n,
                    d,
                    config.astucs_per_block,
                    r,
                    rng,
                    block_index=i,
                    dropout_rate=config.dropout_rate,
                    norm_variant=config.norm_variant,
                    norm_eps=config.norm_eps,
                    cell_gate_init=config.cell_gate_init,
                    retain_init=config.retain_init,
                    merge_form=config.merge_form,
                    dtype=dtype,
                    **lora,
                )
                for i in range(config.num_mlrf)
            ]
            self.stack = MlrfStack(blocks)
            self.head = Linear(s * d, h * c, rng, dtype)
            width = 1 if config.gate_shape == "scalar" else c
            self.gate = FusionGate(config.gate_init, width, dtype)
        # dropout masks draw from their own stream so parameter init stays fixed
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        if config.use_mlrf:
            for block in self.stack.blocks:
                block.rng = self.dropout_rng

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]

    def as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        expected = (cfg.input_len, cfg.num_nodes, cfg.in_channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatch(f"model expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")

    def extract_dual(self, x, graph: TrafficGraph | None = None) -> DualFeatures:
        x = self.as_input(x)
        self._check_input(x)
        z_b = self.backbone(x, graph)
        x_embed = self.embed(x) if self.config.use_mlrf else None
        return DualFeatures(z_b, x_embed)

    def predict_head(self, hidden: Tensor) -> Tensor:
        cfg = self.config
        b, s, n, d = hidden.shape
        if (s, n, d) != (cfg.input_len, cfg.num_nodes, cfg.embed_dim):
            raise ShapeMismatch(f"head expects (B, {cfg.input_len}, {cfg.num_nodes}, {cfg.embed_dim}), got {hidden.shape}")
        slab = T.reshape(T.permute(hidden, (0, 2, 1, 3)), (b, n, s * d))
        if cfg.head_activation == "relu":
            slab = T.relu(slab)
        elif cfg.head_activation == "softmax":
            slab = T.softmax(slab, axis=-1)
        z = T.reshape(self.head(slab), (b, n, cfg.horizon, cfg.in_channels))
        return T.permute(z, (0, 2, 1, 3))

    def run(self, x, graph: TrafficGraph | None = None, training: bool | None = None) -> Forward:
        if training is None:
            training = self.training
        dual = self.extract_dual(x, graph)
        if not self.config.use_mlrf:
            return Forward(dual.z_b, None, None, None, None, None, dual.z_b)
        hidden, delta = self.stack(dual.x_embed, training)
        z_t = self.predict_head(hidden)
        alpha = self.gate.alpha
        out = fuse(dual.z_b, z_t, alpha)
        return Forward(dual.z_b, dual.x_embed, hidden, delta, z_t, alpha, out)

    def __call__(self, x, graph: TrafficGraph | None = None, training: bool | None = None) -> Tensor:
        return self.run(x, graph, training).out

    forward = __call__

    def alpha_value(self) -> np.ndarray:
        return self.gate.alpha.data.copy()

    def theta_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.named_parameters() if not k.startswith("gate.")]

    def alpha_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.named_parameters() if k.startswith("gate.")]

    def low_rank_layers(self) -> list[tuple[str, LowRankLinear]]:
        found = []

        def walk(module: Module, prefix: str):
            for key, value in vars(module).items():
                if isinstance(value, LowRankLinear):
                    found.append((prefix + key, value))
                elif isinstance(value, Module):
                    walk(value, f"{prefix}{key}.")
                elif isinstance(value, (list, tuple)):
                    for i, item in enumerate(value):
                        if isinstance(item, Module):
                            if isinstance(item, LowRankLinear):
                                found.append((f"{prefix}{key}.{i}", item))
                            else:
                                walk(item, f"{prefix}{key}.{i}.")

        walk(self, "")
        return found


def _count(tensors) -> int:
    return int(sum(t.size for t in tensors))


def param_report(model: StumModel) -> dict:
    """Exact parameter counts by enumeration of every stored buffer."""
    trainable = dict(model.named_parameters())
    frozen = {k: t for k, t in model.named_tensors() if not t.requires_grad}
    groups = ("backbone", "embed", "stack", "head", "gate")
    per_module = {}
    for g in groups:
        per_module[g] = _count(t for k, t in trainable.items() if k.split(".")[0] == g)
    low_rank = model.low_rank_layers()
    lr_trainable = sum(layer.trainable_param_count() for _, layer in low_rank)
    lr_dense = sum(layer.dense_equivalent_count() for _, layer in low_rank)
    trainable_count = _count(trainable.values())
    report = {
        "trainable_count": trainable_count,
        "frozen_count": _count(frozen.values()),
        "per_module": per_module,
        "dense_equivalent_count": trainable_count - lr_trainable + lr_dense,
        "astuc_count": 0,
        "mlrf_trainable": 0,
        "mlrf_dense_equivalent": 0,
    }
    if model.config.use_mlrf:
        stack_lr = [layer for name, layer in low_rank if name.startswith("stack.")]
        mlrf_trainable = per_module["stack"]
        report["astuc_count"] = model.stack.astuc_param_count()
        report["mlrf_trainable"] = mlrf_trainable
        report["mlrf_dense_equivalent"] = (
            mlrf_trainable
            - sum(layer.trainable_param_count() for layer in stack_lr)
            + sum(layer.dense_equivalent_count() for layer in stack_lr)
        )
    return report


def build_model(config: StumConfig, nodes: int | None = None, channels: int | None = None) -> StumModel:
    """Fill data-dependent extents into ``config`` and construct the model."""
    if nodes is not None:
        config.num_nodes = nodes
    if channels is not None:
        config.in_channels = channels
    return StumModel(config)
