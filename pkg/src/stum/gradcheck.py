"""Finite-difference checks of every differentiable operation and of the full model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .astuc import AstucCell, MemoryMerge
from .backbone import Backbone, BackboneSpec
from .data import TrafficGraph
from .lowrank import LowRankLinear
from .mlrf import MlrfBlock
from .nn import Linear
from .model import StumConfig, StumModel
from .tensor import Tensor, finite_diff_check
from .trainer import mae_loss

STEP = 1e-5


def _param(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    """Values in +-[0.1, 1] so relu/abs kinks are never straddled by the probe step."""
    mag = rng.uniform(0.1, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(weights)))


def _check_all(fn, tensors: dict[str, Tensor], h: float) -> dict[str, float]:
    return {name: finite_diff_check(lambda _: fn(), t, h) for name, t in tensors.items()}


def _randomize_factors(module, rng, scale: float = 0.3) -> None:
    """Nonzero B factors and biases.

    Zero biases behind a ReLU put pre-activations exactly on the kink whenever a
    whole upstream layer is dead, and central differences straddle it.
    """
    for m in module.modules():
        if isinstance(m, LowRankLinear):
            m.B.data = rng.uniform(-scale, scale, size=m.B.shape)
        if isinstance(m, (LowRankLinear, Linear)):
            m.bias.data = rng.uniform(-0.1, 0.1, size=m.bias.shape)


def op_checks(seed: int = 0, h: float = STEP) -> dict[str, float]:
    """Max relative error per primitive (each checked against every input)."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(name, fn, tensors):
        results[name] = max(_check_all(fn, tensors, h).values())

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    row = _param(rng, 4)
    w = rng.standard_normal((3, 4))
    record("add", lambda: _weighted_sum(T.add(a, row), w), {"a": a, "row": row})
    record("sub", lambda: _weighted_sum(T.sub(a, b), w), {"a": a, "b": b})
    record("mul", lambda: _weighted_sum(T.mul(a, row), w), {"a": a, "row": row})
    record("scale", lambda: _weighted_sum(T.scale(a, -2.5), w), {"a": a})

    m1, m2 = _param(rng, 3, 5), _param(rng, 5, 2)
    batch = _param(rng, 2, 3, 5)
    vec = _param(rng, 5)
    record("matmul", lambda: _weighted_sum(T.matmul(m1, m2), rng_fixed(1, (3, 2))), {"a": m1, "b": m2})
    record("matmul_batched", lambda: _weighted_sum(T.matmul(batch, m2), rng_fixed(2, (2, 3, 2))),
           {"a": batch, "b": m2})
    record("matmul_vector", lambda: _weighted_sum(T.matmul(m1, vec), rng_fixed(3, (3,))), {"a": m1, "v": vec})

    x = _away_from_zero(rng, 3, 4)
    record("relu", lambda: _weighted_sum(T.relu(x), w), {"x": x})
    record("sigmoid", lambda: _weighted_sum(T.sigmoid(a), w), {"x": a})
    record("softmax", lambda: _weighted_sum(T.softmax(a, axis=1), w), {"x": a})

    nx = _param(rng, 2, 3, 4)
    nw = _param(rng, 4, low=0.5, high=1.5)
    nwts = rng_fixed(4, (2, 3, 4))
    record("rms_norm", lambda: _weighted_sum(T.rms_norm(nx, nw, 1e-6), nwts), {"x": nx, "w": nw})
    record("rms_norm_paper_eq9", lambda: _weighted_sum(T.rms_norm(nx, nw, 1e-6, "paper_eq9"), nwts),
           {"x": nx, "w": nw})

    record("sum", lambda: _weighted_sum(T.sum(a, axis=0), rng_fixed(5, (4,))), {"x": a})
    record("mean", lambda: _weighted_sum(T.mean(a, axis=1), rng_fixed(6, (3,))), {"x": a})
    record("abs_mean", lambda: T.abs_mean(x), {"x": x})
    record("reshape_permute", lambda: _weighted_sum(T.permute(T.reshape(nx, (6, 4)), (1, 0)), rng_fixed(7, (4, 6))),
           {"x": nx})

    gate = _param(rng, 1, low=0.2, high=0.8)
    pre = _away_from_zero(rng, 2, 3, 4)
    carried = _param(rng, 2, 3, 4)
    record("gated_relu_blend", lambda: _weighted_sum(T.gated_relu_blend(gate, pre, carried), nwts),
           {"g": gate, "pre": pre, "carried": carried})
    return results


def rng_fixed(key: int, shape) -> np.ndarray:
    return np.random.default_rng(1000 + key).standard_normal(shape)


def layer_checks(seed: int = 0, h: float = STEP) -> dict[str, float]:
    """Low-rank layer, cells, merge, block and backbones against finite differences."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(name, module, fn):
        params = dict(module.named_parameters())
        results[name] = max(_check_all(fn, params, h).values())

    layer = LowRankLinear(6, 5, 2, rng, activation="relu")
    _randomize_factors(layer, rng)
    lx = Tensor(rng.standard_normal((4, 6)))
    record("low_rank_linear", layer, lambda: _weighted_sum(layer(lx), rng_fixed(10, (4, 5))))

    b, s, n, d = 2, 3, 4, 2
    xs = Tensor(rng.standard_normal((b, s, n, d)))
    carried = Tensor(rng.standard_normal((b, s, n, d)))
    wts = rng_fixed(11, (b, s, n, d))
    for axis in ("time", "space"):
        cell = AstucCell(axis, s, n, d, 2, rng)
        _randomize_factors(cell, rng)
        record(f"astuc_{axis}", cell, lambda cell=cell: _weighted_sum(cell(xs, carried), wts))

    merge = MemoryMerge(d, rng)
    record("memory_merge", merge, lambda: _weighted_sum(merge(xs, carried), wts))

    block = MlrfBlock(s, n, d, 4, 2, rng, dropout_rate=0.0)
    _randomize_factors(block, rng)
    record("mlrf_block", block, lambda: _weighted_sum(block(xs, training=False)[0], wts))

    graph = TrafficGraph(n, [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 2.0), (2, 3, 1.0), (3, 2, 1.0)])
    bx = Tensor(rng.standard_normal((b, s, n, 1)))
    for kind in ("mlp", "graphconv"):
        bb = Backbone(BackboneSpec(kind, [5, 5]), s, 1, 2, 1, rng)
        _randomize_factors(bb, rng)
        record(f"backbone_{kind}", bb, lambda bb=bb: _weighted_sum(bb(bx, graph), rng_fixed(12, (b, 2, n, 1))))
    return results


def toy_model(seed: int = 0, backbone: str = "mlp") -> tuple[StumModel, np.ndarray, np.ndarray, TrafficGraph]:
    """The 4-node toy: s = h = 3, two blocks of four cells, d = 8, float64."""
    cfg = StumConfig(
        input_len=3,
        horizon=3,
        num_nodes=4,
        in_channels=1,
        embed_dim=8,
        num_mlrf=2,
        astucs_per_block=4,
        dropout_rate=0.0,
        backbone=BackboneSpec(backbone, [8, 8]),
        seed=seed,
        dtype="float64",
    )
    model = StumModel(cfg)
    rng = np.random.default_rng(seed + 7)
    _randomize_factors(model, rng)
    graph = TrafficGraph(4, [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0), (2, 3, 1.0), (3, 2, 1.0)])
    x = rng.standard_normal((2, 3, 4, 1))
    y = rng.standard_normal((2, 3, 4, 1))
    return model, x, y, graph


def model_check(seed: int = 0, h: float = STEP, backbone: str = "mlp") -> dict[str, float]:
    """Full forward + MAE loss: error per trainable tensor, plus the input."""
    model, x, y, graph = toy_model(seed, backbone)
    xt = Tensor(x, requires_grad=True)
    model.eval()

    def loss():
        return mae_loss(model(xt, graph, training=False), y)

    tensors = dict(model.named_parameters())
    tensors["input"] = xt
    out = _check_all(loss, tensors, h)
    model.zero_grad()
    return out


def run_suite(seed: int = 0, h: float = STEP) -> dict[str, float]:
    results = {}
    results.update({f"op.{k}": v for k, v in op_checks(seed, h).items()})
    results.update({f"layer.{k}": v for k, v in layer_checks(seed, h).items()})
    results["model.stum_mae"] = max(model_check(seed, h).values())
    results["model.stum_graphconv_mae"] = max(model_check(seed, h, "graphconv").values())
    return results
