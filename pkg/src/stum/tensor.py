"""Dense tensors with reverse-mode differentiation.

Every differentiable operation records its inputs and a local derivative rule
on the output tensor. ``backward`` orders the recorded graph topologically
(the tape) and walks it once in reverse, accumulating gradients additively into
``.grad`` of every reachable tensor with ``requires_grad=True``. Tensors with
``requires_grad=False`` (frozen weights, data, masks) never receive a buffer.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AxisOutOfRange, NonFiniteInput, NotScalarLoss, ShapeMismatch

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a non-tensor operand to the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


_recording = True


@contextmanager
def no_grad():
    """Build no graph inside the block; outputs never require grad."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting; a python scalar operand is a fixed scale."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), bw)


hadamard = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c.item() if isinstance(c, Tensor) else c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``hadamard`` or ``scale``."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op in ("mul", "hadamard"):
        return mul(a, b)
    if op == "scale":
        if np.ndim(b.data if isinstance(b, Tensor) else b) == 0:
            return scale(a, b)
        return scale(b, a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul needs at least 1-d operands")
    a_vec, b_vec = a.ndim == 1, b.ndim == 1
    A = a.data[None, :] if a_vec else a.data
    B = b.data[:, None] if b_vec else b.data
    if A.shape[-1] != B.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(A.shape[:-2], B.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    fold = B.ndim == 2 and A.ndim > 2
    if fold:
        # one GEMM over all leading extents beats numpy's per-slice loop
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + B.shape[-1:])
    else:
        out = np.matmul(A, B)

    def bw(g):
        G = g
        if b_vec:
            G = G[..., None]
        if a_vec:
            G = G[..., None, :]
        ga = gb = None
        if a.requires_grad:
            if fold:
                ga = (G.reshape(-1, G.shape[-1]) @ B.T).reshape(A.shape)
            else:
                ga = unbroadcast(np.matmul(G, np.swapaxes(B, -1, -2)), A.shape)
            if a_vec:
                ga = ga.reshape(a.shape)
        if b.requires_grad:
            if fold:
                gb = A.reshape(-1, A.shape[-1]).T @ G.reshape(-1, G.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(A, -1, -2), G), B.shape)
            if b_vec:
                gb = gb.reshape(b.shape)
        return ga, gb

    if a_vec:
        out = out[..., 0, :]
    if b_vec:
        out = out[..., 0]
    return _result(out, (a, b), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


# ---------------------------------------------------------------------------
# activations


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteInput(f"{where} received a non-finite value")


def relu(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "relu")
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    # gate logits may be +-inf to pin a gate exactly at 0 or 1
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NonFiniteInput("sigmoid received NaN")
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    axis = _normalize_axis(axis, x.ndim)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def activation(kind: str, x, axis: int | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax requires an axis")
        return softmax(x, axis)
    if kind == "identity":
        return as_tensor(x)
    raise ValueError(f"unknown activation {kind!r}")


def gated_relu_blend(gate, pre, carried=None) -> Tensor:
    """``gate * relu(pre) + (1 - gate) * carried`` as one recorded node.

    ``carried=None`` stands for an all-zero carried state.
    """
    gate, pre = as_tensor(gate), as_tensor(pre)
    _check_finite(pre.data, "gated_relu_blend")
    if carried is not None:
        carried = as_tensor(carried)
        if carried.shape != pre.shape:
            raise ShapeMismatch(f"carried {carried.shape} vs pre-activation {pre.shape}")
    _broadcast_shape(gate, pre)
    g = gate.data
    mask = pre.data > 0
    act = np.maximum(pre.data, 0)
    out = g * act
    if carried is not None:
        out = out + (1.0 - g) * carried.data

    def bw(grad):
        gg = gp = gc = None
        if gate.requires_grad:
            diff = act if carried is None else act - carried.data
            gg = unbroadcast(grad * diff, gate.shape)
        if pre.requires_grad:
            gp = grad * g * mask
        if carried is not None and carried.requires_grad:
            gc = grad * (1.0 - g)
        return gg, gp, gc

    parents = (gate, pre) if carried is None else (gate, pre, carried)
    return _result(out, parents, bw)


# ---------------------------------------------------------------------------
# normalization


def rms_norm(x, weight, eps: float = 1e-8, variant: str = "rms") -> Tensor:
    """Normalize over the last axis and scale by ``weight``.

    ``variant="rms"`` divides by sqrt(mean(x^2) + eps). ``variant="paper_eq9"``
    divides by mean(x^2) + eps with no square root.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1:] != weight.shape:
        raise ShapeMismatch(f"rms_norm weight {weight.shape} vs input {x.shape}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    if variant == "rms":
        r = 1.0 / np.sqrt(ms + eps)
    elif variant == "paper_eq9":
        r = 1.0 / (ms + eps)
    else:
        raise ValueError(f"unknown norm variant {variant!r}")
    xr = x.data * r
    out = xr * weight.data

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gwx = g * weight.data
            proj = np.mean(gwx * x.data, axis=-1, keepdims=True)
            if variant == "rms":
                gx = r * gwx - x.data * (r * r * r) * proj
            else:
                gx = r * gwx - 2.0 * x.data * (r * r) * proj
        if weight.requires_grad:
            gw = (g * xr).reshape(-1, weight.shape[0]).sum(axis=0)
        return gx, gw

    return _result(out, (x, weight), bw)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce(kind: str, x, axis: int | None = None) -> Tensor:
    """``sum``, ``mean`` or ``abs_mean`` over one axis or over everything."""
    x = as_tensor(x)
    if axis is not None:
        axis = _normalize_axis(axis, x.ndim)
    count = x.size if axis is None else x.shape[axis]

    if kind == "sum":
        out = x.data.sum(axis=axis)
        local = None
        factor = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axis)
        local = None
        factor = 1.0 / count
    elif kind == "abs_mean":
        out = np.abs(x.data).mean(axis=axis)
        local = np.sign(x.data)
        factor = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def bw(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        full = np.broadcast_to(g * factor, x.shape)
        if local is not None:
            full = full * local
        return (np.array(full, dtype=x.dtype),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), bw)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis)


def mean(x, axis: int | None = None) -> Tensor:
    return reduce("mean", x, axis)


def abs_mean(x, axis: int | None = None) -> Tensor:
    return reduce("abs_mean", x, axis)


# ---------------------------------------------------------------------------
# differentiation


def tape(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps ``x`` to a scalar tensor; it may close over other tensors. The
    error per element is |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs x.requires_grad")
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    a_flat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - h
        fm = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        central = (fp - fm) / (2.0 * h)
        a = float(a_flat[i])
        err = abs(a - central) / max(abs(a), abs(central), 1e-8)
        worst = max(worst, err)
    return worst
