"""Reverse-mode automatic differentiation over dense float64 arrays.

The tape is deliberately small: a fixed primitive set (enough for the
utility networks, the monotonic mixer, and the quantile regression loss),
exact reverse-mode gradients, and an RMSProp optimizer.  Everything is
float64, and the same graph built from the same inputs produces
bitwise-identical values and gradients.

Subgradient tie-breaks are fixed so they can be asserted: relu'(0) = 0 and
d|x|/dx = 0 at x = 0.

Concurrency: a tape and a ParameterSet each have a single writer.  Finished
values may be read from any thread; never mutate a tape concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "ParameterSet",
    "constant",
    "parameter",
    "apply_primitive",
    "backward",
    "optimizer_step",
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "relu",
    "cos",
    "absolute",
    "affine",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "broadcast_to",
    "reshape",
    "PRIMITIVES",
    "RMS_DECAY",
    "RMS_EPSILON",
]

RMS_DECAY = 0.99
RMS_EPSILON = 1e-5


class AutodiffError(ValueError):
    """Base class for tape construction and differentiation errors."""


class ShapeError(AutodiffError):
    """Input shapes are incompatible with a primitive's rule."""


class NonFiniteError(AutodiffError):
    """A value or gradient contains NaN or Inf."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _check_finite(context: str, arr: np.ndarray) -> None:
    # Cheap probe first: any NaN/Inf entry makes the sum non-finite.  A
    # non-finite sum of finite entries (overflow) is not an invariant
    # violation, hence the precise re-check.
    if math.isfinite(float(arr.sum())):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{context}: result contains non-finite values")


class Tensor:
    """One tape node: a float64 array plus the recorded op that produced it."""

    __slots__ = ("value", "parents", "primitive", "grad", "requires_grad", "ctx")

    def __init__(self, value, *, parents=(), primitive=None, requires_grad=False, ctx=None):
        self.value = _as_array(value)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.primitive: str | None = primitive
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.ctx = ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = self.primitive or ("param" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.value.shape})"

    # Operator sugar; all shape rules live in the primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    """Wrap an array as a non-trainable leaf."""
    node = Tensor(value)
    _check_finite("constant", node.value)
    return node


def parameter(value) -> Tensor:
    """Wrap an array as a trainable leaf with a zero gradient accumulator."""
    node = Tensor(value, requires_grad=True)
    _check_finite("parameter", node.value)
    node.grad = np.zeros_like(node.value)
    return node


# ---------------------------------------------------------------------------
# Primitive rules.
#
# forward(values, ctx) -> np.ndarray, raising ShapeError on bad inputs.
# backward(grad, out_value, values, ctx, needs) -> per-parent gradients
# (None where needs[i] is False).
# ---------------------------------------------------------------------------


def _suffix_broadcast_shape(tag: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    # Elementwise ops allow equal shapes or a leading-dimension batch
    # broadcast: the smaller shape must be a suffix of the larger.
    if a.shape == b.shape:
        return a.shape
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim :] == small.shape:
        return big.shape
    raise ShapeError(f"{tag}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    summed = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    return summed.reshape(shape)


def _fwd_add(values, ctx):
    a, b = values
    _suffix_broadcast_shape("add", a, b)
    return a + b


def _bwd_add(grad, out, values, ctx, needs):
    a, b = values
    ga = _unbroadcast(grad, a.shape) if needs[0] else None
    gb = _unbroadcast(grad, b.shape) if needs[1] else None
    return ga, gb


def _fwd_sub(values, ctx):
    a, b = values
    _suffix_broadcast_shape("sub", a, b)
    return a - b


def _bwd_sub(grad, out, values, ctx, needs):
    a, b = values
    ga = _unbroadcast(grad, a.shape) if needs[0] else None
    gb = _unbroadcast(-grad, b.shape) if needs[1] else None
    return ga, gb


def _fwd_mul(values, ctx):
    a, b = values
    _suffix_broadcast_shape("mul", a, b)
    return a * b


def _bwd_mul(grad, out, values, ctx, needs):
    a, b = values
    ga = _unbroadcast(grad * b, a.shape) if needs[0] else None
    gb = _unbroadcast(grad * a, b.shape) if needs[1] else None
    return ga, gb


def _fwd_matmul(values, ctx):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _bwd_matmul(grad, out, values, ctx, needs):
    a, b = values
    ga = grad @ b.T if needs[0] else None
    gb = a.T @ grad if needs[1] else None
    return ga, gb


def _fwd_bmm(values, ctx):
    a, b = values
    ok = a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    if not ok:
        raise ShapeError(f"bmm: cannot batch-multiply {a.shape} by {b.shape}")
    return a @ b


def _bwd_bmm(grad, out, values, ctx, needs):
    a, b = values
    ga = grad @ b.transpose(0, 2, 1) if needs[0] else None
    gb = a.transpose(0, 2, 1) @ grad if needs[1] else None
    return ga, gb


def _fwd_relu(values, ctx):
    (x,) = values
    return np.maximum(x, 0.0)


def _bwd_relu(grad, out, values, ctx, needs):
    (x,) = values
    return (grad * (x > 0.0),)  # relu'(0) = 0


def _fwd_cos(values, ctx):
    (x,) = values
    return np.cos(x)


def _bwd_cos(grad, out, values, ctx, needs):
    (x,) = values
    return (-grad * np.sin(x),)


def _fwd_abs(values, ctx):
    (x,) = values
    return np.abs(x)


def _bwd_abs(grad, out, values, ctx, needs):
    (x,) = values
    return (grad * np.sign(x),)  # sign(0) = 0


def _fwd_affine(values, ctx):
    (x,) = values
    return ctx["scale"] * x + ctx["shift"]


def _bwd_affine(grad, out, values, ctx, needs):
    return (grad * ctx["scale"],)


def _fwd_sum(values, ctx):
    (x,) = values
    axis = ctx["axis"]
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.shape}")
    return np.asarray(np.sum(x, axis=axis))


def _bwd_sum(grad, out, values, ctx, needs):
    (x,) = values
    axis = ctx["axis"]
    if axis is None:
        return (np.broadcast_to(grad, x.shape),)
    return (np.broadcast_to(np.expand_dims(grad, axis), x.shape),)


def _fwd_mean(values, ctx):
    (x,) = values
    axis = ctx["axis"]
    if x.size == 0:
        raise ShapeError("mean: empty input")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    return np.asarray(np.mean(x, axis=axis))


def _bwd_mean(grad, out, values, ctx, needs):
    (x,) = values
    axis = ctx["axis"]
    if axis is None:
        return (np.broadcast_to(grad / x.size, x.shape),)
    count = x.shape[axis]
    return (np.broadcast_to(np.expand_dims(grad / count, axis), x.shape),)


def _fwd_concat(values, ctx):
    axis = ctx["axis"]
    if not values:
        raise ShapeError("concat: no inputs")
    ndim = values[0].ndim
    for v in values:
        if v.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {[v.shape for v in values]}")
    try:
        return np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None


def _bwd_concat(grad, out, values, ctx, needs):
    axis = ctx["axis"]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes[:-1])
    pieces = np.split(grad, splits, axis=axis)
    return tuple(p if need else None for p, need in zip(pieces, needs))


def _fwd_broadcast(values, ctx):
    (x,) = values
    shape = ctx["shape"]
    try:
        return np.ascontiguousarray(np.broadcast_to(x, shape))
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None


def _bwd_broadcast(grad, out, values, ctx, needs):
    (x,) = values
    lead = grad.ndim - x.ndim
    g = grad.sum(axis=tuple(range(lead))) if lead else grad
    expanded = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
    if expanded:
        g = g.sum(axis=expanded, keepdims=True)
    return (g.reshape(x.shape),)


def _fwd_reshape(values, ctx):
    (x,) = values
    shape = ctx["shape"]
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None


def _bwd_reshape(grad, out, values, ctx, needs):
    (x,) = values
    return (grad.reshape(x.shape),)


PRIMITIVES: Mapping[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "bmm": (_fwd_bmm, _bwd_bmm),
    "relu": (_fwd_relu, _bwd_relu),
    "cos": (_fwd_cos, _bwd_cos),
    "abs": (_fwd_abs, _bwd_abs),
    "affine": (_fwd_affine, _bwd_affine),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "concat": (_fwd_concat, _bwd_concat),
    "broadcast": (_fwd_broadcast, _bwd_broadcast),
    "reshape": (_fwd_reshape, _bwd_reshape),
}

# Ops whose output can become non-finite from finite inputs (overflow or
# inf - inf).  relu/cos/abs map finite values to finite values exactly,
# and concat/broadcast/reshape only move entries, so checking the
# arithmetic set (plus leaf construction) is enough to uphold the
# all-entries-finite invariant.
_OVERFLOW_PRONE = frozenset({"add", "sub", "mul", "matmul", "bmm", "affine", "sum", "mean"})


def apply_primitive(tag: str, inputs: Sequence, **attrs) -> Tensor:
    """Run one forward primitive and record it on the tape.

    Inputs may be Tensors or array-likes (wrapped as constants).  The
    returned node carries enough to compute exact reverse-mode gradients.
    Raises ShapeError on incompatible inputs and NonFiniteError if the
    result is not finite.
    """
    if tag not in PRIMITIVES:
        raise AutodiffError(f"unknown primitive '{tag}'")
    nodes = [x if isinstance(x, Tensor) else constant(x) for x in inputs]
    fwd, _ = PRIMITIVES[tag]
    out_value = fwd([n.value for n in nodes], attrs)
    if tag in _OVERFLOW_PRONE:
        _check_finite(tag, out_value)
    requires = any(n.requires_grad for n in nodes)
    return Tensor(out_value, parents=nodes, primitive=tag, requires_grad=requires, ctx=attrs)


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def bmm(a, b) -> Tensor:
    return apply_primitive("bmm", (a, b))


def add(a, b) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a, b) -> Tensor:
    return apply_primitive("sub", (a, b))


def mul(a, b) -> Tensor:
    return apply_primitive("mul", (a, b))


def relu(x) -> Tensor:
    return apply_primitive("relu", (x,))


def cos(x) -> Tensor:
    return apply_primitive("cos", (x,))


def absolute(x) -> Tensor:
    return apply_primitive("abs", (x,))


def affine(x, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """Elementwise scale-and-shift by Python scalars."""
    return apply_primitive("affine", (x,), scale=float(scale), shift=float(shift))


def reduce_sum(x, axis: int | None = None) -> Tensor:
    return apply_primitive("sum", (x,), axis=axis)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    return apply_primitive("mean", (x,), axis=axis)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(xs), axis=axis)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    return apply_primitive("broadcast", (x,), shape=tuple(shape))


def reshape(x, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", (x,), shape=tuple(shape))


def _toposort(root: Tensor) -> list[Tensor]:
    # Post-order over the sub-graph that requires gradients.  Iterative so
    # long chains cannot hit the recursion limit.
    order: list[Tensor] = []
    seen = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack[-1]
        advanced = False
        while idx < len(node.parents):
            parent = node.parents[idx]
            idx += 1
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack[-1] = (node, idx)
                stack.append((parent, 0))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Accumulates d(root)/d(leaf) into the grad of every trainable leaf the
    root depends on; leaves not on any path keep their existing (zero)
    gradients.
    """
    if root.value.size != 1:
        raise AutodiffError(f"backward: root must be scalar-shaped, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.primitive is None or node.grad is None:
            continue
        _, bwd = PRIMITIVES[node.primitive]
        needs = [p.requires_grad for p in node.parents]
        parent_grads = bwd(node.grad, node.value, [p.value for p in node.parents], node.ctx, needs)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                # Adopt freshly owned arrays; copy views (np.split pieces,
                # broadcast results) and pass-through grads (add/sub hand
                # node.grad itself to same-shaped parents) so later
                # accumulation cannot alias another node's gradient.
                owned = pg.base is None and pg.flags.writeable and pg is not node.grad
                parent.grad = pg if owned else pg.copy()
            else:
                parent.grad += pg


class ParameterSet:
    """Uniquely named trainable tensors plus RMSProp running statistics."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._rms: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter '{name}' already exists")
        node = parameter(value)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def rms_state(self, name: str) -> np.ndarray:
        state = self._rms.get(name)
        if state is None:
            state = np.zeros_like(self._params[name].value)
            self._rms[name] = state
        return state

    def zero_grads(self) -> None:
        for node in self._params.values():
            node.grad[:] = 0.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self._params.items()}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, node in self._params.items():
            incoming = _as_array(values[name])
            if incoming.shape != node.value.shape:
                raise ShapeError(
                    f"parameter '{name}': cannot load shape {incoming.shape} "
                    f"into {node.value.shape}"
                )
            node.value[...] = incoming


def optimizer_step(params: ParameterSet, learning_rate: float, *,
                   decay: float = RMS_DECAY, epsilon: float = RMS_EPSILON) -> None:
    """RMSProp update: s <- decay*s + (1-decay)*g^2, p -= lr*g/(sqrt(s)+eps).

    Gradients are zeroed after the update.  A non-finite gradient aborts
    before any parameter is touched.
    """
    if learning_rate <= 0:
        raise AutodiffError(f"optimizer_step: learning rate must be positive, got {learning_rate}")
    for name, node in params.items():
        if not math.isfinite(float(node.grad.sum())) and not np.isfinite(node.grad).all():
            raise NonFiniteError(f"optimizer_step: non-finite gradient for parameter '{name}'")
    for name, node in params.items():
        g = node.grad
        s = params.rms_state(name)
        s *= decay
        s += (1.0 - decay) * (g * g)
        node.value -= learning_rate * g / (np.sqrt(s) + epsilon)
        g[:] = 0.0
