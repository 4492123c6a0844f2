"""Dense tensors and a define-by-run reverse-mode autodiff tape.

Tensors are plain numpy arrays (row-major, f32 or f64).  A :class:`Tape`
records every differentiable operation applied to its :class:`Variable`
objects; :meth:`Tape.backward` walks the records in reverse to fill in
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Extents of the operands are incompatible."""


class SizeMismatchError(ShapeError):
    """Data length does not match the requested shape."""


class BoundsError(IndexError):
    """A requested range lies outside the tensor."""


class ContractError(RuntimeError):
    """An operation was invoked outside its preconditions."""


def tensor_create(shape: Sequence[int], fill=0.0, dtype=np.float32) -> np.ndarray:
    """Create a tensor of ``shape`` filled with a scalar or with explicit data."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=dtype)
    data = np.asarray(fill, dtype=dtype).ravel()
    if data.size != int(np.prod(shape)):
        raise SizeMismatchError(
            f"data has {data.size} values, shape {shape} needs {int(np.prod(shape))}")
    return data.reshape(shape).copy()


def _check_concat(shapes: Sequence[tuple], axis: int) -> int:
    ndim = len(shapes[0])
    if any(len(s) != ndim for s in shapes):
        raise ShapeError("all inputs must have the same rank")
    axis = axis % ndim
    for s in shapes[1:]:
        for ax in range(ndim):
            if ax != axis and s[ax] != shapes[0][ax]:
                raise ShapeError(f"extent mismatch off the concat axis: {shapes[0]} vs {s}")
    return axis


def tensor_concat(inputs: Sequence[np.ndarray], axis: int = -1) -> np.ndarray:
    if not inputs:
        raise ShapeError("nothing to concatenate")
    _check_concat([np.shape(x) for x in inputs], axis)
    return np.concatenate(inputs, axis=axis)


def _check_ranges(shape: tuple, axis_ranges: Sequence) -> tuple:
    if len(axis_ranges) > len(shape):
        raise BoundsError(f"{len(axis_ranges)} ranges for a rank-{len(shape)} tensor")
    slices = []
    for extent, rng in zip(shape, axis_ranges):
        if rng is None:
            slices.append(slice(0, extent))
            continue
        lo, hi = rng
        if not 0 <= lo < hi <= extent:
            raise BoundsError(f"range [{lo}, {hi}) outside extent {extent}")
        slices.append(slice(lo, hi))
    return tuple(slices)


def tensor_crop(x: np.ndarray, axis_ranges: Sequence) -> np.ndarray:
    """Copy out the sub-tensor selected by per-axis half-open ``(lo, hi)`` ranges.

    ``None`` keeps an axis whole; trailing axes without a range are kept whole.
    """
    return x[_check_ranges(x.shape, axis_ranges)].copy()


# ---------------------------------------------------------------------------
# Autodiff
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Variable:
    value: np.ndarray
    tape: "Tape"
    node_id: int
    requires_grad: bool = False
    name: str | None = None
    grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self) -> str:
        return f"Variable(shape={self.shape}, node={self.node_id}, name={self.name!r})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: Callable | None  # grad_out -> tuple of input grads (None entries allowed)


@dataclass
class Tape:
    """Ordered record of operations.  Build a fresh tape per forward pass."""

    nodes: list[_Node] = field(default_factory=list)
    variables: list[Variable] = field(default_factory=list)

    def variable(self, value, requires_grad: bool = True, name: str | None = None) -> Variable:
        value = np.asarray(value)
        var = Variable(value, self, len(self.nodes), requires_grad, name)
        self.nodes.append(_Node("leaf", (), None))
        self.variables.append(var)
        return var

    def constant(self, value) -> Variable:
        return self.variable(value, requires_grad=False)

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Variable],
               backward: Callable) -> Variable:
        for v in inputs:
            if v.tape is not self:
                raise ContractError(f"{op}: operand recorded on a different tape")
        requires = any(v.requires_grad for v in inputs)
        var = Variable(value, self, len(self.nodes), requires)
        self.nodes.append(_Node(op, tuple(v.node_id for v in inputs), backward if requires else None))
        self.variables.append(var)
        return var

    def backward(self, root: Variable) -> None:
        """Populate ``grad`` on every variable of the tape.

        Gradients are recomputed from scratch on each call, so calling this
        twice yields identical results.  Variables the root does not depend on
        receive zero gradients.
        """
        if root.tape is not self:
            raise ContractError("root was recorded on a different tape")
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.node_id] = np.ones_like(root.value)
        for idx in range(root.node_id, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for src, ig in zip(node.inputs, in_grads):
                if ig is None or not self.variables[src].requires_grad:
                    continue
                # multiple consumers: sum contributions
                grads[src] = ig if grads[src] is None else grads[src] + ig
        for var, g in zip(self.variables, grads):
            var.grad = np.zeros_like(var.value) if g is None else g.reshape(var.value.shape)


def backward(tape: Tape, root: Variable) -> dict[str, np.ndarray]:
    """Run reverse mode and return gradients of all named leaves."""
    tape.backward(root)
    return {v.name: v.grad for v in tape.variables if v.name is not None}


def _lift(*args) -> tuple[Tape | None, list[Variable]]:
    tape = next((a.tape for a in args if isinstance(a, Variable)), None)
    if tape is None:
        return None, list(args)
    return tape, [a if isinstance(a, Variable) else tape.constant(a) for a in args]


def apply_op(op: str, forward: Callable, backward_fn: Callable, *args):
    """Evaluate ``forward`` on raw arrays and, when any argument is a Variable,
    record the result on its tape.

    ``backward_fn(grad_out, ctx)`` returns one gradient per argument; ``ctx`` is
    whatever ``forward`` returned as its second element.  With only plain arrays
    as arguments the result is a plain array and nothing is recorded.
    """
    tape, vars_ = _lift(*args)
    raw = [v.value if isinstance(v, Variable) else np.asarray(v) for v in vars_]
    out, ctx = forward(*raw)
    if tape is None:
        return out
    return tape.record(op, out, vars_, lambda g: backward_fn(g, ctx))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Variable) else np.asarray(x)


# -- elementwise and reduction ops ------------------------------------------

def _same_shape(op, a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shapes differ {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _same_shape("add", value_of(a), value_of(b))
    return apply_op("add", lambda x, y: (x + y, None), lambda g, _: (g, g), a, b)


def sub(a, b):
    _same_shape("sub", value_of(a), value_of(b))
    return apply_op("sub", lambda x, y: (x - y, None), lambda g, _: (g, -g), a, b)


def mul(a, b):
    _same_shape("mul", value_of(a), value_of(b))
    return apply_op("mul", lambda x, y: (x * y, (x, y)),
                    lambda g, c: (g * c[1], g * c[0]), a, b)


def scale(a, factor: float):
    return apply_op("scale", lambda x: (x * factor, None), lambda g, _: (g * factor,), a)


def relu(a):
    def fwd(x):
        pos = x > 0
        return np.where(pos, x, np.zeros((), x.dtype)), pos
    return apply_op("relu", fwd, lambda g, pos: (np.where(pos, g, np.zeros((), g.dtype)),), a)


def total(a):
    """Sum of all elements as a 0-d tensor."""
    return apply_op("sum", lambda x: (np.sum(x), x.shape),
                    lambda g, shp: (np.broadcast_to(g, shp).copy(),), a)


def mean(a):
    def fwd(x):
        return np.mean(x), (x.shape, x.size)

    def bwd(g, c):
        shp, n = c
        return (np.broadcast_to(g / n, shp).astype(g.dtype),)
    return apply_op("mean", fwd, bwd, a)


def reshape(a, shape):
    return apply_op("reshape", lambda x: (x.reshape(shape), x.shape),
                    lambda g, shp: (g.reshape(shp),), a)


def concat(inputs: Sequence, axis: int = -1):
    """Differentiable concatenation; values laid out in argument order."""
    if not inputs:
        raise ShapeError("nothing to concatenate")
    ax = _check_concat([value_of(x).shape for x in inputs], axis)

    def fwd(*xs):
        sizes = [x.shape[ax] for x in xs]
        return np.concatenate(xs, axis=ax), np.cumsum(sizes)[:-1]

    def bwd(g, cuts):
        return tuple(np.split(g, cuts, axis=ax))
    return apply_op("concat", fwd, bwd, *inputs)


def crop(a, axis_ranges: Sequence):
    def fwd(x):
        sl = _check_ranges(x.shape, axis_ranges)
        return x[sl].copy(), (x.shape, x.dtype, sl)

    def bwd(g, c):
        shp, dt, sl = c
        out = np.zeros(shp, dtype=g.dtype)
        out[sl] = g
        return (out,)
    return apply_op("crop", fwd, bwd, a)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, element by element."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x))
        flat[i] = orig - step
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad
