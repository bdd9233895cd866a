"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is define-by-run: every primitive computes its value eagerly and,
when any input tracks gradients, attaches an adjoint closure to the output.
A :class:`Tape` is the creation-ordered list of nodes reachable from a loss;
``backward`` replays it once in reverse and then clears it, so each forward
graph supports exactly one backward pass. Creation order is execution order,
which for a define-by-run program is already a topological order, and replay
is strictly sequential -- re-running the same computation therefore produces
bit-identical values and gradients.

Conventions:

- everything is float64; there is no dtype parameter anywhere,
- reductions and matmul delegate to numpy, whose accumulation order is fixed
  for a given shape,
- broadcasting is restricted to scalars and one row vector over a 2-D batch.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "concat",
    "cos",
    "exp",
    "finite_diff_check",
    "matmul",
    "no_grad",
    "relu",
    "sin",
    "sincos",
    "sqrt",
    "tanh",
    "transpose",
    "zero_grad",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values lie outside an operation's domain."""


_mode = threading.local()  # recording is per-thread: tapes never interfere


def _recording() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Suspend adjoint recording inside the block (pure evaluation)."""
    saved = _recording()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = saved


class Tensor:
    """Dense float64 array, optionally carrying a gradient buffer.

    ``grad`` exists iff ``requires_grad`` and always matches ``data`` in
    shape. Intermediate results inherit ``requires_grad`` from their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    _counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(Tensor._counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no gradient history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, "sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, "mean")

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """The ops reachable from a root tensor, in creation (topological) order.

    A tape supports exactly one reverse replay; replay severs the recorded
    parent links and adjoint rules, clearing the tape.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen = {id(root)}
        stack = [root]
        nodes = []
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    def backprop(self, root: Tensor) -> None:
        root.grad += np.ones_like(root.data)
        for node in reversed(self.nodes):
            rule = node._backward
            if rule is not None:
                rule(node.grad)
                node._backward = None
                node._parents = ()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` of every reachable tensor.

    ``loss`` must be scalar. Gradients add into existing buffers; callers
    zero them between independent passes. Tensors that require grad but are
    unreachable keep their (zero-initialized) buffers untouched.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.trace(loss).backprop(loss)


def zero_grad(params) -> None:
    """Zero the grad buffers of a tensor, an iterable, or a dict of tensors."""
    if isinstance(params, Tensor):
        params = (params,)
    elif isinstance(params, dict):
        params = params.values()
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# primitives


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _recording():
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            return Tensor(data, requires_grad=True, _parents=tracked, _backward=grad_fn)
    return Tensor(data)


def _scalar_like(shape: tuple[int, ...]) -> bool:
    return shape == () or shape == (1,)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or _scalar_like(sa) or _scalar_like(sb):
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` -- the inverse of the allowed broadcasts."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    if shape == (1,):
        return g.sum().reshape(1)
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "add")

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _reduce_to(g, a.data.shape)
        if b.requires_grad:
            b.grad += _reduce_to(g, b.data.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "sub")

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _reduce_to(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _reduce_to(g, b.data.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "mul")

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _reduce_to(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _reduce_to(g * a.data, b.data.shape)

    return _result(a.data * b.data, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: inputs must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: input must be 2-D, got {a.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a.grad += g.T

    return _result(a.data.T, (a,), grad_fn)


def _reduce(a: Tensor, axis: int | None, op: str) -> Tensor:
    if axis is None:
        out = a.data.sum() if op == "sum" else a.data.mean()
        scale = 1.0 if op == "sum" else 1.0 / a.data.size

        def grad_fn(g):
            if a.requires_grad:
                a.grad += g * scale

        return _result(out, (a,), grad_fn)

    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"{op}: axis reductions support 2-D tensors with axis 0 or 1")
    extent = a.shape[axis]
    out = a.data.sum(axis=axis) if op == "sum" else a.data.mean(axis=axis)
    scale = 1.0 if op == "sum" else 1.0 / extent

    def grad_fn(g):
        if a.requires_grad:
            expanded = g[None, :] if axis == 0 else g[:, None]
            a.grad += expanded * scale

    return _result(out, (a,), grad_fn)


def sin(a) -> Tensor:
    a = _coerce(a)

    def grad_fn(g):
        if a.requires_grad:
            a.grad += np.cos(a.data) * g

    return _result(np.sin(a.data), (a,), grad_fn)


def cos(a) -> Tensor:
    a = _coerce(a)

    def grad_fn(g):
        if a.requires_grad:
            a.grad -= np.sin(a.data) * g

    return _result(np.cos(a.data), (a,), grad_fn)


def sincos(a) -> tuple[Tensor, Tensor]:
    """sin and cos of one input, each serving as the other's derivative.

    Saves the backward-pass trig recomputation when both are needed, as in
    real/imaginary pairs of a complex exponential.
    """
    a = _coerce(a)
    s = np.sin(a.data)
    c = np.cos(a.data)

    def grad_sin(g):
        if a.requires_grad:
            a.grad += c * g

    def grad_cos(g):
        if a.requires_grad:
            a.grad -= s * g

    return _result(s, (a,), grad_sin), _result(c, (a,), grad_cos)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def grad_fn(g):
        if a.requires_grad:
            a.grad += out_data * g

    return _result(out_data, (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def grad_fn(g):
        if a.requires_grad:
            a.grad += (1.0 - out_data * out_data) * g

    return _result(out_data, (a,), grad_fn)


def relu(a) -> Tensor:
    a = _coerce(a)

    def grad_fn(g):
        if a.requires_grad:
            a.grad += (a.data > 0.0) * g

    return _result(np.maximum(a.data, 0.0), (a,), grad_fn)


def sqrt(a) -> Tensor:
    """Elementwise square root. Gradients require strictly positive input."""
    a = _coerce(a)
    if (a.data < 0.0).any():
        raise DomainError("sqrt: negative input")
    out_data = np.sqrt(a.data)

    def grad_fn(g):
        if a.requires_grad:
            a.grad += 0.5 / out_data * g

    return _result(out_data, (a,), grad_fn)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate 2-D tensors along the last axis."""
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    if axis not in (-1, 1) or any(t.data.ndim != 2 for t in ts):
        raise ShapeError("concat: 2-D tensors joined on the last axis only")
    rows = ts[0].shape[0]
    if any(t.shape[0] != rows for t in ts):
        raise ShapeError(f"concat: row counts differ: {[t.shape for t in ts]}")
    widths = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def grad_fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.grad += g[:, lo:hi]

    return _result(np.concatenate([t.data for t in ts], axis=1), tuple(ts), grad_fn)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. The
    relative error per coordinate is |analytic - numeric| normalized by
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < step <= 1e-3:
        raise DomainError(f"finite_diff_check: step {step} outside (0, 1e-3]")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad.copy()

    numeric = np.zeros_like(base)
    flat = numeric.ravel()
    with no_grad():
        for i in range(base.size):
            bumped = base.copy()
            bumped.flat[i] = base.flat[i] + step
            plus = f(Tensor(bumped)).item()
            bumped.flat[i] = base.flat[i] - step
            minus = f(Tensor(bumped)).item()
            flat[i] = (plus - minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
