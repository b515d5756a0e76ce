"""Dense 4-D float64 tensors with tape-based reverse-mode autodiff.

Every value in the network is a ``Tensor`` of shape (batch, channels,
height, width).  Per-channel vectors (norm scales, biases) are stored as
(1, C, 1, 1).  Scalars (losses) are (1, 1, 1, 1).  Ops record a backward
closure on the output tensor; ``backward()`` replays them in reverse
topological order with additive gradient accumulation.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "TapeError",
    "tensor",
    "zeros",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "neg",
    "mul",
    "mul_scalar",
    "relu",
    "concat_channels",
    "slice_channels",
    "reshape",
    "sum_all",
    "backward",
    "grad_of",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class TapeError(ValueError):
    """Raised when backward() is invoked on an invalid target."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A 4-D float64 array plus an optional autodiff tape node.

    ``data`` is immutable by convention once the tensor is built; only
    ``grad`` (owned by a single backward pass) and Parameter data (owned
    by the optimizer between passes) are ever written.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (B, C, H, W); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_scalar(self) -> bool:
        return self.data.size == 1

    def item(self) -> float:
        if not self.is_scalar():
            raise TapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Closures hand over freshly allocated arrays, so the first
        # accumulation can take ownership without copying.
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self):
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor; trainable parameters always join the tape.

    ``trainable=False`` marks persistent buffers (e.g. norm running
    stats): checkpointed with the model but never updated by gradients.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def tensor(data) -> Tensor:
    """Wrap array-like data (cast to float64, shape-checked) as a constant."""
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def make_op(data, parents, backward_fn) -> Tensor:
    """Build an op output, recording the tape node only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes; got {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out_data = a.data + b.data

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.copy())
        if b.requires_grad:
            b.accumulate_grad(g.copy())

    return make_op(out_data, (a, b), _bwd)


def neg(a: Tensor) -> Tensor:
    def _bwd(g):
        a.accumulate_grad(-g)

    return make_op(-a.data, (a,), _bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out_data = a.data - b.data

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.copy())
        if b.requires_grad:
            b.accumulate_grad(-g)

    return make_op(out_data, (a, b), _bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out_data = a.data * b.data

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return make_op(out_data, (a, b), _bwd)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bwd(g):
        a.accumulate_grad(g * c)

    return make_op(a.data * c, (a,), _bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def _bwd(g):
        a.accumulate_grad(g * mask)

    return make_op(a.data * mask, (a,), _bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels requires matching batch and spatial dims; got {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca].copy())
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:].copy())

    return make_op(out_data, (a, b), _bwd)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {a.shape}")

    def _bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        a.accumulate_grad(ga)

    return make_op(a.data[:, start:stop].copy(), (a,), _bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"reshape target must be 4-D; got {shape}")
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def _bwd(g):
        a.accumulate_grad(g.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), _bwd)


def sum_all(a: Tensor) -> Tensor:
    """Reduce to a (1, 1, 1, 1) scalar tensor."""
    out_data = np.array(a.data.sum(), dtype=np.float64).reshape(1, 1, 1, 1)

    def _bwd(g):
        a.accumulate_grad(np.full_like(a.data, g.reshape(())))

    return make_op(out_data, (a,), _bwd)


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient buffer, with None (tensor untouched by backward) read as zeros."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _toposort(root: Tensor):
    # Iterative DFS: deep stage stacks would overflow Python recursion.
    order, visited, stack = [], set(), [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and p.requires_grad:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate grads for everything on the tape reachable from ``loss``.

    Accumulation is additive across multiple uses of a tensor; grads from
    a previous pass are overwritten only where this pass reaches.
    """
    if not loss.is_scalar():
        raise TapeError(f"backward needs a scalar loss; got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not on the tape (no differentiable inputs)")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
