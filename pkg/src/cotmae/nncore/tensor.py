"""Dense float tensors carrying a reverse-mode gradient tape.

The tape is deliberately closed: only the operations in ``ops`` know how to
differentiate themselves, and each output tensor stores the closure that
pushes its gradient back to its parents.  Parameters are leaf tensors whose
gradient buffer persists and accumulates across backward passes until
explicitly zeroed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional float array plus its position on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple[Tensor, ...] = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse sweep from this node, accumulating into every leaf's grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor outside the tape")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed requires a scalar")
            grad = np.ones_like(self.data)
        order = self._topo_order()
        self.accumulate_grad(as_array(grad, self.dtype))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _topo_order(self) -> list["Tensor"]:
        # Iterative DFS; graphs are deep (one node per op per layer).
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        order.reverse()
        return order

    # Thin operator sugar over the ops module (imported lazily to avoid a cycle).
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(_wrap(other, self.dtype), -1.0))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a tape op")
        return ops.scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __repr__(self) -> str:
        grad = "param" if isinstance(self, Parameter) else ("tape" if self.requires_grad else "const")
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, {grad})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Parameter(Tensor):
    """A trainable leaf: named, always on the tape, zero-initialized grad."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        # Parameters stay trainable even if created under no_grad().
        self.requires_grad = True
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)
