"""Dense tensors with a recording tape for reverse-mode differentiation.

Tensors wrap float64 numpy arrays of at most 4 axes (batch, channel, height,
width). Gradients flow only while a Graph is active: operations append their
adjoint closures to the tape in execution order, and backward() replays the
tape in exact reverse order. One Graph supports one backward pass.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

import numpy as np

from ..errors import DimensionError, UsageError

DTYPE = np.float64


class Tensor:
    """A ≤4-D float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 4:
            raise DimensionError(f"tensors support at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; the functional ops in numcore.ops are the API.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    """One recorded primitive: adjoint closure plus its operand tensors."""

    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.output = output
        self.backward_fn = backward_fn


_active = threading.local()


class Graph:
    """Recording tape. Use as a context manager around forward + loss."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active.stack.pop()
        return False

    @staticmethod
    def current() -> Optional["Graph"]:
        stack = getattr(_active, "stack", None)
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append(_Node(output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad of every tensor the loss depends on.

        Errors if the loss is not scalar, was not recorded on this graph, or
        if backward already ran (re-running would double-count gradients).
        """
        if self._consumed:
            raise UsageError(
                "backward() already ran on this graph; record a fresh graph before "
                "calling backward again"
            )
        if loss.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}")
        if not any(node.output is loss for node in self._nodes):
            raise UsageError("loss tensor was not produced while this graph was recording")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.output.grad is not None:
                node.backward_fn(node.output.grad)


def backward(loss: Tensor) -> None:
    """Run backward on the currently active graph."""
    g = Graph.current()
    if g is None:
        raise UsageError("backward() called with no active graph")
    g.backward(loss)
