"""Dense float32 tensors with reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` that maps the output gradient
to one gradient per tensor input. ``Function.apply`` records the graph edge
when any input requires a gradient.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def working_dtype():
    """Floating type new tensors and op results use on this thread."""
    return getattr(_state, "dtype", DTYPE)


@contextmanager
def precision(dtype):
    """Run ops at ``dtype`` (float32 or float64) inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InvalidArgument(f"unsupported precision {dtype}")
    prev = working_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class InvalidArgument(ValueError):
    """Raised when an operation receives inconsistent shapes or settings."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=working_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: tuple | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgument(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the ops module does the real work
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.mul(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def backward(self, parameters: Iterable["Tensor"] | None = None) -> None:
        backward(self, parameters)


class Parameter(Tensor):
    """A trainable tensor with a registry name and optimizer state."""

    __slots__ = ("name", "momentum", "moment1", "moment2", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum: np.ndarray | None = None
        self.moment1: np.ndarray | None = None
        self.moment2: np.ndarray | None = None
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Context:
    """Scratch space a Function uses to pass values from forward to backward."""

    def __init__(self):
        self.saved: tuple = ()
        self.needs: tuple[bool, ...] = ()

    def save(self, *values) -> None:
        self.saved = values


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` with one entry (array or None) per tensor
    input. Non-tensor keyword arguments are configuration.
    """

    @staticmethod
    def forward(ctx: Context, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(t) for t in inputs]
        ctx = Context()
        ctx.needs = tuple(t.requires_grad for t in tensors)
        out = cls.forward(ctx, *[t.data for t in tensors], **kwargs)
        track = grad_enabled() and any(ctx.needs)
        result = Tensor(out, requires_grad=track)
        if track:
            result._ctx = (cls, ctx, tuple(tensors))
        return result


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx[2]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves in ``parameters`` that the loss does not depend on receive a zero
    gradient instead of staying ``None``.
    """
    if loss.data.size != 1:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.requires_grad:
                node.grad = g.astype(working_dtype()) if node.grad is None else node.grad + g
            continue
        fn, ctx, parents = node._ctx
        parent_grads = fn.backward(ctx, g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{fn.__name__}.backward returned gradient of shape {pg.shape} "
                    f"for input of shape {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=working_dtype()))
