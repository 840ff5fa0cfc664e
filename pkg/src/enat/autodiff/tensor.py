"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation that produces an output requiring a gradient
appends one record to the active :class:`Tape`.  :func:`backward` replays the
records in reverse order, so each adjoint is visited exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf values."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.writeable or arr is data:
            arr = arr.copy()
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str | None = None) -> "Tensor":
        if not self.is_finite():
            raise NonFiniteError(f"non-finite values in {what or self.name or 'tensor'}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, adjoint: Callable[[np.ndarray], None]) -> None:
        self.records.append((out, adjoint))

    def clear(self) -> None:
        self.records.clear()


_state = {"tape": Tape(), "enabled": True}


def get_tape() -> Tape:
    return _state["tape"]


def grad_enabled() -> bool:
    return _state["enabled"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["enabled"]
    _state["enabled"] = False
    try:
        yield
    finally:
        _state["enabled"] = prev


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    prev = _state["tape"]
    _state["tape"] = tape
    try:
        yield tape
    finally:
        _state["tape"] = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # never in place: adjoints may hand the same array to several inputs
    t.grad = g if t.grad is None else t.grad + g


def make_output(data: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    """Wrap an op result and record its adjoint when any input needs one.

    ``adjoint`` receives the output gradient and returns one gradient (or None)
    per input, in order.
    """
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    if needs:
        def replay(g, inputs=inputs, adjoint=adjoint):
            grads = adjoint(g)
            for t, gi in zip(inputs, grads):
                if gi is not None and t.requires_grad:
                    accumulate(t, gi)
        get_tape().record(out, replay)
    return out


def backward(loss: Tensor, tape: Tape | None = None, clear: bool = True) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays.  The tape is cleared
    afterwards unless ``clear`` is False.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else get_tape()
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    accumulate(loss, np.ones_like(loss.data))
    for out, replay in reversed(tape.records):
        if out.grad is not None:
            replay(out.grad)
    if clear:
        tape.clear()
