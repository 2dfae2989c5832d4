"""Tensor values and the gradient tape that records operations on them."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# Set PPMCOUNT_DEBUG=1 to assert finiteness after every recorded op.
DEBUG = os.environ.get("PPMCOUNT_DEBUG", "") not in ("", "0")

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A dense float64 array that can take part in reverse-mode differentiation.

    Network activations are rank 4 (batch, channels, height, width); biases are
    rank 1 and losses are rank 0. Values must be finite.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path for op outputs: no copy, no finiteness scan
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add

        return add(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        from .ops import scale

        return scale(self, factor)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Record:
    name: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded when
    at least one input requires a gradient. Outside any tape, ops run in plain
    inference mode and record nothing.
    """

    records: list = field(default_factory=list)
    visit_order: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, name: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        output.requires_grad = True
        output._tape = self
        self.records.append(Record(name, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        self.visit_order = []
        for index in range(len(self.records) - 1, -1, -1):
            rec = self.records[index]
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            self.visit_order.append(index)
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(name: str, inputs: tuple, output: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap an op result and log it on the active tape if any input needs grad."""
    if DEBUG and not np.all(np.isfinite(output)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor._wrap(output)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, inputs, out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient and feeds ``loss``."""
    if loss._tape is None:
        raise ValueError("loss is not attached to a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)
