"""Dense f64 tensors and the operation tape for reverse-mode differentiation."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes handed to a primitive do not line up."""


class ContractError(RuntimeError):
    """A stated precondition of an operation was violated."""


class EmptyGroupError(ContractError):
    """A segment reduction met a group with no members."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    Values must be finite: NaN/Inf are rejected at construction, so every
    consumer can rely on finite inputs (softmax row sums, cosine norms, ...).
    The buffer is treated as read-only by all operations; only the optimizer
    writes parameter data in place, between forward passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite, got NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @staticmethod
    def scalar(value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.float64(value), requires_grad)


class _Record:
    """One taped primitive: its output, inputs, and a vjp closure."""

    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out, inputs, vjp, name):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered record of primitives for one differentiable pass.

    Records are appended in forward order, which is topological by
    construction, and the backward pass visits each exactly once in reverse.
    A tape is confined to one execution context; use one tape per worker.
    Calling backward() does not consume the records, so the same tape object
    may be cleared and reused for fresh forward passes.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must unnest in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every tracked tensor.

        Gradients sum over all use sites of a tensor. Repeated calls keep
        accumulating into .grad (clear with zero_grad between steps).
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            grads = rec.vjp(g)  # also deposits into rec.out.grad
            for inp, gin in zip(rec.inputs, grads):
                if gin is None:
                    continue
                key = id(inp)
                holders[key] = inp
                pending[key] = pending[key] + gin if key in pending else gin
        # Whatever is left was never produced on this tape: leaf tensors.
        for key, g in pending.items():
            t = holders[key]
            if t.requires_grad:
                _deposit(t, g)

    def _append(self, rec: _Record) -> None:
        self._records.append(rec)


def _deposit(t: Tensor, g: np.ndarray) -> None:
    # rebinding (never in-place) keeps shared gradient buffers safe
    t.grad = g if t.grad is None else t.grad + g


def record(
    out: Tensor,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    name: str,
) -> Tensor:
    """Register a primitive on the innermost active tape, if any input is tracked."""
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        wrapped = _GradTap(out, vjp)
        _ACTIVE_TAPES[-1]._append(_Record(out, tuple(inputs), wrapped, name))
    return out


class _GradTap:
    """Runs a vjp and deposits the output's own gradient when it is tracked."""

    __slots__ = ("out", "vjp")

    def __init__(self, out, vjp):
        self.out = out
        self.vjp = vjp

    def __call__(self, g):
        _deposit(self.out, g)
        return self.vjp(g)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
