"""Dense tensors and the tape that records one forward pass for reverse-mode differentiation.

Operations record onto the active :class:`Tape` only. Outside ``with Tape():`` nothing is
recorded, so evaluation passes carry no graph. Leaves (tensors not produced on a tape)
own ``grad`` buffers; intermediate gradients exist only while ``backward`` runs.
"""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DimensionError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """Raised when a scalar argument is outside its valid range."""


class ContractError(RuntimeError):
    """Raised when a caller breaks a protocol, such as reusing a consumed tape."""


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(
        self,
        data: object,
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, tape: Tape) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = True
        out.grad = None
        out.name = None
        out._tape = tape
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeNode:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("crowd_mlp_active_tape", default=None)


class Tape:
    """Ordered record of the primitives executed during one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[TapeNode] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> Tape:
        if self._consumed:
            raise ContractError("This tape was already consumed by backward().")
        if self._token is not None:
            raise ContractError("This tape is already active.")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def nodes(self) -> tuple[TapeNode, ...]:
        return tuple(self._nodes)

    def record(self, op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
        if self._consumed:
            raise ContractError("Cannot record onto a consumed tape.")
        out = Tensor._from_op(data, self)
        self._nodes.append(TapeNode(op=op, output=out, inputs=tuple(inputs), vjp=vjp))
        return out


def current_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap an op result, recording it when a tape is active and an input needs gradients."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape.record(op, data, inputs, vjp)
    return Tensor(data)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add onto existing buffers, so callers zero them between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("The loss was not produced on this tape.")
    if tape.consumed:
        raise ContractError("This tape was already consumed by backward().")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        input_grads = node.vjp(upstream)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad

    tape._consumed = True
    tape._nodes.clear()
