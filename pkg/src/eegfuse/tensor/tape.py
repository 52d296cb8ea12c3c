"""Reverse-mode gradient tape.

Operations executed while a tape is active append one record each, in
execution order, which is by construction a valid topological order of
the computation graph. ``backward`` walks the records once in reverse,
pushing gradients from the loss to every participating tensor.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor

# Innermost active tape; ops record onto the top of the stack only.
_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable operations for one backward pass.

    A tape is confined to a single training run. Use as a context
    manager::

        with Tape() as tape:
            loss = ...   # ops executed here are recorded
        tape.backward(loss)
    """

    __slots__ = ("_records",)

    def __init__(self):
        # (output, inputs, rule); rule(grad_out) returns one gradient
        # array (or None) per input, in order.
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self._records.append((out, tuple(inputs), rule))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every tensor reachable from ``loss``.

        Gradients accumulate across repeated calls; tensors not connected
        to the loss keep ``grad = None``.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, rule in reversed(self._records):
            g = flowing.get(id(out))
            if g is None:
                continue
            for tensor, grad in zip(inputs, rule(g)):
                if grad is None:
                    continue
                key = id(tensor)
                if key in flowing:
                    flowing[key] = flowing[key] + grad
                else:
                    flowing[key] = grad
                    holders[key] = tensor
        for key, tensor in holders.items():
            g = flowing[key]
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)
