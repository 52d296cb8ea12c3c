"""Dense arrays, differentiable ops, and the reverse-mode gradient tape."""

from .gradcheck import finite_diff_check
from .tape import Tape, active_tape, backward
from .tensor import Tensor, parameter

__all__ = [
    "Tensor",
    "parameter",
    "Tape",
    "active_tape",
    "backward",
    "finite_diff_check",
]
