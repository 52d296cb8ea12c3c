"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import mul, reduce_sum
from .tape import Tape
from .tensor import Tensor


def finite_diff_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``op`` against central differences.

    ``op`` takes the tensors in ``inputs`` and returns a tensor of any
    shape; a fixed random projection turns the output into a scalar so
    array-valued ops can be checked. The op must be deterministic across
    calls (freeze any rng inside the closure). Inputs should be 64-bit.

    Returns the maximum over all input elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    probe = op(*inputs)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(probe.data.shape)

    def objective() -> float:
        return float((op(*inputs).data * r).sum())

    with Tape() as tape:
        out = op(*inputs)
        loss = reduce_sum(mul(out, Tensor(r.astype(out.dtype))))
    tape.backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = objective()
            flat[i] = orig - eps
            lo = objective()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
