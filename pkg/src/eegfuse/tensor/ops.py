"""Differentiable operations on :class:`Tensor`.

All functions compute eagerly with numpy and, when a tape is active and
some input requires a gradient, record a backward rule. Element type
(float32 or float64) is preserved end to end; constants inside the rules
are python floats so numpy does not upcast 32-bit data.

Convolution orientation is cross-correlation (kernels are applied
without flipping), stride 1, no padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError, ParameterError
from .tape import active_tape
from .tensor import Tensor


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def rule(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), rule)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * s)

    def rule(g):
        return (g * s if x.requires_grad else None,)

    return _record(out, (x,), rule)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if not x.requires_grad:
            return (None,)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record(out, (x,), rule)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    alpha = float(alpha)
    pos = x.data > 0
    y = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0.0)))
    y = y.astype(x.dtype, copy=False)
    out = Tensor(y)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        # d/dx alpha*(e^x - 1) = y + alpha on the negative branch
        return (np.where(pos, g, g * (y + alpha)),)

    return _record(out, (x,), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def rule(g):
        return (g.reshape(x.data.shape) if x.requires_grad else None,)

    return _record(out, (x,), rule)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def rule(g):
        if not x.requires_grad:
            return (None,)
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``y[..., j] = sum_i x[..., i] w[i, j] + b[j]``."""
    if w.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: input width {x.data.shape[-1]} does not match "
            f"weight shape {w.data.shape}"
        )
    d_in, d_out = w.data.shape
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (d_out,):
            raise DimensionError(
                f"linear: bias shape {b.data.shape} does not match output width {d_out}"
            )
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def rule(g):
        g2 = g.reshape(-1, d_out)
        grads = [None, None]
        if x.requires_grad:
            grads[0] = (g2 @ w.data.T).reshape(x.data.shape)
        if w.requires_grad:
            x2 = x.data.reshape(-1, d_in)
            grads[1] = x2.T @ g2
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    return _record(out, inputs, rule)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; leading (batch) dimensions must match exactly."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"bmm: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def rule(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(a.data.swapaxes(-1, -2), g) if b.requires_grad else None
        return (ga, gb)

    return _record(out, (a, b), rule)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _check_4d(name: str, arr: np.ndarray, role: str) -> None:
    if arr.ndim != 4:
        raise DimensionError(f"{name}: {role} must be 4-d, got shape {arr.shape}")


def conv_temporal(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Per-channel temporal convolution.

    ``x``: [B, 1, C, T]; ``kernels``: [K, 1, 1, m]; ``bias``: [K].
    Returns [B, K, C, T - m + 1]; the same K kernels slide along time on
    every channel independently.
    """
    _check_4d("conv_temporal", x.data, "input")
    _check_4d("conv_temporal", kernels.data, "kernels")
    B, one, C, T = x.data.shape
    K, k1, k2, m = kernels.data.shape
    if one != 1 or k1 != 1 or k2 != 1:
        raise DimensionError(
            f"conv_temporal: expected input [B,1,C,T] and kernels [K,1,1,m], "
            f"got input channel axis {one} and kernel axes ({k1},{k2})"
        )
    if m > T:
        raise DimensionError(f"conv_temporal: kernel length m={m} exceeds time axis T={T}")
    if bias.data.shape != (K,):
        raise DimensionError(f"conv_temporal: bias shape {bias.data.shape} != ({K},)")
    Tp = T - m + 1
    w2 = kernels.data.reshape(K, m)
    # im2col along time only: one [B*C*Tp, m] matrix against [m, K]
    cols = sliding_window_view(x.data[:, 0], m, axis=-1).reshape(B * C * Tp, m)
    y = cols @ w2.T
    y += bias.data
    out = Tensor(np.ascontiguousarray(y.reshape(B, C, Tp, K).transpose(0, 3, 1, 2)))

    def rule(g):
        gx = gw = gb = None
        gk = None
        if kernels.requires_grad or x.requires_grad:
            gk = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * C * Tp, K)
        if kernels.requires_grad:
            gw = (gk.T @ cols).reshape(K, 1, 1, m)
        if x.requires_grad:
            contrib = (gk @ w2).reshape(B, C, Tp, m)
            gxc = np.zeros((B, C, T), dtype=g.dtype)
            for tau in range(m):
                gxc[:, :, tau : tau + Tp] += contrib[:, :, :, tau]
            gx = gxc[:, None]
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _record(out, (x, kernels, bias), rule)


def conv_spatial(h: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Full-width weighted sum over channels and incoming feature maps.

    ``h``: [B, K, C, T']; ``kernels``: [K', K, C, 1]; ``bias``: [K'].
    Returns [B, K', 1, T'].
    """
    _check_4d("conv_spatial", h.data, "input")
    _check_4d("conv_spatial", kernels.data, "kernels")
    B, K, C, Tp = h.data.shape
    Kp, Kin, Cin, one = kernels.data.shape
    if one != 1:
        raise DimensionError(f"conv_spatial: kernel time axis must be 1, got {one}")
    if Kin != K or Cin != C:
        raise DimensionError(
            f"conv_spatial: kernels expect (maps={Kin}, channels={Cin}), "
            f"input has (maps={K}, channels={C})"
        )
    if bias.data.shape != (Kp,):
        raise DimensionError(f"conv_spatial: bias shape {bias.data.shape} != ({Kp},)")
    w2 = kernels.data.reshape(Kp, K * C)
    hT = np.ascontiguousarray(h.data.transpose(0, 3, 1, 2)).reshape(B * Tp, K * C)
    y = hT @ w2.T
    y += bias.data
    out = Tensor(np.ascontiguousarray(y.reshape(B, Tp, Kp).transpose(0, 2, 1))[:, :, None, :])

    def rule(g):
        gh = gw = gb = None
        g2 = np.ascontiguousarray(g[:, :, 0].transpose(0, 2, 1)).reshape(B * Tp, Kp)
        if h.requires_grad:
            gh = np.ascontiguousarray(
                (g2 @ w2).reshape(B, Tp, K, C).transpose(0, 2, 3, 1)
            )
        if kernels.requires_grad:
            gw = (g2.T @ hT).reshape(Kp, K, C, 1)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gh, gw, gb)

    return _record(out, (h, kernels, bias), rule)


def conv_spatiotemporal(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Single fused convolution spanning all channels and a time window.

    ``x``: [B, 1, C, T]; ``kernels``: [K, 1, C, m]; ``bias``: [K].
    Returns [B, K, 1, T - m + 1].
    """
    _check_4d("conv_spatiotemporal", x.data, "input")
    _check_4d("conv_spatiotemporal", kernels.data, "kernels")
    B, one, C, T = x.data.shape
    K, k1, Cin, m = kernels.data.shape
    if one != 1 or k1 != 1:
        raise DimensionError(
            f"conv_spatiotemporal: expected input [B,1,C,T] and kernels [K,1,C,m], "
            f"got input channel axis {one} and kernel axis {k1}"
        )
    if Cin != C:
        raise DimensionError(
            f"conv_spatiotemporal: kernels span {Cin} channels, input has {C}"
        )
    if m > T:
        raise DimensionError(
            f"conv_spatiotemporal: kernel length m={m} exceeds time axis T={T}"
        )
    if bias.data.shape != (K,):
        raise DimensionError(f"conv_spatiotemporal: bias shape {bias.data.shape} != ({K},)")
    Tp = T - m + 1
    w2 = kernels.data.reshape(K, C * m)
    # windows laid out [B, Tp, C, m] so the matmul contracts channels and lags at once
    cols = np.ascontiguousarray(
        sliding_window_view(x.data[:, 0], m, axis=-1).transpose(0, 2, 1, 3)
    ).reshape(B * Tp, C * m)
    y = cols @ w2.T
    y += bias.data
    out = Tensor(np.ascontiguousarray(y.reshape(B, Tp, K).transpose(0, 2, 1))[:, :, None, :])

    def rule(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g[:, :, 0].transpose(0, 2, 1)).reshape(B * Tp, K)
        if kernels.requires_grad:
            gw = (g2.T @ cols).reshape(K, 1, C, m)
        if x.requires_grad:
            contrib = (g2 @ w2).reshape(B, Tp, C, m)
            gxc = np.zeros((B, C, T), dtype=g.dtype)
            for tau in range(m):
                gxc[:, :, tau : tau + Tp] += contrib[:, :, :, tau].transpose(0, 2, 1)
            gx = gxc[:, None]
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _record(out, (x, kernels, bias), rule)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def avg_pool_time(x: Tensor, pool: int, stride: int | None = None) -> Tensor:
    """Mean over sliding windows along the last axis."""
    if stride is None:
        stride = pool
    pool = int(pool)
    stride = int(stride)
    if pool < 1 or stride < 1:
        raise ParameterError(f"avg_pool_time: pool={pool}, stride={stride} must be >= 1")
    T = x.data.shape[-1]
    if pool > T:
        raise DimensionError(f"avg_pool_time: pool={pool} exceeds time axis length {T}")
    windows = sliding_window_view(x.data, pool, axis=-1)[..., ::stride, :]
    out = Tensor(np.ascontiguousarray(windows.mean(axis=-1)))
    L = out.data.shape[-1]

    def rule(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gs = g * (1.0 / float(pool))
        for j in range(pool):
            gx[..., j : j + stride * (L - 1) + 1 : stride] += gs
        return (gx,)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# normalization and regularization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per channel (axis 1) over all other axes.

    In training mode the batch statistics are used and the running
    buffers are updated in place; in eval mode the running buffers are
    used and nothing is mutated.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm: input must have a channel axis, got {x.shape}")
    K = x.data.shape[1]
    if gamma.data.shape != (K,) or beta.data.shape != (K,):
        raise DimensionError(
            f"batch_norm: gamma/beta must have shape ({K},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, K) + (1,) * (x.ndim - 2)
    momentum = float(momentum)
    eps = float(eps)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // K
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        # running variance uses the unbiased estimate
        running_var *= 1.0 - momentum
        running_var += momentum * var * (float(n) / float(max(n - 1, 1)))
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))

    def rule(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            gscaled = g * gamma.data.reshape(bshape)
            if training:
                mean_g = gscaled.mean(axis=axes).reshape(bshape)
                mean_gx = (gscaled * xhat).mean(axis=axes).reshape(bshape)
                gx = inv_std.reshape(bshape) * (gscaled - mean_g - xhat * mean_gx)
            else:
                gx = gscaled * inv_std.reshape(bshape)
        return (gx, gg, gb)

    return _record(out, (x, gamma, beta), rule)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout: p={p} must lie in [0, 1)")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype)
    keep *= 1.0 / (1.0 - p)
    out = Tensor(x.data * keep)

    def rule(g):
        return (g * keep if x.requires_grad else None,)

    return _record(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learned gain and shift."""
    D = x.data.shape[-1]
    if gamma.data.shape != (D,) or beta.data.shape != (D,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({D},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    eps = float(eps)
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def rule(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, D).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, D).sum(axis=0)
        if x.requires_grad:
            gs = g * gamma.data
            mean_g = gs.mean(axis=-1, keepdims=True)
            mean_gx = (gs * xhat).mean(axis=-1, keepdims=True)
            gx = inv_std * (gs - mean_g - xhat * mean_gx)
        return (gx, gg, gb)

    return _record(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

ATTENTION_PARAM_KEYS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gamma", "ln_beta",
)


def multi_head_attention(x: Tensor, heads: int, params: dict[str, Tensor]) -> Tensor:
    """Scaled dot-product self-attention over the second axis of [B, N, D].

    Learned Q/K/V/output projections, ``heads`` parallel heads, and a
    residual connection followed by layer normalization.
    """
    missing = [k for k in ATTENTION_PARAM_KEYS if k not in params]
    if missing:
        raise ContractError(f"multi_head_attention: missing params {missing}")
    if x.ndim != 3:
        raise DimensionError(f"multi_head_attention: input must be [B,N,D], got {x.shape}")
    B, N, D = x.data.shape
    heads = int(heads)
    if heads < 1 or D % heads != 0:
        raise DimensionError(
            f"multi_head_attention: head count {heads} does not divide width {D}"
        )
    dh = D // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params["wq"], params["bq"]))
    k = split(linear(x, params["wk"], params["bk"]))
    v = split(linear(x, params["wv"], params["bv"]))
    scores = scale(bmm(q, transpose(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(dh)))
    attn = softmax(scores)
    ctx = reshape(transpose(bmm(attn, v), (0, 2, 1, 3)), (B, N, D))
    projected = linear(ctx, params["wo"], params["bo"])
    return layer_norm(add(x, projected), params["ln_gamma"], params["ln_beta"])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between row softmaxes and integer class labels."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [B,n], got {logits.shape}")
    labels = np.asarray(labels)
    B, n = logits.data.shape
    if labels.shape != (B,):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != ({B},)"
        )
    if labels.min() < 0 or labels.max() >= n:
        raise ParameterError(
            f"softmax_cross_entropy: labels outside [0, {n})"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def rule(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / float(B)),)

    return _record(out, (logits,), rule)
