"""Differentiable primitives.

Each primitive computes its result with NumPy and records a vector-Jacobian product.
Elementwise operations require identical shapes; there is no implicit broadcasting.
"""

from __future__ import annotations

from contextvars import ContextVar, Token
from typing import Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from crowd_mlp.engine.rng import RngState, StackedRng
from crowd_mlp.engine.tensor import (
    ContractError,
    DimensionError,
    ParameterError,
    Tensor,
    record,
)

Mode = Literal["train", "eval"]
MODES = ("train", "eval")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------- Elementwise ----------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return record("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return record("scale", x.data * factor, (x,), lambda g: (g * factor,))


def square(x: Tensor) -> Tensor:
    x_data = x.data
    return record("square", x_data * x_data, (x,), lambda g: (2.0 * g * x_data,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0.0
    return record("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def abs_err(a: Tensor, b: Tensor) -> Tensor:
    """Sum of |a - b|; for scalar operands this is the L1 atom |a - b|."""
    _same_shape("abs_err", a, b)
    diff = a.data - b.data
    sign = np.sign(diff)
    return record(
        "abs_err",
        np.asarray(np.abs(diff).sum()),
        (a, b),
        lambda g: (g * sign, -g * sign),
    )


# ---------- Linear maps ----------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Apply ``x @ weight + bias`` along the last axis of ``x``."""
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got shape {weight.shape}")
    d_in, d_out = weight.shape
    if x.ndim < 1 or x.shape[-1] != d_in:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    x_data, w_data = x.data, weight.data
    out = x_data @ w_data
    if bias is not None:
        out = out + bias.data

    def vjp(g: np.ndarray):
        g2 = g.reshape(-1, d_out)
        x2 = x_data.reshape(-1, d_in)
        grad_x = g @ w_data.T
        grad_w = x2.T @ g2
        grad_b = g2.sum(axis=0) if bias is not None else None
        return (grad_x, grad_w, grad_b)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", out, inputs, vjp)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlate C_in×H×W (or N×C_in×H×W) input with a C_out×C_in×k×k kernel."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel must be C_out×C_in×k×k, got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: invalid stride={stride} or padding={padding}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")

    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    n, channels, height, width = xb.shape
    if channels != c_in:
        raise DimensionError(f"conv2d: input has {channels} channels, kernel expects {c_in}")
    span_h = height + 2 * padding - k
    span_w = width + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"conv2d: output extent is not integral for input {height}×{width}, "
            f"k={k}, stride={stride}, padding={padding}"
        )
    out_h = span_h // stride + 1
    out_w = span_w // stride + 1

    padded = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    k_data = kernel.data
    out = np.tensordot(windows, k_data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g: np.ndarray):
        gb = g if batched else g[None]
        grad_k = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(gb, k_data, axes=([1], [0]))
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :,
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                ] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]
        if not batched:
            grad_x = grad_x[0]
        grad_b = gb.sum(axis=(0, 2, 3)) if bias is not None else None
        return (grad_x, grad_k, grad_b)

    if not batched:
        out = out[0]
    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record("conv2d", out, inputs, vjp)


# ---------- Normalization and regularization ----------


class SharedBatchStats:
    """Train-mode normalizers captured by one forward pass and replayed by later passes.

    The first ``with`` block records the effective shift and scale of every train-mode
    batch_norm call in order; each later block replays them from the start, without
    touching the running buffers.
    """

    def __init__(self) -> None:
        self._entries: list[tuple[np.ndarray, np.ndarray]] = []
        self._recorded = False
        self._cursor = 0
        self._token: Token[SharedBatchStats | None] | None = None

    def __enter__(self) -> SharedBatchStats:
        if self._token is not None:
            raise ContractError("These batch statistics are already active.")
        self._cursor = 0
        self._token = _SHARED_STATS.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._token is None:
            return
        _SHARED_STATS.reset(self._token)
        self._token = None
        if not self._recorded:
            self._recorded = True
        elif exc_type is None and self._cursor != len(self._entries):
            raise ContractError(
                f"Replay used {self._cursor} of {len(self._entries)} recorded normalizers"
            )

    @property
    def replaying(self) -> bool:
        return self._recorded

    def __len__(self) -> int:
        return len(self._entries)

    def _push(self, shift: np.ndarray, inv_std: np.ndarray) -> None:
        self._entries.append((shift.copy(), inv_std.copy()))

    def _next(self, features: int) -> tuple[np.ndarray, np.ndarray]:
        if self._cursor >= len(self._entries):
            raise ContractError("Replay reached more batch_norm calls than were recorded")
        shift, inv_std = self._entries[self._cursor]
        if shift.shape != (features,):
            raise DimensionError(
                f"Recorded normalizer covers {shift.shape[0]} features, layer has {features}"
            )
        self._cursor += 1
        return shift, inv_std


_SHARED_STATS: ContextVar[SharedBatchStats | None] = ContextVar(
    "crowd_mlp_shared_batch_stats", default=None
)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    *,
    axis: int = -1,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    renorm: tuple[float, float] | None = None,
) -> Tensor:
    """Normalize each feature along ``axis`` over every other axis.

    Train mode uses batch statistics and updates the running buffers in place;
    eval mode uses the running buffers. ``renorm=(r_max, d_max)`` applies batch
    renormalization in train mode: the batch-normalized value is mapped onto the
    running statistics by x̂·r + d, with r and d clipped and held constant in the
    backward pass. Inside a replaying SharedBatchStats block, train mode reuses the
    recorded normalizer as a constant.
    """
    check_mode(mode)
    axis = axis % x.ndim
    features = x.shape[axis]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data)):
        if arr.shape != (features,):
            raise DimensionError(f"batch_norm: {label} {arr.shape} does not match {features}")
    if running_mean.shape != (features,) or running_var.shape != (features,):
        raise DimensionError("batch_norm: running statistics do not match the feature axis")
    if renorm is not None and (renorm[0] < 1.0 or renorm[1] < 0.0):
        raise ParameterError(f"batch_norm: renorm needs r_max >= 1 and d_max >= 0, got {renorm}")

    moved = np.moveaxis(x.data, axis, -1)
    reduce_axes = tuple(range(moved.ndim - 1))
    count = moved.size // features
    g_data = gamma.data
    shared = _SHARED_STATS.get() if mode == "train" else None
    batch_stats = mode == "train" and not (shared is not None and shared.replaying)
    correction: np.ndarray | float = 1.0

    if batch_stats:
        mean = moved.mean(axis=reduce_axes)
        var = moved.var(axis=reduce_axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (moved - mean) * inv_std
        offset: np.ndarray | float = 0.0
        if renorm is not None:
            r_max, d_max = renorm
            running_std = np.sqrt(running_var + eps)
            correction = np.clip(np.sqrt(var + eps) / running_std, 1.0 / r_max, r_max)
            offset = np.clip((mean - running_mean) / running_std, -d_max, d_max)
        normalized = x_hat * correction + offset
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        if shared is not None:
            scale_eff = inv_std * correction
            shared._push(mean - offset / scale_eff, scale_eff)
    else:
        if shared is not None:
            shift, inv_std = shared._next(features)
        else:
            shift, inv_std = running_mean, 1.0 / np.sqrt(running_var + eps)
        x_hat = (moved - shift) * inv_std
        normalized = x_hat

    out = np.moveaxis(normalized * g_data + beta.data, -1, axis)

    def vjp(g: np.ndarray):
        g_moved = np.moveaxis(g, axis, -1)
        grad_gamma = (g_moved * normalized).sum(axis=reduce_axes)
        grad_beta = g_moved.sum(axis=reduce_axes)
        g_hat = g_moved * g_data
        if batch_stats:
            g_hat = g_hat * correction
            grad_moved = (
                inv_std
                / count
                * (
                    count * g_hat
                    - g_hat.sum(axis=reduce_axes)
                    - x_hat * (g_hat * x_hat).sum(axis=reduce_axes)
                )
            )
        else:
            grad_moved = g_hat * inv_std
        return (np.moveaxis(grad_moved, -1, axis), grad_gamma, grad_beta)

    return record("batch_norm", out, (x, gamma, beta), vjp)


def dropout(
    x: Tensor,
    p: float,
    rng: RngState | StackedRng | None,
    mode: str,
    *,
    shared_axes: Sequence[int] = (),
) -> Tensor:
    """Inverted dropout; one Bernoulli draw is shared along each axis in ``shared_axes``."""
    check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs an RngState")

    shared = {a % x.ndim for a in shared_axes}
    mask_shape = tuple(1 if i in shared else extent for i, extent in enumerate(x.shape))
    keep = rng.random(mask_shape) >= p
    factor = np.broadcast_to(keep / (1.0 - p), x.shape)
    return record("dropout", x.data * factor, (x,), lambda g: (g * factor,))


def max_pool2(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2 over the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"max_pool2: input must be at least 2-D, got {x.shape}")
    *lead, height, width = x.shape
    if height % 2 or width % 2:
        raise DimensionError(f"max_pool2: spatial extent {height}×{width} must be even")
    h2, w2 = height // 2, width // 2
    grouped = np.moveaxis(x.data.reshape(*lead, h2, 2, w2, 2), -3, -2).reshape(*lead, h2, w2, 4)
    winner = grouped.argmax(axis=-1)[..., None]
    out = np.take_along_axis(grouped, winner, axis=-1)[..., 0]

    def vjp(g: np.ndarray):
        grad_grouped = np.zeros_like(grouped)
        np.put_along_axis(grad_grouped, winner, g[..., None], axis=-1)
        grad = np.moveaxis(grad_grouped.reshape(*lead, h2, w2, 2, 2), -2, -3)
        return (grad.reshape(x.shape),)

    return record("max_pool2", out, (x,), vjp)


# ---------- Shape manipulation ----------


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return record(
        "permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),)
    )


def transpose(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    a, b = a % x.ndim, b % x.ndim
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    source = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(source),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise DimensionError("concat: needs at least one tensor")
    ndim = xs[0].ndim
    axis = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    boundaries = np.cumsum([t.shape[axis] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return record(
        "concat", out, tuple(xs), lambda g: tuple(np.split(g, boundaries, axis=axis))
    )


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Inverse of ``concat``: cut ``x`` into consecutive pieces along ``axis``."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis] or any(s < 0 for s in sizes):
        raise DimensionError(f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        pieces.append(_slice_axis(x, start, start + size, axis))
        start += size
    return pieces


def _slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def vjp(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[key] = g
        return (grad,)

    return record("slice", x.data[key], (x,), vjp)


# ---------- Reductions ----------


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    source = x.shape
    if axis is None:
        return record(
            "reduce_sum",
            np.asarray(x.data.sum()),
            (x,),
            lambda g: (np.broadcast_to(g, source).copy(),),
        )
    axis = axis % x.ndim
    return record(
        "reduce_sum",
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), source).copy(),),
    )


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    source = x.shape
    if axis is None:
        n = x.size
        return record(
            "reduce_mean",
            np.asarray(x.data.mean()),
            (x,),
            lambda g: (np.full(source, float(g) / n),),
        )
    axis = axis % x.ndim
    n = x.shape[axis]
    return record(
        "reduce_mean",
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), source) / n,),
    )
