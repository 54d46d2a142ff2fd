"""Differentiable operations on :class:`~coswin.tensor.engine.Tensor`.

All kernels are plain numpy reference implementations; gradients are
registered through :func:`~coswin.tensor.engine.record`.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import ContractError, ShapeError
from .engine import Tensor, as_tensor, record

Axis = Optional[Union[int, Tuple[int, ...]]]

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _lift(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-differentiable) scalar."""
    c = float(c)

    def bw(g):
        return (g * c,)

    return record("scale", x.data * c, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * d,)

    return record("gelu", out, (x,), bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dimensions must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is [d_in, d_out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ np.ascontiguousarray(weight.data.T)).reshape(x.shape)
        gw = (g2.T @ x2).T
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, bw)


# -- normalisation / probabilities -----------------------------------------

def softmax_last_dim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("softmax needs a non-empty last dimension")
    m = x.data.max(axis=-1, keepdims=True)
    assert np.isfinite(m).all(), "softmax slice is entirely -inf"
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), bw)


softmax = softmax_last_dim


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gain.shape}/{bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", out, (x, gain, bias), bw)


# -- convolution ------------------------------------------------------------

def _im2col3x3(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    return np.concatenate(
        [xp[..., i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1
    )


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, layout [..., h, w, c].

    ``weight`` is [3, 3, c_in, c_out]; spatial size is preserved.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv2d_3x3: input must be [..., h, w, c], got {x.shape}")
    if weight.ndim != 4 or weight.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_3x3: weight must be [3, 3, c_in, c_out], got {weight.shape}")
    c_in, c_out = weight.shape[2], weight.shape[3]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv2d_3x3: input channels {x.shape[-1]} != weight c_in {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d_3x3: bias {bias.shape} != ({c_out},)")
    h, w = x.shape[-3], x.shape[-2]
    cols = _im2col3x3(x.data).reshape(-1, 9 * c_in)
    w2 = weight.data.reshape(9 * c_in, c_out)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (c_out,))

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gw = (g2.T @ cols).T.reshape(weight.shape)
        gcols = (g2 @ np.ascontiguousarray(w2.T)).reshape(x.shape[:-1] + (9 * c_in,))
        gxp = np.zeros(x.shape[:-3] + (h + 2, w + 2, c_in), dtype=g.dtype)
        k = 0
        for i in range(3):
            for j in range(3):
                gxp[..., i:i + h, j:j + w, :] += gcols[..., k * c_in:(k + 1) * c_in]
                k += 1
        gx = gxp[..., 1:h + 1, 1:w + 1, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d_3x3", out, inputs, bw)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return record("reshape", out, (x,), bw)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort([a % x.ndim for a in axes])

    def bw(g):
        return (np.transpose(g, inv),)

    return record("permute", np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw)


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("mean", np.asarray(out), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(tensors), bw)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    advanced = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return record("getitem", np.array(out, copy=True), (x,), bw)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along axis 0 with scatter-add backward (bias lookups)."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]
    flat = index.reshape(-1)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape((flat.size,) + table.shape[1:]))
        return (gt,)

    return record("take_rows", out, (table,), bw)


def cyclic_shift(grid: Tensor, dy: int, dx: int) -> Tensor:
    """Output (i, j) takes input ((i + dy) mod h, (j + dx) mod w); layout [..., h, w, c]."""
    if grid.ndim < 3:
        raise ShapeError(f"cyclic_shift: expected [..., h, w, c], got {grid.shape}")
    dy, dx = int(dy), int(dx)
    out = np.roll(grid.data, shift=(-dy, -dx), axis=(-3, -2))

    def bw(g):
        return (np.roll(g, shift=(dy, dx), axis=(-3, -2)),)

    return record("cyclic_shift", out, (grid,), bw)


def log_softmax(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return record("exp", y, (x,), bw)


OP_NAMES = (
    "add", "sub", "mul", "scale", "relu", "gelu", "matmul", "linear", "softmax",
    "layer_norm", "conv2d_3x3", "reshape", "permute", "sum", "mean", "concat",
    "getitem", "take_rows", "cyclic_shift", "log_softmax", "exp",
)

