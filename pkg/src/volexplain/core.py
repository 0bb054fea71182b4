"""Dense float64 kernels for 3D convolutional networks.

Tensors are plain ``numpy.ndarray`` objects in row-major
``(batch, channel, depth, height, width)`` layout. Every function here is
pure: inputs are never written to, results are freshly allocated.

Batched calls are evaluated one sample at a time with identical BLAS call
shapes, so a sample's result does not depend on what else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgmaxError, LabelError, NonFiniteError, ShapeError

_AXES = ("depth", "height", "width")


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous float64 array after validating it."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > 5:
        raise ShapeError(f"{name}: rank must be between 1 and 5, got {arr.ndim}")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"{name}: all extents must be >= 1, got {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        t = (int(v),) * 3
    else:
        t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"{name}: expected 3 spatial values, got {len(t)}")
    return t


def output_extent(n: int, k: int, stride: int, pad: int, axis: str = "axis") -> int:
    """``(n + 2*pad - k) / stride + 1``, required to be a positive integer."""
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{axis}: window {k} exceeds padded extent {n + 2 * pad}")
    if span % stride:
        raise ShapeError(
            f"{axis}: (extent {n} + 2*pad {pad} - window {k}) not divisible by stride {stride}"
        )
    return span // stride + 1


@dataclass(frozen=True)
class ConvParams:
    kernels: np.ndarray  # (out_channels, in_channels, kd, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        k = as_tensor(self.kernels, "kernels")
        b = as_tensor(self.bias, "bias")
        if k.ndim != 5:
            raise ShapeError(f"kernels: expected rank 5, got shape {k.shape}")
        if b.shape != (k.shape[0],):
            raise ShapeError(f"bias: expected shape ({k.shape[0]},), got {b.shape}")
        stride = _triple(self.stride, "stride")
        pad = _triple(self.padding, "padding")
        if min(stride) < 1:
            raise ShapeError(f"stride must be positive, got {stride}")
        if min(pad) < 0:
            raise ShapeError(f"padding must be non-negative, got {pad}")
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", pad)

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        b, c, *spatial = input_shape
        if c != self.kernels.shape[1]:
            raise ShapeError(
                f"channel: input has {c} channels, kernels expect {self.kernels.shape[1]}"
            )
        out = tuple(
            output_extent(n, k, s, p, ax)
            for n, k, s, p, ax in zip(spatial, self.kernels.shape[2:], self.stride, self.padding, _AXES)
        )
        return (b, self.kernels.shape[0], *out)


@dataclass(frozen=True)
class PoolParams:
    window: tuple[int, int, int]
    stride: tuple[int, int, int]

    def __post_init__(self):
        w = _triple(self.window, "window")
        s = _triple(self.stride, "stride")
        if min(w) < 1 or min(s) < 1:
            raise ShapeError(f"window and stride must be positive, got {w} / {s}")
        object.__setattr__(self, "window", w)
        object.__setattr__(self, "stride", s)

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        b, c, *spatial = input_shape
        out = tuple(
            output_extent(n, k, s, 0, ax)
            for n, k, s, ax in zip(spatial, self.window, self.stride, _AXES)
        )
        return (b, c, *out)


def _check_rank5(x: np.ndarray, name: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name}: expected (batch, channel, depth, height, width), got shape {x.shape}")


def _check_grad_shape(grad: np.ndarray, expected: tuple[int, ...]) -> None:
    if grad.shape != tuple(expected):
        for axis, (got, want) in enumerate(zip(grad.shape, expected)):
            if got != want:
                raise ShapeError(f"grad_out axis {axis}: expected extent {want}, got {got}")
        raise ShapeError(f"grad_out: expected shape {tuple(expected)}, got {grad.shape}")


def _windows(xp: np.ndarray, window, stride, out_spatial) -> np.ndarray:
    """Strided view of shape (..., od, oh, ow, kd, kh, kw) over the last 3 axes."""
    nd = xp.ndim
    v = sliding_window_view(xp, window, axis=(nd - 3, nd - 2, nd - 1))
    sd, sh, sw = stride
    od, oh, ow = out_spatial
    return v[..., : sd * od : sd, : sh * oh : sh, : sw * ow : sw, :, :, :]


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(p, p) for p in pad]
    return np.pad(x, widths)


# ---------------------------------------------------------------------------
# convolution


def conv3d_forward(x, p: ConvParams) -> np.ndarray:
    x = as_tensor(x, "input")
    _check_rank5(x, "input")
    out_shape = p.output_shape(x.shape)
    kshape = p.kernels.shape[2:]
    out = np.empty(out_shape)
    for i in range(x.shape[0]):
        win = _windows(_pad(x[i], p.padding), kshape, p.stride, out_shape[2:])
        # (c, od, oh, ow, kd, kh, kw) x (oc, c, kd, kh, kw) -> (od, oh, ow, oc)
        y = np.tensordot(win, p.kernels, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
        out[i] = np.moveaxis(y, -1, 0) + p.bias[:, None, None, None]
    check_finite(out, "conv3d output")
    return out


def conv3d_backward(x, p: ConvParams, grad_out):
    """Vector-Jacobian products of :func:`conv3d_forward`.

    Returns ``(grad_input, grad_kernels, grad_bias)``.
    """
    x = as_tensor(x, "input")
    _check_rank5(x, "input")
    g = as_tensor(grad_out, "grad_out")
    out_shape = p.output_shape(x.shape)
    _check_grad_shape(g, out_shape)

    kd, kh, kw = p.kernels.shape[2:]
    sd, sh, sw = p.stride
    od, oh, ow = out_shape[2:]
    pd, ph, pw = p.padding
    _, c, D, H, W = x.shape

    grad_k = np.zeros_like(p.kernels)
    grad_x = np.empty_like(x)
    for i in range(x.shape[0]):
        win = _windows(_pad(x[i], p.padding), (kd, kh, kw), p.stride, (od, oh, ow))
        grad_k += np.tensordot(g[i], win, axes=([1, 2, 3], [1, 2, 3]))

        # (oc, c, kd, kh, kw) x (oc, od, oh, ow) -> (c, kd, kh, kw, od, oh, ow)
        cols = np.tensordot(p.kernels, g[i], axes=([0], [0]))
        gp = np.zeros((c, D + 2 * pd, H + 2 * ph, W + 2 * pw))
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    gp[:, a : a + sd * od : sd, b : b + sh * oh : sh, e : e + sw * ow : sw] += cols[:, a, b, e]
        grad_x[i] = gp[:, pd : pd + D, ph : ph + H, pw : pw + W]
    grad_b = g.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_k, grad_b


# ---------------------------------------------------------------------------
# max pooling


def maxpool3d_forward(x, p: PoolParams):
    """Window maxima plus, per output voxel, the flat input index that won.

    Ties go to the smallest flat index: window offsets are scanned in
    row-major order, which is increasing input index order.
    """
    x = as_tensor(x, "input")
    _check_rank5(x, "input")
    out_shape = p.output_shape(x.shape)
    win = _windows(x, p.window, p.stride, out_shape[2:])
    flat = win.reshape(*out_shape, -1)
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    oi, oj, ok = np.unravel_index(local, p.window)
    b, c, d, h, w = np.indices(out_shape, sparse=True)
    sd, sh, sw = p.stride
    argmax = np.ravel_multi_index(
        (b, c, d * sd + oi, h * sh + oj, w * sw + ok), x.shape
    ).astype(np.int64)
    return out, argmax


def maxpool3d_backward(argmax, grad_out, input_shape) -> np.ndarray:
    g = as_tensor(grad_out, "grad_out")
    argmax = np.asarray(argmax)
    if argmax.shape != g.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match grad_out shape {g.shape}")
    size = int(np.prod(input_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise ArgmaxError(
            f"argmax index out of range [0, {size}): min {argmax.min()}, max {argmax.max()}"
        )
    grad = np.bincount(argmax.ravel(), weights=g.ravel(), minlength=size)
    return grad.reshape(tuple(input_shape))


# ---------------------------------------------------------------------------
# elementwise and dense


def relu_forward(x) -> np.ndarray:
    x = as_tensor(x, "input")
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    """Gradient of ReLU; the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x, "input")
    g = as_tensor(grad_out, "grad_out")
    if g.shape != x.shape:
        raise ShapeError(f"grad_out shape {g.shape} does not match input shape {x.shape}")
    return np.where(x > 0, g, 0.0)


def dense_forward(x, weights, bias) -> np.ndarray:
    """``y[b] = W @ x[b] + bias`` for input (batch, n) and weights (m, n)."""
    x = as_tensor(x, "input")
    w = as_tensor(weights, "weights")
    b = as_tensor(bias, "bias")
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input has {x.shape[1]} features, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias shape {b.shape}, expected ({w.shape[0]},)")
    out = np.empty((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        out[i] = w @ x[i] + b
    check_finite(out, "dense output")
    return out


def dense_backward(x, weights, grad_out):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    x = as_tensor(x, "input")
    w = as_tensor(weights, "weights")
    g = as_tensor(grad_out, "grad_out")
    if g.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"grad_out: expected shape {(x.shape[0], w.shape[0])}, got {g.shape}")
    grad_x = np.empty_like(x)
    grad_w = np.zeros_like(w)
    for i in range(x.shape[0]):
        grad_x[i] = w.T @ g[i]
        grad_w += np.outer(g[i], x[i])
    return grad_x, grad_w, g.sum(axis=0)


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits, "logits")
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax: expected (batch, k>=2), got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class.

    Returns ``(loss, grad)`` where ``grad`` is the gradient of the loss with
    respect to the logits that produced ``probs``, i.e. ``(p - onehot) / b``.
    """
    p = as_tensor(probs, "probs")
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ShapeError(f"cross_entropy: probs {p.shape} vs labels {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {y.dtype}")
    k = p.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelError(f"label out of range [0, {k}): {y.min()}..{y.max()}")
    rows = np.arange(p.shape[0])
    picked = p[rows, y]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    grad = p.copy()
    grad[rows, y] -= 1.0
    grad /= p.shape[0]
    return loss, grad
