"""Dense NCHW tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width). Every function here is pure except
:func:`batchnorm_forward` in training mode, which updates running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor or kernel dimensions are incompatible."""


def tensor4(data, dtype=np.float64) -> np.ndarray:
    """Validate ``data`` as a rank-4 tensor and return it as a contiguous array."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
    return arr


def _check4(x: np.ndarray, what: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


@dataclass
class ConvKernel:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"only square 1x1 or 3x3 kernels are supported, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match C_out={self.weight.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def copy(self) -> "ConvKernel":
        return replace(self, weight=self.weight.copy(), bias=self.bias.copy())

    def astype(self, dtype) -> "ConvKernel":
        return replace(self, weight=self.weight.astype(dtype), bias=self.bias.astype(dtype))

    @classmethod
    def zeros(cls, c_out: int, c_in: int, k: int, stride: int = 1, padding: int | None = None,
              dtype=np.float64) -> "ConvKernel":
        if padding is None:
            padding = k // 2
        return cls(np.zeros((c_out, c_in, k, k), dtype), np.zeros(c_out, dtype), stride, padding)


@dataclass
class BatchNormStats:
    """Per-channel batch normalization state; ``var`` is the running variance."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.mean.shape
        if len(c) != 1 or any(a.shape != c for a in (self.var, self.gamma, self.beta)):
            raise ShapeError("batchnorm arrays must be 1-D and share one length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.var < 0):
            raise ValueError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "BatchNormStats":
        return replace(self, mean=self.mean.copy(), var=self.var.copy(),
                       gamma=self.gamma.copy(), beta=self.beta.copy())

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, eps: float = 1e-5) -> "BatchNormStats":
        """Stats whose eval-mode transform is exactly the identity map."""
        return cls(np.zeros(channels, dtype), np.full(channels, 1.0 - eps, dtype),
                   np.ones(channels, dtype), np.zeros(channels, dtype), eps)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) such that eval-mode BN is ``scale * x + shift``."""
        scale = self.gamma / np.sqrt(self.var + self.eps)
        return scale, self.beta - self.mean * scale


@dataclass
class ConvBN:
    """A convolution optionally followed by batch normalization.

    After folding, ``bn`` is ``None`` and the conv carries the affine transform.
    """

    conv: ConvKernel
    bn: BatchNormStats | None = field(default=None)


def output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unroll k x k patches of ``x`` into a (C*k*k, N*H'*W') matrix."""
    n, c, h, w = x.shape
    oh, ow = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"convolution output would be empty for input {h}x{w}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (c, kh, kw, n, oh, ow)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * oh * ow)
    return cols, oh, ow


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an input-shaped tensor."""
    n, c, h, w = x_shape
    oh, ow = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _check_conv(x: np.ndarray, kernel: ConvKernel) -> None:
    _check4(x)
    if x.shape[1] != kernel.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.in_channels}")


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Zero-padded cross-correlation via im2col + matrix multiply."""
    _check_conv(x, kernel)
    return conv2d_raw(x, kernel.weight, kernel.bias, kernel.stride, kernel.padding)


def conv2d_raw(x, weight, bias, stride, padding):
    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    if k == 1 and padding == 0:
        if stride > 1:
            x = x[:, :, ::stride, ::stride]
        oh, ow = x.shape[2:]
        out = np.matmul(weight.reshape(c_out, c), x.reshape(n, c, oh * ow))
        out = out.reshape(n, c_out, oh, ow)
    else:
        cols, oh, ow = im2col(x, k, stride, padding)
        out = weight.reshape(c_out, -1) @ cols
        out = out.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_direct(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Reference convolution with explicit loops over every output element.

    Slow; intended only as an oracle for small shapes.
    """
    _check_conv(x, kernel)
    n, c, h, w = x.shape
    k, s, p = kernel.kernel_size, kernel.stride, kernel.padding
    oh, ow = output_size(h, k, s, p), output_size(w, k, s, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"convolution output would be empty for input {h}x{w}")
    wt = kernel.weight
    out = np.zeros((n, kernel.out_channels, oh, ow), dtype=np.result_type(x, wt))
    for b in range(n):
        for o in range(kernel.out_channels):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(k):
                            yy = i * s + di - p
                            if yy < 0 or yy >= h:
                                continue
                            for dj in range(k):
                                xx = j * s + dj - p
                                if 0 <= xx < w:
                                    acc += x[b, ci, yy, xx] * wt[o, ci, di, dj]
                    out[b, o, i, j] = acc + kernel.bias[o]
    return out


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over (n, h, w)."""
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def update_running_stats(stats: BatchNormStats, mean: np.ndarray, var: np.ndarray, count: int) -> None:
    # running variance tracks the unbiased estimate
    unbiased = var * (count / (count - 1))
    m = stats.momentum
    stats.mean[...] = (1 - m) * stats.mean + m * mean
    stats.var[...] = (1 - m) * stats.var + m * unbiased


def batchnorm_forward(x: np.ndarray, stats: BatchNormStats, mode: str = "eval") -> np.ndarray:
    _check4(x)
    if x.shape[1] != stats.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, batchnorm has {stats.channels}")
    if mode == "eval":
        mean, var = stats.mean, stats.var
    elif mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("train-mode batchnorm needs more than one value per channel")
        mean, var = batch_moments(x)
        update_running_stats(stats, mean, var, count)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    r = lambda a: a.reshape(1, -1, 1, 1)  # noqa: E731
    return r(stats.gamma) * (x - r(mean)) / np.sqrt(r(var) + stats.eps) + r(stats.beta)


def _resize_axis(in_size: int, out_size: int):
    """Source indices and weights for half-pixel-center linear interpolation."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, src - i0


def resize_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Dense (out, in) matrix of the 1-D interpolation used by :func:`bilinear_resize`."""
    i0, i1, lam = _resize_axis(in_size, out_size)
    m = np.zeros((out_size, in_size), dtype)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    _check4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    # lerp form a + t*(b - a) keeps constant inputs exactly constant
    if h != out_h:
        i0, i1, lam = _resize_axis(h, out_h)
        a = x[:, :, i0, :]
        x = a + lam.astype(x.dtype).reshape(1, 1, -1, 1) * (x[:, :, i1, :] - a)
    if w != out_w:
        i0, i1, lam = _resize_axis(w, out_w)
        a = x[:, :, :, i0]
        x = a + lam.astype(x.dtype).reshape(1, 1, 1, -1) * (x[:, :, :, i1] - a)
    return np.ascontiguousarray(x)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def avg_pool(x: np.ndarray, kernel, stride, padding=0) -> np.ndarray:
    """Average pooling; zero padding counts toward the window area."""
    _check4(x)
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    n, c, h, w = x.shape
    oh, ow = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pooling output would be empty for input {h}x{w}")
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    return win.sum(axis=(4, 5)) / (kh * kw)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    return a + b


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    base = xs[0].shape
    for x in xs:
        _check4(x)
        if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ShapeError(f"cannot concatenate {x.shape} with {base}")
    return np.concatenate(xs, axis=1)


def argmax_channel(x: np.ndarray) -> np.ndarray:
    """Per-pixel channel index of the maximum; ties resolve to the lowest index."""
    _check4(x)
    return np.argmax(x, axis=1)
