"""Lossless contraction of multi-path GCBlocks into single 3x3 convolutions.

All fusion arithmetic runs in float64 and the result is cast back to the
dtype of the source weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import BatchNormStats, ConvBN, ConvKernel, ShapeError

PATH_3X3_1X1 = "3x3_1x1"
PATH_1X1_1X1 = "1x1_1x1"
PATH_RESIDUAL = "residual"


class ReparamError(ValueError):
    """Raised when a structure cannot be contracted as requested."""


@dataclass
class PathSpec:
    kind: str
    convs: list[ConvBN] = field(default_factory=list)
    bn: BatchNormStats | None = None  # residual path only
    stride: int = 1

    def validate(self, c_in: int, c_out: int) -> None:
        if self.kind == PATH_RESIDUAL:
            if self.convs or self.bn is None:
                raise ReparamError("a residual path carries exactly one batchnorm and no convs")
            if self.stride != 1 or c_in != c_out:
                raise ReparamError("a residual path needs stride 1 and C_in == C_out")
            if self.bn.channels != c_out:
                raise ReparamError("residual batchnorm width does not match the block")
            return
        if self.kind not in (PATH_3X3_1X1, PATH_1X1_1X1):
            raise ReparamError(f"unknown path kind {self.kind!r}")
        if len(self.convs) != 2:
            raise ReparamError(f"{self.kind} path needs exactly two conv stages")
        first, second = (u.conv for u in self.convs)
        want_k = 3 if self.kind == PATH_3X3_1X1 else 1
        if first.kernel_size != want_k or first.stride != self.stride or first.padding != want_k // 2:
            raise ReparamError(f"bad first stage in {self.kind} path")
        if second.kernel_size != 1 or second.stride != 1 or second.padding != 0:
            raise ReparamError(f"second stage of {self.kind} path must be 1x1, stride 1, pad 0")
        if first.in_channels != c_in or first.out_channels != second.in_channels \
                or second.out_channels != c_out:
            raise ReparamError(f"channel plan of {self.kind} path does not match the block")


@dataclass
class GCBlock:
    """A GCBlock in training form (``paths``) or inference form (``fused``)."""

    in_channels: int
    out_channels: int
    stride: int
    paths: list[PathSpec] = field(default_factory=list)
    fused: ConvKernel | None = None

    @property
    def form(self) -> str:
        return "inference" if self.fused is not None else "training"

    @property
    def num_3x3_paths(self) -> int:
        return sum(p.kind == PATH_3X3_1X1 for p in self.paths)

    @property
    def has_residual(self) -> bool:
        return any(p.kind == PATH_RESIDUAL for p in self.paths)

    def validate(self) -> None:
        if self.fused is not None:
            if self.paths:
                raise ReparamError("a contracted block must not keep its paths")
            return
        kinds = [p.kind for p in self.paths]
        if kinds.count(PATH_3X3_1X1) < 1:
            raise ReparamError("a GCBlock needs at least one 3x3_1x1 path")
        if kinds.count(PATH_1X1_1X1) != 1:
            raise ReparamError("a GCBlock needs exactly one 1x1_1x1 path")
        want_res = int(self.stride == 1 and self.in_channels == self.out_channels)
        if kinds.count(PATH_RESIDUAL) != want_res:
            raise ReparamError(f"expected {want_res} residual path(s), found {kinds.count(PATH_RESIDUAL)}")
        for p in self.paths:
            if p.stride != self.stride:
                raise ReparamError("all paths must share the block stride")
            p.validate(self.in_channels, self.out_channels)


def _f64(k: ConvKernel) -> ConvKernel:
    return k.astype(np.float64)


def _as_kernel(k) -> ConvKernel:
    if isinstance(k, ConvBN):
        if k.bn is not None:
            raise ReparamError("fold batchnorm into the convolution before merging")
        return k.conv
    return k


def fuse_conv_bn(kernel: ConvKernel, stats: BatchNormStats) -> ConvKernel:
    """Fold eval-mode batchnorm into the preceding convolution."""
    if kernel.out_channels != stats.channels:
        raise ShapeError(f"kernel has {kernel.out_channels} outputs, batchnorm {stats.channels} channels")
    w, b = kernel.weight.astype(np.float64), kernel.bias.astype(np.float64)
    t = stats.gamma.astype(np.float64) / np.sqrt(stats.var.astype(np.float64) + stats.eps)
    w2 = w * t.reshape(-1, 1, 1, 1)
    b2 = (b - stats.mean.astype(np.float64)) * t + stats.beta.astype(np.float64)
    dtype = kernel.weight.dtype
    return ConvKernel(w2.astype(dtype), b2.astype(dtype), kernel.stride, kernel.padding)


def fold(unit: ConvBN) -> ConvKernel:
    return unit.conv if unit.bn is None else fuse_conv_bn(unit.conv, unit.bn)


def merge_sequential(first, second) -> ConvKernel:
    """Compose a k x k convolution followed by a 1x1 convolution into one k x k convolution."""
    first, second = _as_kernel(first), _as_kernel(second)
    if second.kernel_size != 1 or second.stride != 1 or second.padding != 0:
        raise ReparamError("second stage must be a 1x1 convolution with stride 1 and no padding")
    if first.out_channels != second.in_channels:
        raise ShapeError(f"cannot chain {first.out_channels} outputs into {second.in_channels} inputs")
    w1 = second.weight.astype(np.float64)[:, :, 0, 0]
    wk = first.weight.astype(np.float64)
    w = (w1 @ wk.reshape(wk.shape[0], -1)).reshape((w1.shape[0],) + wk.shape[1:])
    b = w1 @ first.bias.astype(np.float64) + second.bias.astype(np.float64)
    dtype = first.weight.dtype
    return ConvKernel(w.astype(dtype), b.astype(dtype), first.stride, first.padding)


def embed_1x1_in_3x3(kernel: ConvKernel) -> ConvKernel:
    """Place a 1x1 kernel at the center of a zero 3x3 kernel (padding becomes 1)."""
    kernel = _as_kernel(kernel)
    if kernel.kernel_size != 1:
        raise ReparamError(f"expected a 1x1 kernel, got {kernel.kernel_size}x{kernel.kernel_size}")
    if kernel.padding != 0:
        raise ReparamError("a padded 1x1 kernel has no equivalent 3x3 embedding")
    w = np.zeros(kernel.weight.shape[:2] + (3, 3), kernel.weight.dtype)
    w[:, :, 1, 1] = kernel.weight[:, :, 0, 0]
    return ConvKernel(w, kernel.bias.copy(), kernel.stride, 1)


def identity_1x1(channels: int, dtype=np.float64) -> ConvKernel:
    return ConvKernel(np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1),
                      np.zeros(channels, dtype))


def residual_to_conv3x3(channels: int, stats: BatchNormStats, stride: int = 1) -> ConvKernel:
    """Express a batchnormed identity shortcut as a 3x3 convolution."""
    if stride != 1:
        raise ReparamError("residual connections only exist in stride-1 blocks")
    if stats.channels != channels:
        raise ShapeError(f"batchnorm has {stats.channels} channels, expected {channels}")
    ident = embed_1x1_in_3x3(identity_1x1(channels, stats.gamma.dtype))
    return fuse_conv_bn(ident, stats)


def _tree_sum(arrays: list[np.ndarray]) -> np.ndarray:
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def sum_parallel(kernels: list[ConvKernel]) -> ConvKernel:
    """Sum parallel convolutions of identical geometry into one.

    Kernels are put in a canonical order before a pairwise tree reduction,
    so the result is bit-identical under any permutation of the input list.
    """
    if not kernels:
        raise ReparamError("need at least one kernel to sum")
    kernels = [_as_kernel(k) for k in kernels]
    ref = kernels[0]
    for k in kernels[1:]:
        if (k.weight.shape, k.stride, k.padding) != (ref.weight.shape, ref.stride, ref.padding):
            raise ReparamError("parallel kernels must share shape, stride and padding")
    ordered = sorted(kernels, key=lambda k: k.weight.tobytes() + k.bias.tobytes())
    w = _tree_sum([k.weight.astype(np.float64) for k in ordered])
    b = _tree_sum([k.bias.astype(np.float64) for k in ordered])
    dtype = ref.weight.dtype
    return ConvKernel(w.astype(dtype), b.astype(dtype), ref.stride, ref.padding)


def contract_path(path: PathSpec, channels: int | None = None) -> ConvKernel:
    """Reduce one path to an equivalent 3x3 convolution (padding 1), in float64."""
    if path.kind == PATH_RESIDUAL:
        stats = path.bn
        return residual_to_conv3x3(stats.channels if channels is None else channels,
                                   _stats64(stats), path.stride)
    first, second = (fuse_conv_bn(_f64(u.conv), _stats64(u.bn)) if u.bn is not None
                     else _f64(u.conv) for u in path.convs)
    if first.kernel_size == 1:
        first = embed_1x1_in_3x3(first)
    return merge_sequential(first, second)


def _stats64(s: BatchNormStats) -> BatchNormStats:
    return BatchNormStats(*(a.astype(np.float64) for a in (s.mean, s.var, s.gamma, s.beta)),
                          eps=s.eps, momentum=s.momentum)


def contract_gcblock(block: GCBlock) -> GCBlock:
    """Return the inference form of a training-form block; the input is left untouched."""
    if block.fused is not None:
        raise ReparamError("block is already contracted")
    block.validate()
    merged = sum_parallel([contract_path(p, block.out_channels) for p in block.paths])
    dtype = _block_dtype(block)
    return GCBlock(block.in_channels, block.out_channels, block.stride,
                   paths=[], fused=merged.astype(dtype))


def _block_dtype(block: GCBlock):
    for p in block.paths:
        if p.convs:
            return p.convs[0].conv.weight.dtype
    return block.paths[0].bn.gamma.dtype
