"""Forward semantics and constructors for the composite components."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .reparam import PATH_1X1_1X1, PATH_3X3_1X1, PATH_RESIDUAL, GCBlock, PathSpec, ReparamError
from .tensor import BatchNormStats, ConvBN, ConvKernel, ShapeError

S2D = "semantic_to_detail"
D2S = "detail_to_semantic"

# (kernel, stride, padding) of the pooled pyramid branches; a global branch follows
DAPPM_POOLS = ((5, 2, 2), (9, 4, 4), (17, 8, 8))


class Context:
    """Carries BN mode and, when tracking, the leaf node for every parameter array."""

    def __init__(self, train: bool = False, track: bool = False):
        self.train = train
        self.track = track
        self.leaves: dict[int, Var] = {}

    @classmethod
    def for_mode(cls, mode: str) -> "Context":
        if mode not in ("eval", "train"):
            raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
        return cls(train=mode == "train")

    def param(self, arr: np.ndarray, trainable: bool = True):
        if not (self.track and trainable):
            return arr
        leaf = self.leaves.get(id(arr))
        if leaf is None:
            leaf = self.leaves[id(arr)] = Var(arr)
        return leaf

    def grads(self) -> dict[int, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for k, v in self.leaves.items()}


def _ctx(mode: str, ctx: Context | None) -> Context:
    return Context.for_mode(mode) if ctx is None else ctx


# -- initialisation ---------------------------------------------------------

def init_conv(rng: np.random.Generator | None, c_out: int, c_in: int, k: int, stride: int = 1,
              padding: int | None = None, dtype=np.float64) -> ConvKernel:
    kern = ConvKernel.zeros(c_out, c_in, k, stride, padding, dtype)
    if rng is not None:
        std = np.sqrt(2.0 / (c_in * k * k))
        kern.weight[...] = rng.normal(0.0, std, kern.weight.shape)
    return kern


def init_bn(channels: int, dtype=np.float64) -> BatchNormStats:
    return BatchNormStats(np.zeros(channels, dtype), np.ones(channels, dtype),
                          np.ones(channels, dtype), np.zeros(channels, dtype))


def init_conv_bn(rng, c_out, c_in, k, stride=1, dtype=np.float64) -> ConvBN:
    return ConvBN(init_conv(rng, c_out, c_in, k, stride, None, dtype), init_bn(c_out, dtype))


def make_gcblock(c_in: int, c_out: int, stride: int, n_paths: int,
                 rng: np.random.Generator | None = None, dtype=np.float64) -> GCBlock:
    """Training-form block with ``n_paths`` 3x3->1x1 paths, one 1x1->1x1 path and,
    when shapes allow, a batchnormed identity path."""
    if n_paths < 1:
        raise ValueError("a GCBlock needs at least one 3x3_1x1 path")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    paths = []
    for _ in range(n_paths):
        paths.append(PathSpec(PATH_3X3_1X1, [init_conv_bn(rng, c_out, c_in, 3, stride, dtype),
                                             init_conv_bn(rng, c_out, c_out, 1, 1, dtype)],
                              stride=stride))
    paths.append(PathSpec(PATH_1X1_1X1, [init_conv_bn(rng, c_out, c_in, 1, stride, dtype),
                                         init_conv_bn(rng, c_out, c_out, 1, 1, dtype)],
                          stride=stride))
    if stride == 1 and c_in == c_out:
        paths.append(PathSpec(PATH_RESIDUAL, bn=init_bn(c_out, dtype), stride=1))
    return GCBlock(c_in, c_out, stride, paths)


# -- primitive units --------------------------------------------------------

def conv_unit(unit: ConvBN, x, ctx: Context, act: bool = False):
    k = unit.conv
    y = ag.conv2d(x, ctx.param(k.weight), ctx.param(k.bias, trainable=unit.bn is None),
                  k.stride, k.padding)
    if unit.bn is not None:
        y = ag.batch_norm(y, unit.bn, ctx.train, ctx.param(unit.bn.gamma), ctx.param(unit.bn.beta))
    return ag.relu(y) if act else y


def kernel_forward(k: ConvKernel, x, ctx: Context):
    return ag.conv2d(x, ctx.param(k.weight), ctx.param(k.bias), k.stride, k.padding)


# -- GCBlock ----------------------------------------------------------------

def path_forward(path: PathSpec, x, ctx: Context):
    if path.kind == PATH_RESIDUAL:
        bn = path.bn
        return ag.batch_norm(x, bn, ctx.train, ctx.param(bn.gamma), ctx.param(bn.beta))
    y = x
    for unit in path.convs:
        y = conv_unit(unit, y, ctx)
    return y


def gcblock_forward(block: GCBlock, x, mode: str = "eval", ctx: Context | None = None):
    ctx = _ctx(mode, ctx)
    c = ag.value(x).shape[1]
    if c != block.in_channels:
        raise ShapeError(f"block expects {block.in_channels} input channels, got {c}")
    if block.fused is not None:
        return ag.relu(kernel_forward(block.fused, x, ctx))
    if not block.paths:
        raise ReparamError("block has neither paths nor a fused kernel")
    total = None
    for path in block.paths:
        y = path_forward(path, x, ctx)
        total = y if total is None else ag.add(total, y)
    return ag.relu(total)


def stage_forward(blocks: list[GCBlock], x, ctx: Context):
    for b in blocks:
        x = gcblock_forward(b, x, ctx=ctx)
    return x


# -- bilateral fusion -------------------------------------------------------

@dataclass
class FusionModule:
    """Cross-branch projection.

    semantic->detail: one stride-1 3x3 conv (channel compression) then bilinear
    upsampling to the detail resolution. detail->semantic: one or two chained
    stride-2 3x3 convs (channel expansion), with ReLU between chained convs.
    """

    direction: str
    convs: list[ConvBN] = field(default_factory=list)


def make_fusion_s2d(c_sem: int, c_det: int, rng=None, dtype=np.float64) -> FusionModule:
    return FusionModule(S2D, [init_conv_bn(rng, c_det, c_sem, 3, 1, dtype)])


def make_fusion_d2s(c_det: int, c_sem: int, factor: int, rng=None, dtype=np.float64) -> FusionModule:
    if factor == 2:
        convs = [init_conv_bn(rng, c_sem, c_det, 3, 2, dtype)]
    elif factor == 4:
        convs = [init_conv_bn(rng, c_sem // 2, c_det, 3, 2, dtype),
                 init_conv_bn(rng, c_sem, c_sem // 2, 3, 2, dtype)]
    else:
        raise ValueError(f"unsupported downsampling factor {factor}")
    return FusionModule(D2S, convs)


def fusion_project(f: FusionModule, x, ctx: Context, size: tuple[int, int] | None = None):
    if f.direction == S2D:
        y = conv_unit(f.convs[0], x, ctx)
        return ag.resize(y, *size)
    y = x
    for i, unit in enumerate(f.convs):
        y = conv_unit(unit, y, ctx, act=i < len(f.convs) - 1)
    return y


def bilateral_fuse(sem, det, f_s2d: FusionModule, f_d2s: FusionModule,
                   mode: str = "eval", ctx: Context | None = None):
    """Exchange features between branches; both projections read the pre-fusion inputs."""
    ctx = _ctx(mode, ctx)
    sv, dv = ag.value(sem), ag.value(det)
    up = fusion_project(f_s2d, sem, ctx, dv.shape[2:])
    down = fusion_project(f_d2s, det, ctx)
    if ag.value(up).shape != dv.shape or ag.value(down).shape != sv.shape:
        raise ShapeError(
            f"fusion projections {ag.value(up).shape}/{ag.value(down).shape} do not match "
            f"branch shapes {dv.shape}/{sv.shape}")
    return ag.relu(ag.add(sem, down)), ag.relu(ag.add(det, up))


# -- pyramid pooling --------------------------------------------------------

@dataclass
class PyramidPooling:
    """Multi-scale context aggregation on the deepest semantic features.

    ``kind == "dappm"``: a full-resolution branch, three average-pooled
    branches, one global branch, hierarchical 3x3 refinement, concatenation,
    1x1 compression and a 1x1 shortcut. ``kind == "simple"``: a single global
    branch added to the shortcut.
    """

    kind: str
    scales: list[ConvBN]
    process: list[ConvBN]
    compression: ConvBN
    shortcut: ConvBN

    @property
    def in_channels(self) -> int:
        return self.shortcut.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.shortcut.conv.out_channels


def make_pyramid_pooling(c_in: int, c_branch: int, c_out: int, kind: str = "dappm",
                         rng=None, dtype=np.float64) -> PyramidPooling:
    if kind == "dappm":
        n = len(DAPPM_POOLS) + 2
        scales = [init_conv_bn(rng, c_branch, c_in, 1, 1, dtype) for _ in range(n)]
        process = [init_conv_bn(rng, c_branch, c_branch, 3, 1, dtype) for _ in range(n - 1)]
        compression = init_conv_bn(rng, c_out, c_branch * n, 1, 1, dtype)
    elif kind == "simple":
        scales = [init_conv_bn(rng, c_branch, c_in, 1, 1, dtype)]
        process = []
        compression = init_conv_bn(rng, c_out, c_branch, 1, 1, dtype)
    else:
        raise ValueError(f"unknown pyramid pooling kind {kind!r}")
    shortcut = init_conv_bn(rng, c_out, c_in, 1, 1, dtype)
    return PyramidPooling(kind, scales, process, compression, shortcut)


def pyramid_pool_forward(p: PyramidPooling, x, mode: str = "eval", ctx: Context | None = None):
    ctx = _ctx(mode, ctx)
    xv = ag.value(x)
    if xv.shape[1] != p.in_channels:
        raise ShapeError(f"pyramid pooling expects {p.in_channels} channels, got {xv.shape[1]}")
    h, w = xv.shape[2:]
    if p.kind == "simple":
        g = conv_unit(p.scales[0], ag.global_avg_pool(x), ctx, act=True)
        g = ag.resize(conv_unit(p.compression, g, ctx), h, w)
        return ag.add(g, conv_unit(p.shortcut, x, ctx))
    feats = [conv_unit(p.scales[0], x, ctx, act=True)]
    pooled = [ag.avg_pool(x, k, s, pad) for k, s, pad in DAPPM_POOLS] + [ag.global_avg_pool(x)]
    for i, px in enumerate(pooled):
        branch = ag.resize(conv_unit(p.scales[i + 1], px, ctx, act=True), h, w)
        feats.append(conv_unit(p.process[i], ag.add(branch, feats[-1]), ctx, act=True))
    out = conv_unit(p.compression, ag.concat_channels(feats), ctx)
    return ag.add(out, conv_unit(p.shortcut, x, ctx))


# -- segmentation head ------------------------------------------------------

@dataclass
class SegHead:
    conv3x3: ConvBN
    conv1x1: ConvKernel

    @property
    def num_classes(self) -> int:
        return self.conv1x1.out_channels


def make_seghead(c_in: int, c_mid: int, num_classes: int, rng=None, dtype=np.float64) -> SegHead:
    return SegHead(init_conv_bn(rng, c_mid, c_in, 3, 1, dtype),
                   init_conv(rng, num_classes, c_mid, 1, 1, 0, dtype))


def seghead_forward(h: SegHead, x, mode: str = "eval", ctx: Context | None = None):
    """Logits at the input's resolution; no softmax."""
    ctx = _ctx(mode, ctx)
    c = ag.value(x).shape[1]
    if c != h.conv3x3.conv.in_channels:
        raise ShapeError(f"head expects {h.conv3x3.conv.in_channels} channels, got {c}")
    y = conv_unit(h.conv3x3, x, ctx, act=True)
    return kernel_forward(h.conv1x1, y, ctx)
