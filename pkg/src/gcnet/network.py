"""GCNet-S/M/L assembly, end-to-end forward passes and whole-network contraction."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Iterator

import numpy as np

from . import autograd as ag
from .blocks import (
    D2S,
    Context,
    FusionModule,
    PyramidPooling,
    SegHead,
    bilateral_fuse,
    conv_unit,
    init_conv_bn,
    make_fusion_d2s,
    make_fusion_s2d,
    make_gcblock,
    make_pyramid_pooling,
    make_seghead,
    pyramid_pool_forward,
    seghead_forward,
    stage_forward,
)
from .reparam import GCBlock, ReparamError, contract_gcblock, fuse_conv_bn
from .tensor import BatchNormStats, ConvBN, ShapeError

VARIANTS = {
    # C, N, O_c, blocks per stage (s2, s3, (s4 sem, det), (s5 sem, det), (s6 sem, det))
    "S": dict(C=32, N=4, O_c=64, blocks=(4, 4, (5, 4), (5, 4), (2, 2))),
    "M": dict(C=64, N=2, O_c=128, blocks=(4, 4, (5, 4), (5, 4), (2, 2))),
    "L": dict(C=64, N=2, O_c=256, blocks=(5, 5, (5, 5), (5, 5), (3, 3))),
}

STAGES = ("s2", "s3", "s4_sem", "s4_det", "s5_sem", "s5_det", "s6_sem", "s6_det")
OUTPUT_STRIDE = 64


@dataclass
class NetworkConfig:
    variant: str = "S"
    num_classes: int = 19
    base_channels: int | None = None
    paths: int | None = None
    head_channels: int | None = None
    ppm_kind: str = "dappm"
    ppm_channels: int | None = None
    aux_head: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from S, M, L")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.C < 1 or self.N < 1:
            raise ValueError("base_channels and paths must be positive")

    @property
    def C(self) -> int:
        return self.base_channels or VARIANTS[self.variant]["C"]

    @property
    def N(self) -> int:
        return self.paths or VARIANTS[self.variant]["N"]

    @property
    def O_c(self) -> int:
        return self.head_channels or VARIANTS[self.variant]["O_c"]

    @property
    def ppm_width(self) -> int:
        return self.ppm_channels or min(128, 4 * self.C)

    @property
    def blocks(self) -> dict[str, int]:
        s2, s3, s4, s5, s6 = VARIANTS[self.variant]["blocks"]
        return {"s2": s2, "s3": s3, "s4_sem": s4[0], "s4_det": s4[1],
                "s5_sem": s5[0], "s5_det": s5[1], "s6_sem": s6[0], "s6_det": s6[1]}

    def stage_channels(self) -> dict[str, tuple[int, int, int]]:
        """(in, out, first-block stride) per stage."""
        C = self.C
        return {"s2": (C, C, 1), "s3": (C, 2 * C, 2),
                "s4_sem": (2 * C, 4 * C, 2), "s4_det": (2 * C, 2 * C, 1),
                "s5_sem": (4 * C, 8 * C, 2), "s5_det": (2 * C, 2 * C, 1),
                "s6_sem": (8 * C, 16 * C, 2), "s6_det": (2 * C, 4 * C, 1)}


@dataclass
class Network:
    config: NetworkConfig
    stem: list[ConvBN]
    stages: dict[str, list[GCBlock]]
    fuse4: tuple[FusionModule, FusionModule]
    fuse5: tuple[FusionModule, FusionModule]
    ppm: PyramidPooling
    head: SegHead
    aux_head: SegHead | None = None
    form: str = "training"
    extras: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.stem[0].conv.weight.dtype


def check_input_dims(h: int, w: int) -> None:
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE or h < 1 or w < 1:
        raise ShapeError(
            f"input {h}x{w} is not divisible by {OUTPUT_STRIDE}; the semantic branch "
            f"downsamples by {OUTPUT_STRIDE} so both dims must be multiples of it")


CALIBRATION_SHAPE = (2, 3, 128, 128)


def build_gcnet(cfg: NetworkConfig, seed: int | None = 0, calibrate: bool = True) -> Network:
    """Build a training-form network; weights are deterministic in ``seed``.

    With ``calibrate`` the BN running statistics are set from one seeded
    random batch so eval-mode activations stay well scaled at any depth.
    ``seed=None`` yields all-zero convolution weights (a skeleton for loading).
    """
    rng = None if seed is None else np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    C = cfg.C
    stem = [init_conv_bn(rng, C, 3, 3, 2, dt), init_conv_bn(rng, C, C, 3, 2, dt)]
    stages = {}
    for name, (c_in, c_out, stride) in cfg.stage_channels().items():
        blocks = []
        for i in range(cfg.blocks[name]):
            blocks.append(make_gcblock(c_in if i == 0 else c_out, c_out,
                                       stride if i == 0 else 1, cfg.N, rng, dt))
        stages[name] = blocks
    fuse4 = (make_fusion_s2d(4 * C, 2 * C, rng, dt), make_fusion_d2s(2 * C, 4 * C, 2, rng, dt))
    fuse5 = (make_fusion_s2d(8 * C, 2 * C, rng, dt), make_fusion_d2s(2 * C, 8 * C, 4, rng, dt))
    ppm = make_pyramid_pooling(16 * C, cfg.ppm_width, 4 * C, cfg.ppm_kind, rng, dt)
    head = make_seghead(4 * C, cfg.O_c, cfg.num_classes, rng, dt)
    aux = make_seghead(2 * C, cfg.O_c, cfg.num_classes, rng, dt) if cfg.aux_head else None
    net = Network(cfg, stem, stages, fuse4, fuse5, ppm, head, aux)
    if calibrate and rng is not None:
        calibrate_batchnorm(net, [rng.normal(size=CALIBRATION_SHAPE).astype(dt)])
    return net


def calibrate_batchnorm(net: Network, batches) -> None:
    """Replace running statistics with the cumulative average over ``batches``."""
    bns = list(iter_batchnorms(net))
    saved = [b.momentum for b in bns]
    try:
        for k, x in enumerate(batches):
            for b in bns:
                b.momentum = 1.0 / (k + 1)
            network_forward(net, x, mode="train")
    finally:
        for b, m in zip(bns, saved):
            b.momentum = m


def network_forward(net: Network, x, mode: str = "eval", ctx: Context | None = None,
                    features: dict | None = None):
    """Logits at input resolution; in train mode also the auxiliary logits.

    ``features``, when given, receives each stage output keyed by stage name.
    """
    if ctx is None:
        ctx = Context.for_mode(mode)
    train = ctx.train
    if train and net.form != "training":
        raise ReparamError("an inference-form network cannot run in train mode")
    xv = ag.value(x)
    if xv.ndim != 4 or xv.shape[1] != 3:
        raise ShapeError(f"expected input of shape (n, 3, h, w), got {xv.shape}")
    h, w = xv.shape[2:]
    check_input_dims(h, w)
    rec = features if features is not None else {}

    y = x
    for unit in net.stem:
        y = conv_unit(unit, y, ctx, act=True)
    rec["s1"] = y
    y = rec["s2"] = stage_forward(net.stages["s2"], y, ctx)
    y = rec["s3"] = stage_forward(net.stages["s3"], y, ctx)
    sem = stage_forward(net.stages["s4_sem"], y, ctx)
    det = stage_forward(net.stages["s4_det"], y, ctx)
    sem, det = bilateral_fuse(sem, det, *net.fuse4, ctx=ctx)
    rec["s4"] = (sem, det)
    aux_in = det
    sem = stage_forward(net.stages["s5_sem"], sem, ctx)
    det = stage_forward(net.stages["s5_det"], det, ctx)
    sem, det = bilateral_fuse(sem, det, *net.fuse5, ctx=ctx)
    rec["s5"] = (sem, det)
    sem = stage_forward(net.stages["s6_sem"], sem, ctx)
    det = stage_forward(net.stages["s6_det"], det, ctx)
    rec["s6"] = (sem, det)
    ctxt = pyramid_pool_forward(net.ppm, sem, ctx=ctx)
    dh, dw = ag.value(det).shape[2:]
    fused = ag.add(det, ag.resize(ctxt, dh, dw))
    logits = ag.resize(seghead_forward(net.head, fused, ctx=ctx), h, w)
    if not train:
        return logits
    aux = None
    if net.aux_head is not None:
        aux = ag.resize(seghead_forward(net.aux_head, aux_in, ctx=ctx), h, w)
    return logits, aux


# -- traversal --------------------------------------------------------------

def _unit_tensors(prefix: str, unit: ConvBN) -> Iterator[tuple[str, np.ndarray, bool]]:
    yield f"{prefix}.conv.weight", unit.conv.weight, True
    yield f"{prefix}.conv.bias", unit.conv.bias, unit.bn is None
    if unit.bn is not None:
        yield from _bn_tensors(f"{prefix}.bn", unit.bn)


def _bn_tensors(prefix: str, bn: BatchNormStats):
    yield f"{prefix}.gamma", bn.gamma, True
    yield f"{prefix}.beta", bn.beta, True
    yield f"{prefix}.mean", bn.mean, False
    yield f"{prefix}.var", bn.var, False


def named_tensors(net: Network) -> Iterator[tuple[str, np.ndarray, bool]]:
    """Every stored array as (hierarchical name, array, trainable) in a fixed order.

    Running statistics and the bias of a convolution feeding a batchnorm are
    stored but not trainable.
    """
    for i, unit in enumerate(net.stem):
        yield from _unit_tensors(f"stem.{i}", unit)
    for stage in STAGES:
        for b, block in enumerate(net.stages[stage]):
            pre = f"{stage}.{b}"
            if block.fused is not None:
                yield f"{pre}.fused.weight", block.fused.weight, True
                yield f"{pre}.fused.bias", block.fused.bias, True
                continue
            for p, path in enumerate(block.paths):
                if path.bn is not None:
                    yield from _bn_tensors(f"{pre}.path{p}.bn", path.bn)
                for c, unit in enumerate(path.convs):
                    yield from _unit_tensors(f"{pre}.path{p}.conv{c}", unit)
    for tag, pair in (("fuse4", net.fuse4), ("fuse5", net.fuse5)):
        for f in pair:
            kind = "d2s" if f.direction == D2S else "s2d"
            for i, unit in enumerate(f.convs):
                yield from _unit_tensors(f"{tag}.{kind}.{i}", unit)
    for i, unit in enumerate(net.ppm.scales):
        yield from _unit_tensors(f"ppm.scale{i}", unit)
    for i, unit in enumerate(net.ppm.process):
        yield from _unit_tensors(f"ppm.process{i}", unit)
    yield from _unit_tensors("ppm.compression", net.ppm.compression)
    yield from _unit_tensors("ppm.shortcut", net.ppm.shortcut)
    for tag, head in (("head", net.head), ("aux_head", net.aux_head)):
        if head is None:
            continue
        yield from _unit_tensors(f"{tag}.conv3x3", head.conv3x3)
        yield f"{tag}.conv1x1.weight", head.conv1x1.weight, True
        yield f"{tag}.conv1x1.bias", head.conv1x1.bias, True


def iter_conv_units(net: Network) -> Iterator[ConvBN]:
    yield from net.stem
    for f in (*net.fuse4, *net.fuse5):
        yield from f.convs
    yield from net.ppm.scales
    yield from net.ppm.process
    yield net.ppm.compression
    yield net.ppm.shortcut
    for head in (net.head, net.aux_head):
        if head is not None:
            yield head.conv3x3


def iter_batchnorms(net: Network) -> Iterator[BatchNormStats]:
    for unit in iter_conv_units(net):
        if unit.bn is not None:
            yield unit.bn
    for stage in STAGES:
        for block in net.stages[stage]:
            for path in block.paths:
                if path.bn is not None:
                    yield path.bn
                for unit in path.convs:
                    if unit.bn is not None:
                        yield unit.bn


# -- contraction ------------------------------------------------------------

def fold_unit(unit: ConvBN) -> ConvBN:
    if unit.bn is None:
        return ConvBN(unit.conv.copy())
    return ConvBN(fuse_conv_bn(unit.conv, unit.bn))


def contract_network(net: Network) -> Network:
    """Inference form: every GCBlock becomes one 3x3 conv, every batchnorm is
    folded, the auxiliary head is dropped. ``net`` is left untouched."""
    if net.form != "training":
        raise ReparamError("network is already in inference form")
    folds = lambda units: [fold_unit(u) for u in units]  # noqa: E731
    stages = {k: [contract_gcblock(b) for b in v] for k, v in net.stages.items()}
    fuse = lambda pair: tuple(FusionModule(f.direction, folds(f.convs)) for f in pair)  # noqa: E731
    ppm = net.ppm
    ppm2 = PyramidPooling(ppm.kind, folds(ppm.scales), folds(ppm.process),
                          fold_unit(ppm.compression), fold_unit(ppm.shortcut))
    head = SegHead(fold_unit(net.head.conv3x3), net.head.conv1x1.copy())
    return Network(replace(net.config), folds(net.stem), stages, fuse(net.fuse4), fuse(net.fuse5),
                   ppm2, head, None, "inference")


def cast_arrays(obj, dtype):
    """Deep copy of a dataclass tree with floating-point arrays converted to ``dtype``."""
    if isinstance(obj, np.ndarray):
        return obj.astype(dtype) if np.issubdtype(obj.dtype, np.floating) else obj.copy()
    if isinstance(obj, list):
        return [cast_arrays(o, dtype) for o in obj]
    if isinstance(obj, tuple):
        return tuple(cast_arrays(o, dtype) for o in obj)
    if isinstance(obj, dict):
        return {k: cast_arrays(v, dtype) for k, v in obj.items()}
    if is_dataclass(obj) and not isinstance(obj, (type, NetworkConfig)):
        return replace(obj, **{f.name: cast_arrays(getattr(obj, f.name), dtype) for f in fields(obj)})
    return obj


def cast_network(net: Network, dtype) -> Network:
    """Deep copy of ``net`` with every floating-point array converted to ``dtype``."""
    out = cast_arrays(net, np.dtype(dtype))
    out.config = replace(net.config, dtype=np.dtype(dtype).name)
    return out
