"""Parameter and operation counts for a network at a given input resolution.

Two operation totals are kept. ``macs`` counts convolution multiply-accumulates
only (the convention most framework FLOP counters report as "FLOPs").
``flops`` counts 2 per MAC plus 1 per bias add, elementwise op, pooling
add and interpolation arithmetic op.
"""
from __future__ import annotations

from dataclasses import dataclass

from .blocks import D2S, DAPPM_POOLS, PyramidPooling
from .network import Network, check_input_dims, named_tensors
from .tensor import ConvBN, ConvKernel, output_size

BN_OPS = 2  # scale and shift per element
RESIZE_OPS = 7  # 4 multiplies + 3 adds per output element


@dataclass
class Cost:
    params: int = 0
    macs: int = 0
    flops: int = 0

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9


def conv_cost(k: ConvKernel, h: int, w: int, bias: bool = True) -> tuple[Cost, int, int]:
    """Cost of one convolution on an h x w input; returns (cost, out_h, out_w)."""
    oh = output_size(h, k.kernel_size, k.stride, k.padding)
    ow = output_size(w, k.kernel_size, k.stride, k.padding)
    macs = k.out_channels * k.in_channels * k.kernel_size ** 2 * oh * ow
    flops = 2 * macs + (k.out_channels * oh * ow if bias else 0)
    params = k.weight.size + (k.bias.size if bias else 0)
    return Cost(params, macs, flops), oh, ow


class _Counter:
    def __init__(self):
        self.cost = Cost()

    def _add(self, c: Cost):
        self.cost.macs += c.macs
        self.cost.flops += c.flops

    def elementwise(self, numel: int, ops: int = 1):
        self.cost.flops += ops * numel

    def unit(self, u: ConvBN, h: int, w: int, act: bool = False):
        c, oh, ow = conv_cost(u.conv, h, w, bias=u.bn is None)
        self._add(c)
        numel = u.conv.out_channels * oh * ow
        if u.bn is not None:
            self.elementwise(numel, BN_OPS)
        if act:
            self.elementwise(numel)
        return oh, ow

    def kernel(self, k: ConvKernel, h: int, w: int):
        c, oh, ow = conv_cost(k, h, w)
        self._add(c)
        return oh, ow

    def resize(self, c: int, h: int, w: int, oh: int, ow: int):
        if (h, w) != (oh, ow):
            self.elementwise(c * oh * ow, RESIZE_OPS)

    def block(self, b, h, w):
        if b.fused is not None:
            oh, ow = self.kernel(b.fused, h, w)
        else:
            for p in b.paths:
                if p.bn is not None:
                    self.elementwise(b.out_channels * h * w, BN_OPS)
                    oh, ow = h, w
                    continue
                ph, pw = h, w
                for u in p.convs:
                    ph, pw = self.unit(u, ph, pw)
                oh, ow = ph, pw
            # path summation
            self.elementwise(b.out_channels * oh * ow, len(b.paths) - 1)
        self.elementwise(b.out_channels * oh * ow)  # relu
        return oh, ow

    def stage(self, blocks, h, w):
        for b in blocks:
            h, w = self.block(b, h, w)
        return h, w

    def fusion(self, f_s2d, f_d2s, sem_hw, det_hw, c_sem, c_det):
        h, w = self.unit(f_s2d.convs[0], *sem_hw)
        self.resize(c_det, h, w, *det_hw)
        h, w = det_hw
        for i, u in enumerate(f_d2s.convs):
            h, w = self.unit(u, h, w, act=i < len(f_d2s.convs) - 1)
        self.elementwise(c_sem * sem_hw[0] * sem_hw[1], 2)  # add + relu
        self.elementwise(c_det * det_hw[0] * det_hw[1], 2)

    def ppm(self, p: PyramidPooling, h, w):
        c_in = p.in_channels
        if p.kind == "simple":
            self.elementwise(c_in * h * w)
            self.unit(p.scales[0], 1, 1, act=True)
            self.unit(p.compression, 1, 1)
            self.resize(p.out_channels, 1, 1, h, w)
            self.unit(p.shortcut, h, w)
            self.elementwise(p.out_channels * h * w)
            return
        cb = p.scales[0].conv.out_channels
        self.unit(p.scales[0], h, w, act=True)
        sizes = []
        for k, s, pad in DAPPM_POOLS:
            ph, pw = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
            self.elementwise(c_in * ph * pw, k * k)
            sizes.append((ph, pw))
        self.elementwise(c_in * h * w)  # global pool
        sizes.append((1, 1))
        for i, (ph, pw) in enumerate(sizes):
            self.unit(p.scales[i + 1], ph, pw, act=True)
            self.resize(cb, ph, pw, h, w)
            self.elementwise(cb * h * w)
            self.unit(p.process[i], h, w, act=True)
        self.unit(p.compression, h, w)
        self.unit(p.shortcut, h, w)
        self.elementwise(p.out_channels * h * w)


def count_params_flops(net: Network, h: int, w: int) -> Cost:
    """Trainable parameter count and operation counts for one (1, 3, h, w) input.

    Parameters are weights and biases that are trained, plus BN scale/shift in
    training form; running statistics are not counted.
    """
    check_input_dims(h, w)
    cnt = _Counter()
    H, W = h, w
    for u in net.stem:
        h, w = cnt.unit(u, h, w, act=True)
    h, w = cnt.stage(net.stages["s2"], h, w)
    h, w = cnt.stage(net.stages["s3"], h, w)
    cfg = net.config
    C = cfg.C
    sem = cnt.stage(net.stages["s4_sem"], h, w)
    det = cnt.stage(net.stages["s4_det"], h, w)
    cnt.fusion(*net.fuse4, sem, det, 4 * C, 2 * C)
    aux_hw = det
    sem = cnt.stage(net.stages["s5_sem"], *sem)
    det = cnt.stage(net.stages["s5_det"], *det)
    cnt.fusion(*net.fuse5, sem, det, 8 * C, 2 * C)
    sem = cnt.stage(net.stages["s6_sem"], *sem)
    det = cnt.stage(net.stages["s6_det"], *det)
    cnt.ppm(net.ppm, *sem)
    c_det = 4 * C
    cnt.resize(net.ppm.out_channels, *sem, *det)
    cnt.elementwise(c_det * det[0] * det[1])
    for head, hw in ((net.head, det), (net.aux_head, aux_hw)):
        if head is None:
            continue
        oh, ow = cnt.unit(head.conv3x3, *hw, act=True)
        oh, ow = cnt.kernel(head.conv1x1, oh, ow)
        cnt.resize(head.num_classes, oh, ow, H, W)
    cnt.cost.params = sum(a.size for _, a, trainable in named_tensors(net) if trainable)
    return cnt.cost


def breakdown(net: Network) -> dict[str, int]:
    """Trainable parameters grouped by top-level component name."""
    out: dict[str, int] = {}
    for name, a, trainable in named_tensors(net):
        if trainable:
            key = name.split(".")[0]
            out[key] = out.get(key, 0) + a.size
    return out


__all__ = ["Cost", "conv_cost", "count_params_flops", "breakdown", "D2S"]
