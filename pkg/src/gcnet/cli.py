"""Command-line interface: build, contract, check, bench, count, train-toy, segment."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass

import numpy as np

from .accounting import count_params_flops
from .bench import bench, write_csv
from .data import normalize
from .network import (
    VARIANTS,
    Network,
    NetworkConfig,
    build_gcnet,
    cast_network,
    check_input_dims,
    contract_network,
    network_forward,
)
from .pnm import read_ppm, write_pgm, write_ppm
from .reparam import ReparamError
from .serialize import load_model, save_model
from .tensor import argmax_channel, bilinear_resize
from .train import ToyConfig

log = logging.getLogger("gcnet")


# -- equivalence harness ------------------------------------------------------

@dataclass
class CheckReport:
    trials: int
    max_abs: float
    max_rel: float
    argmax_disagree: int
    margin_disagree: int
    tol: float
    relative: bool
    passed: bool

    def summary(self) -> str:
        metric = "relative" if self.relative else "max-abs"
        return (f"{'PASS' if self.passed else 'FAIL'}: {self.trials} trials, max-abs {self.max_abs:.3e}, "
                f"relative {self.max_rel:.3e} ({metric} tol {self.tol:g}); argmax disagreements "
                f"{self.argmax_disagree} ({self.margin_disagree} beyond 1e-6 margin)")


def _top2_margin(logits: np.ndarray) -> np.ndarray:
    part = np.sort(logits, axis=1)
    return part[:, -1] - part[:, -2] if logits.shape[1] > 1 else np.full(part[:, 0].shape, np.inf)


def check_equivalence(net: Network, trials: int = 10, tol: float = 1e-8, height: int = 64,
                      width: int = 128, seed: int = 0, relative: bool = False,
                      contract=contract_network) -> CheckReport:
    """Compare eval-mode logits of ``net`` and its contraction on random inputs, in f64.

    ``max_rel`` is max |a - b| over max |a|, per trial. A pixel counts towards
    ``margin_disagree`` when argmaxes differ and the training-form top-two
    margin exceeds 1e-6.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if net.form != "training":
        raise ReparamError("check needs a training-form model; this one is already contracted")
    check_input_dims(height, width)
    ref = cast_network(net, np.float64) if net.dtype != np.float64 else net
    fused = contract(ref)
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    dis = mdis = 0
    for _ in range(trials):
        x = rng.normal(size=(1, 3, height, width))
        a, b = network_forward(ref, x), network_forward(fused, x)
        err = float(np.max(np.abs(a - b)))
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(float(np.max(np.abs(a))), 1e-300))
        diff = argmax_channel(a) != argmax_channel(b)
        dis += int(diff.sum())
        mdis += int((diff & (_top2_margin(a) > 1e-6)).sum())
    passed = (max_rel if relative else max_abs) <= tol
    return CheckReport(trials, max_abs, max_rel, dis, mdis, tol, relative, passed)


# -- segmentation -------------------------------------------------------------

PALETTE = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60]],
                   np.uint8)


def palette(n: int) -> np.ndarray:
    if n <= len(PALETTE):
        return PALETTE[:n]
    extra = np.random.default_rng(0).integers(0, 256, (n - len(PALETTE), 3), dtype=np.uint8)
    return np.concatenate([PALETTE, extra])


def segment_image(net: Network, img: np.ndarray) -> np.ndarray:
    """(h, w) uint8 class map for an (h, w, 3) uint8 image.

    Sizes that are not multiples of the output stride are resized up to the
    next multiple and the logits resized back before the argmax.
    """
    if net.config.num_classes > 255:
        raise ValueError("segment output is 8-bit; model has more than 255 classes")
    h, w = img.shape[:2]
    x = normalize(img.transpose(2, 0, 1)[None].astype(np.float64) / 255.0).astype(net.dtype)
    H, W = -(-h // 64) * 64, -(-w // 64) * 64
    if (H, W) != (h, w):
        log.warning("image %dx%d is not a multiple of 64; resizing to %dx%d for inference", h, w, H, W)
        x = bilinear_resize(x, H, W)
    logits = network_forward(net, x)
    if (H, W) != (h, w):
        logits = bilinear_resize(logits, h, w)
    return argmax_channel(logits)[0].astype(np.uint8)


# -- commands ----------------------------------------------------------------

def _load(path) -> Network:
    net = load_model(path)
    log.info("loaded %s-form GCNet-%s (%d classes, C=%d)", net.form, net.config.variant,
             net.config.num_classes, net.config.C)
    return net


def cmd_build(a) -> int:
    cfg = NetworkConfig(a.variant, a.classes, a.base_channels, a.paths, a.head_channels,
                        a.ppm, aux_head=not a.no_aux, dtype="float64")
    net = build_gcnet(cfg, seed=a.seed)
    save_model(net, a.out)
    print(f"wrote training-form GCNet-{a.variant} to {a.out}")
    return 0


def cmd_contract(a) -> int:
    net = _load(a.model)
    if net.form != "training":
        print("error: model is already in inference form", file=sys.stderr)
        return 2
    save_model(contract_network(cast_network(net, np.float64)), a.out)
    print(f"wrote inference-form model to {a.out}")
    return 0


def cmd_check(a) -> int:
    net = _load(a.model)
    try:
        rep = check_equivalence(net, a.trials, a.tol, a.height, a.width, a.seed, a.relative)
    except (ReparamError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(rep.summary())
    return 0 if rep.passed else 1


def cmd_bench(a) -> int:
    net = _load(a.model)
    nets = [net]
    if a.compare and net.form == "training":
        nets.append(contract_network(net))
    reports = [bench(n, a.height, a.width, a.iters, a.warmup, a.seed) for n in nets]
    for r in reports:
        print(f"{r.form:9s} {r.height}x{r.width}: median {r.median_ms:.2f} ms, mean {r.mean_ms:.2f} ms, "
              f"p95 {r.p95_ms:.2f} ms, {r.fps:.2f} FPS, {r.params} params, {r.gflops:.2f} GFLOPs")
    if len(reports) == 2:
        print(f"speedup {reports[0].median_ms / reports[1].median_ms:.2f}x")
    if a.csv:
        write_csv(reports, a.csv)
    return 0


def cmd_count(a) -> int:
    if a.model:
        net = _load(a.model)
    else:
        net = build_gcnet(NetworkConfig(a.variant, a.classes), seed=None, calibrate=False)
    nets = [net] if net.form == "inference" else [net, contract_network(net)]
    for n in nets:
        c = count_params_flops(n, a.height, a.width)
        print(f"{n.form:9s} params {c.params / 1e6:.2f} M, {c.gmacs:.1f} GMACs, "
              f"{c.gflops:.1f} GFLOPs at {a.height}x{a.width}")
    return 0


def cmd_train_toy(a) -> int:
    from .train import toy_train_run

    cfg = ToyConfig(base_channels=a.base_channels, size=a.size, base_lr=a.lr, batch=a.batch)

    def progress(row):
        print(f"iter {row['iter']:5d} loss {row['loss']:.4f} val mIoU {row['val_miou']:.4f}", flush=True)

    net, trace = toy_train_run(cfg, seed=a.seed, iters=a.iters, trace_path=a.trace, progress=progress)
    print(f"loss iter 1 {trace[0]['loss']:.4f}, final val mIoU {trace[-1]['val_miou']:.4f}")
    if a.out:
        save_model(net, a.out)
        print(f"wrote training-form model to {a.out}")
    return 0


def cmd_segment(a) -> int:
    net = _load(a.model)
    try:
        img = read_ppm(a.image)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    labels = segment_image(net, img)
    if a.palette:
        write_ppm(a.out, palette(net.config.num_classes)[labels])
    else:
        write_pgm(a.out, labels)
    print(f"wrote {labels.shape[1]}x{labels.shape[0]} label map to {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcnet", description=__doc__, allow_abbrev=False)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a seeded training-form model")
    b.add_argument("--variant", choices=sorted(VARIANTS), default="S")
    b.add_argument("--classes", type=int, default=19)
    b.add_argument("--base-channels", type=int, default=None)
    b.add_argument("--paths", type=int, default=None)
    b.add_argument("--head-channels", type=int, default=None)
    b.add_argument("--ppm", choices=("dappm", "simple"), default="dappm")
    b.add_argument("--no-aux", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_build)

    c = sub.add_parser("contract", help="fold a training-form model into inference form")
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_contract)

    k = sub.add_parser("check", help="verify contraction equivalence on random inputs")
    k.add_argument("--model", required=True)
    k.add_argument("--trials", type=int, default=10)
    k.add_argument("--tol", type=float, default=1e-8)
    k.add_argument("--relative", action="store_true", help="compare max error relative to max |logit|")
    k.add_argument("--height", type=int, default=64)
    k.add_argument("--width", type=int, default=128)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=cmd_check)

    n = sub.add_parser("bench", help="batch-1 single-thread latency")
    n.add_argument("--model", required=True)
    n.add_argument("--height", type=int, default=256)
    n.add_argument("--width", type=int, default=512)
    n.add_argument("--iters", type=int, default=20)
    n.add_argument("--warmup", type=int, default=5)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--compare", action="store_true", help="also time the contracted form")
    n.add_argument("--csv", default=None)
    n.set_defaults(fn=cmd_bench)

    q = sub.add_parser("count", help="parameter and operation counts")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--variant", choices=sorted(VARIANTS))
    q.add_argument("--classes", type=int, default=19)
    q.add_argument("--height", type=int, default=1024)
    q.add_argument("--width", type=int, default=2048)
    q.set_defaults(fn=cmd_count)

    t = sub.add_parser("train-toy", help="train GCNet-S-narrow on synthetic shapes")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iters", type=int, default=1000)
    t.add_argument("--size", type=int, default=ToyConfig.size)
    t.add_argument("--batch", type=int, default=ToyConfig.batch)
    t.add_argument("--lr", type=float, default=ToyConfig.base_lr)
    t.add_argument("--base-channels", type=int, default=ToyConfig.base_channels)
    t.add_argument("--trace", default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("segment", help="label a PPM image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--palette", action="store_true", help="write a colorized PPM instead of a PGM")
    s.set_defaults(fn=cmd_segment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
