"""Desk-scale supervised training: OHEM loss, deep supervision, SGD with poly decay."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .blocks import Context
from .data import ShapesDataset, fixed_set
from .network import Network, NetworkConfig, build_gcnet, calibrate_batchnorm, named_tensors, network_forward
from .reparam import ReparamError
from .tensor import ShapeError, argmax_channel

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


class DivergenceError(RuntimeError):
    pass


# -- losses -----------------------------------------------------------------

def ohem_mask(logits: np.ndarray, labels: np.ndarray, thresh: float = 0.7,
              min_kept: int | None = None, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Pixels whose true-class probability is below ``thresh``, topped up to
    ``min_kept`` with the lowest-probability remaining pixels."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    n, _, h, w = logits.shape
    if min_kept is None:
        min_kept = n * h * w // 16
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    if np.any(safe >= logits.shape[1]) or np.any(safe < 0):
        raise ShapeError("label values exceed the number of classes")
    prob = np.take_along_axis(ag.softmax(logits), safe[:, None], axis=1)[:, 0]
    kept = valid & (prob < thresh)
    n_valid = int(valid.sum())
    want = min(min_kept, n_valid)
    if kept.sum() >= want:
        return kept
    flat = np.where(valid, prob, np.inf).ravel()
    order = np.argsort(flat, kind="stable")[:want]
    mask = np.zeros(flat.shape, bool)
    mask[order] = True
    return mask.reshape(kept.shape) | kept


def ohem_loss(logits, labels, thresh=0.7, min_kept=None, ignore_index=IGNORE_INDEX):
    """Differentiable OHEM cross-entropy; selection is a constant mask."""
    mask = ohem_mask(ag.value(logits), labels, thresh, min_kept, ignore_index)
    safe = np.where(labels == ignore_index, 0, labels)
    return ag.masked_cross_entropy(logits, safe, mask)


def ohem_cross_entropy(logits: np.ndarray, labels: np.ndarray, thresh: float = 0.7,
                       min_kept: int | None = None, ignore_index: int = IGNORE_INDEX) -> float:
    return float(ohem_loss(logits, labels, thresh, min_kept, ignore_index))


@dataclass
class LossBreakdown:
    L_sh: float
    L_ash: float
    alpha: float
    L: float


def total_loss(sh_logits, ash_logits, labels, alpha: float = 0.4, thresh: float = 0.7,
               min_kept: int | None = None) -> LossBreakdown:
    l_sh = ohem_cross_entropy(sh_logits, labels, thresh, min_kept)
    l_ash = ohem_cross_entropy(ash_logits, labels, thresh, min_kept)
    return LossBreakdown(l_sh, l_ash, alpha, l_sh + alpha * l_ash)


# -- gradients ----------------------------------------------------------------

def backward(net: Network, x: np.ndarray, labels: np.ndarray, alpha: float = 0.4,
             thresh: float = 0.7, min_kept: int | None = None):
    """Train-mode forward and reverse pass.

    Returns the loss breakdown and a gradient for every trainable tensor,
    keyed by its hierarchical name. BN running statistics are updated.
    """
    if net.form != "training":
        raise ReparamError("cannot train an inference-form network")
    ctx = Context(train=True, track=True)
    logits, aux = network_forward(net, x, ctx=ctx)
    l_sh = ohem_loss(logits, labels, thresh, min_kept)
    if aux is not None:
        l_ash = ohem_loss(aux, labels, thresh, min_kept)
        total = ag.add_scalars(l_sh, ag.scale(l_ash, alpha))
    else:
        l_ash = np.zeros(())
        total = l_sh
    total.backward()
    grads = ctx.grads()
    out = {}
    for name, arr, trainable in named_tensors(net):
        if trainable:
            out[name] = grads.get(id(arr), np.zeros_like(arr))
    lsh, lash = float(ag.value(l_sh)), float(ag.value(l_ash))
    return LossBreakdown(lsh, lash, alpha, lsh + alpha * lash), out


# -- optimizer ----------------------------------------------------------------

def no_decay(name: str) -> bool:
    """BN scale/shift and all biases are excluded from weight decay."""
    return name.endswith(".bias") or ".bn." in name


@dataclass
class OptimizerState:
    base_lr: float = 0.01
    max_iter: int = 1000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    iter: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, it: int | None = None) -> float:
        it = self.iter if it is None else it
        return self.base_lr * (1.0 - it / self.max_iter) ** self.power


def sgd_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """In-place momentum SGD: v <- m*v + (g + wd*p); p <- p - lr*v."""
    if state.iter >= state.max_iter:
        raise ValueError(f"iteration {state.iter} is past max_iter={state.max_iter}")
    lr = state.lr()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not no_decay(name):
            g = g + state.weight_decay * p
        v = state.buffers.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[name] = v
        p -= (lr * v).astype(p.dtype)
    state.iter += 1


def trainable_params(net: Network) -> dict[str, np.ndarray]:
    return {name: a for name, a, trainable in named_tensors(net) if trainable}


# -- metric -------------------------------------------------------------------

def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean IoU over classes present in the prediction or the ground truth."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    valid = truth != ignore_index
    p, t = pred[valid].astype(np.int64), truth[valid].astype(np.int64)
    conf = np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(conf)
    denom = conf.sum(0) + conf.sum(1) - tp
    present = denom > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / denom[present]))


def predict(net: Network, x: np.ndarray, batch: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and argmax labels, processed in chunks."""
    logits = np.concatenate([network_forward(net, x[i:i + batch]) for i in range(0, len(x), batch)])
    return logits, argmax_channel(logits)


# -- toy run ------------------------------------------------------------------

@dataclass
class ToyConfig:
    base_channels: int = 8
    head_channels: int = 32
    size: int = 128
    batch: int = 8
    base_lr: float = 0.1
    val_images: int = 32
    val_every: int = 50
    calib_batches: int = 8
    dtype: str = "float32"


TRACE_FIELDS = ("iter", "lr", "loss", "L_sh", "L_ash", "val_miou")


def toy_network_config(cfg: ToyConfig) -> NetworkConfig:
    return NetworkConfig("S", num_classes=ShapesDataset.num_classes, base_channels=cfg.base_channels,
                         head_channels=cfg.head_channels, dtype=cfg.dtype)


def toy_train_run(cfg: ToyConfig | None = None, seed: int = 0, iters: int = 1000,
                  trace_path=None, progress=None):
    """Train GCNet-S-narrow on synthetic shapes.

    Returns the trained network (BN statistics finalized, ready for eval)
    and the per-iteration trace; ``val_miou`` is filled every ``val_every``
    iterations and at the end.
    """
    cfg = cfg or ToyConfig()
    if not 1 <= iters <= 2000:
        raise ValueError("iters must be in [1, 2000]")
    net = build_gcnet(toy_network_config(cfg), seed)
    data = ShapesDataset(seed + 1, cfg.size, cfg.size)
    val_x, val_y = fixed_set(seed + 2, cfg.val_images, cfg.size, cfg.size, np.dtype(cfg.dtype))
    opt = OptimizerState(base_lr=cfg.base_lr, max_iter=iters)
    params = trainable_params(net)
    trace = []
    for it in range(1, iters + 1):
        x, y = data.batch(cfg.batch, np.dtype(cfg.dtype))
        lr = opt.lr()
        loss, grads = backward(net, x, y)
        if not math.isfinite(loss.L):
            raise DivergenceError(f"loss became {loss.L} at iteration {it} (lr={lr:.4g})")
        sgd_step(opt, params, grads)
        row = dict(iter=it, lr=lr, loss=loss.L, L_sh=loss.L_sh, L_ash=loss.L_ash, val_miou=None)
        if it == iters:
            calibrate_batchnorm(net, [data.batch(cfg.batch, np.dtype(cfg.dtype))[0]
                                      for _ in range(cfg.calib_batches)])
        if it % cfg.val_every == 0 or it == iters:
            _, pred = predict(net, val_x)
            row["val_miou"] = miou(pred, val_y, ShapesDataset.num_classes)
            log.info("iter %d loss %.4f val mIoU %.4f", it, loss.L, row["val_miou"])
            if progress:
                progress(row)
        trace.append(row)
    if trace_path is not None:
        write_trace(trace, trace_path)
    net.extras["toy"] = replace(cfg)
    return net, trace


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in trace:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in TRACE_FIELDS})
