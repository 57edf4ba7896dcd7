"""Minimal reverse-mode differentiation over the tensor primitives.

Each op accepts plain arrays or :class:`Var` nodes. When no input is a
``Var`` the op returns a plain array and records nothing, so the same
forward code serves both inference and training.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import BatchNormStats, ShapeError


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def backward(self, grad=None):
        """Accumulate gradients into every ancestor of this node."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if isinstance(p, Var) and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if grad is None else grad
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not isinstance(parent, Var):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node.parents:
                node.grad = None  # free intermediate gradients


def value(x):
    return x.value if isinstance(x, Var) else x


def _tracked(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def conv2d(x, weight, bias, stride: int, padding: int):
    xv, wv, bv = value(x), value(weight), value(bias)
    T._check4(xv)
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"input has {xv.shape[1]} channels but kernel expects {wv.shape[1]}")
    out = T.conv2d_raw(xv, wv, bv, stride, padding)
    if not _tracked(x, weight, bias):
        return out

    def backward(g):
        c_out, c_in, k, _ = wv.shape
        n = xv.shape[0]
        oh, ow = g.shape[2:]
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        db = g2.sum(axis=1) if isinstance(bias, Var) else None
        dw = dx = None
        if k == 1 and padding == 0:
            xs = xv[:, :, ::stride, ::stride] if stride > 1 else xv
            x2 = xs.transpose(1, 0, 2, 3).reshape(c_in, -1)
            if isinstance(weight, Var):
                dw = (g2 @ x2.T).reshape(wv.shape)
            if isinstance(x, Var):
                dxs = (wv.reshape(c_out, c_in).T @ g2).reshape(c_in, n, oh, ow).transpose(1, 0, 2, 3)
                if stride > 1:
                    dx = np.zeros_like(xv)
                    dx[:, :, ::stride, ::stride] = dxs
                else:
                    dx = np.ascontiguousarray(dxs)
        else:
            if isinstance(weight, Var):
                cols, _, _ = T.im2col(xv, k, stride, padding)
                dw = (g2 @ cols.T).reshape(wv.shape)
            if isinstance(x, Var):
                dcols = wv.reshape(c_out, -1).T @ g2
                dx = T.col2im(dcols, xv.shape, k, stride, padding)
        return dx, dw, db

    return Var(out, (x, weight, bias), backward)


def batch_norm(x, stats: BatchNormStats, train: bool, gamma=None, beta=None):
    """Batch normalization; ``gamma``/``beta`` may be tracked stand-ins for the stats' arrays."""
    gamma = stats.gamma if gamma is None else gamma
    beta = stats.beta if beta is None else beta
    xv, gv, bv = value(x), value(gamma), value(beta)
    T._check4(xv)
    if xv.shape[1] != stats.channels:
        raise ShapeError(f"input has {xv.shape[1]} channels, batchnorm has {stats.channels}")
    r = lambda a: a.reshape(1, -1, 1, 1)  # noqa: E731
    if train:
        count = xv.shape[0] * xv.shape[2] * xv.shape[3]
        if count < 2:
            raise ShapeError("train-mode batchnorm needs more than one value per channel")
        mean, var = T.batch_moments(xv)
        T.update_running_stats(stats, mean, var, count)
    else:
        count = None
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    xhat = (xv - r(mean)) * r(inv_std)
    out = r(gv) * xhat + r(bv)
    if not _tracked(x, gamma, beta):
        return out

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if isinstance(gamma, Var) else None
        dbeta = g.sum(axis=(0, 2, 3)) if isinstance(beta, Var) else None
        dx = None
        if isinstance(x, Var):
            if train:
                sum_g = g.sum(axis=(0, 2, 3))
                sum_gx = (g * xhat).sum(axis=(0, 2, 3))
                dx = r(gv * inv_std / count) * (count * g - r(sum_g) - xhat * r(sum_gx))
            else:
                dx = g * r(gv * inv_std)
        return dx, dgamma, dbeta

    return Var(out, (x, gamma, beta), backward)


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0)
    if not _tracked(x):
        return out
    return Var(out, (x,), lambda g: (g * (xv > 0),))


def add(a, b):
    out = T.add(value(a), value(b))
    if not _tracked(a, b):
        return out
    return Var(out, (a, b), lambda g: (g, g))


def resize(x, out_h: int, out_w: int):
    xv = value(x)
    out = T.bilinear_resize(xv, out_h, out_w)
    if not _tracked(x):
        return out
    h, w = xv.shape[2:]

    def backward(g):
        if (h, w) == (out_h, out_w):
            return (g,)
        mh = T.resize_matrix(h, out_h, g.dtype)
        mw = T.resize_matrix(w, out_w, g.dtype)
        return (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),)

    return Var(out, (x,), backward)


def avg_pool(x, kernel, stride, padding=0):
    xv = value(x)
    out = T.avg_pool(xv, kernel, stride, padding)
    if not _tracked(x):
        return out
    (kh, kw), (sh, sw), (ph, pw) = T._pair(kernel), T._pair(stride), T._pair(padding)

    def backward(g):
        n, c, h, w = xv.shape
        oh, ow = g.shape[2:]
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), g.dtype)
        share = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += share
        return (dxp[:, :, ph:ph + h, pw:pw + w],)

    return Var(out, (x,), backward)


def global_avg_pool(x):
    xv = value(x)
    out = T.global_avg_pool(xv)
    if not _tracked(x):
        return out
    area = xv.shape[2] * xv.shape[3]
    return Var(out, (x,), lambda g: (np.broadcast_to(g / area, xv.shape).copy(),))


def concat_channels(xs):
    vals = [value(x) for x in xs]
    out = T.concat_channels(vals)
    if not _tracked(*xs):
        return out
    bounds = np.cumsum([0] + [v.shape[1] for v in vals])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return Var(out, tuple(xs), backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def masked_cross_entropy(logits, labels: np.ndarray, mask: np.ndarray):
    """Mean softmax cross-entropy over pixels where ``mask`` is true.

    The mask is treated as a constant. An empty mask gives a zero loss.
    """
    lv = value(logits)
    kept = int(mask.sum())
    if kept == 0:
        loss = np.zeros((), lv.dtype)
        if not _tracked(logits):
            return loss
        return Var(loss, (logits,), lambda g: (np.zeros_like(lv),))
    safe = np.where(mask, labels, 0)
    logp = log_softmax(lv)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * mask).sum() / kept
    if not _tracked(logits):
        return loss

    def backward(g):
        d = np.exp(logp)
        np.put_along_axis(d, safe[:, None], np.take_along_axis(d, safe[:, None], axis=1) - 1, axis=1)
        return (d * (mask[:, None] * (g / kept)),)

    return Var(loss, (logits,), backward)


def scale(x, factor: float):
    xv = value(x)
    out = xv * factor
    if not _tracked(x):
        return out
    return Var(out, (x,), lambda g: (g * factor,))


def add_scalars(a, b):
    out = value(a) + value(b)
    if not _tracked(a, b):
        return out
    return Var(out, (a, b), lambda g: (g, g))
