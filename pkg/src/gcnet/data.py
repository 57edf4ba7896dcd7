"""Procedural segmentation data: colored geometric shapes on textured backgrounds."""
from __future__ import annotations

import numpy as np

CLASSES = ("background", "circle", "square", "triangle")
MEAN, STD = 0.5, 0.25
# each shape kind is drawn from its own hue family so the task is learnable at desk scale
HUES = np.array([[0.9, 0.2, 0.2], [0.2, 0.85, 0.25], [0.2, 0.35, 0.95]])
HUE_JITTER = 0.1
RADIUS = (0.2, 0.35)  # shape size as a fraction of the shorter image side
MAX_SHAPES = 2


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, 3)
    tint = rng.uniform(-0.1, 0.1, 3)
    grad = base[:, None, None] + tint[:, None, None] * (yy + xx - 1.0)
    freq = rng.uniform(8, 24)
    theta = rng.uniform(0, np.pi)
    stripes = 0.06 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) * np.pi)
    noise = rng.normal(0, 0.04, (3, h, w))
    return grad + stripes + noise


def _mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = rng.uniform(*RADIUS) * min(h, w)
    cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    ang = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(ang), np.sin(ang)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "square":
        half = r * 0.85
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle with circumradius r: three half-planes
    inside = np.ones((h, w), bool)
    for k in range(3):
        a = ang + 2 * np.pi * k / 3
        inside &= (np.cos(a) * dx + np.sin(a) * dy) <= r / 2
    return inside


def make_sample(rng: np.random.Generator, h: int, w: int, max_shapes: int | None = None):
    """One (3, h, w) image in [0, 1] and its (h, w) class map; later shapes occlude earlier ones."""
    max_shapes = MAX_SHAPES if max_shapes is None else max_shapes
    img = _background(rng, h, w)
    label = np.zeros((h, w), np.int64)
    for _ in range(rng.integers(1, max_shapes + 1)):
        cls = int(rng.integers(1, len(CLASSES)))
        m = _mask(CLASSES[cls], rng, h, w)
        color = np.clip(HUES[cls - 1] + rng.uniform(-HUE_JITTER, HUE_JITTER, 3), 0, 1)
        shade = 1.0 + 0.1 * rng.normal(size=(h, w))
        img = np.where(m, color[:, None, None] * shade, img)
        label[m] = cls
    return np.clip(img, 0, 1), label


def normalize(img: np.ndarray) -> np.ndarray:
    return (img - MEAN) / STD


class ShapesDataset:
    """Deterministic stream of batches derived from one seed."""

    num_classes = len(CLASSES)

    def __init__(self, seed: int, h: int = 64, w: int = 64, flip: bool = True):
        self.rng = np.random.default_rng(seed)
        self.h, self.w, self.flip = h, w, flip

    def batch(self, n: int, dtype=np.float32):
        imgs, labels = [], []
        for _ in range(n):
            img, lab = make_sample(self.rng, self.h, self.w)
            if self.flip and self.rng.random() < 0.5:
                img, lab = img[:, :, ::-1], lab[:, ::-1]
            imgs.append(img)
            labels.append(lab)
        x = normalize(np.stack(imgs)).astype(dtype)
        return np.ascontiguousarray(x), np.ascontiguousarray(np.stack(labels))


def fixed_set(seed: int, n: int, h: int = 64, w: int = 64, dtype=np.float32):
    return ShapesDataset(seed, h, w, flip=False).batch(n, dtype)
