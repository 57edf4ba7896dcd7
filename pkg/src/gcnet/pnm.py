"""Binary PPM (P6) reading and PGM (P5) / PPM writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """First ``count`` header tokens (skipping comments) and the payload offset."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i >= len(buf):
            raise PNMError("truncated header")
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1  # one whitespace byte separates header and raster


def decode_ppm(buf: bytes) -> np.ndarray:
    """(h, w, 3) uint8 array from P6 bytes."""
    (magic, w, h, maxval), off = _tokens(buf, 4)
    if magic != b"P6":
        raise PNMError(f"expected P6 binary PPM, got {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PNMError("non-integer header field") from None
    if maxval != 255:
        raise PNMError(f"only maxval 255 is supported, got {maxval}")
    n = w * h * 3
    data = buf[off:off + n]
    if len(data) != n:
        raise PNMError(f"raster truncated: {len(data)} of {n} bytes")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise PNMError("PGM needs a 2-D array")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PNMError("PPM needs an (h, w, 3) array")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes()


def write_pgm(path, img) -> None:
    Path(path).write_bytes(encode_pgm(img))


def write_ppm(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))
