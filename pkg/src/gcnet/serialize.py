"""GCWT binary model files.

Layout (little-endian)::

    magic      4 bytes  b"GCWT"
    version    u32
    form       u8       0 = training, 1 = inference
    variant    u8       ASCII 'S', 'M' or 'L'
    num_classes u32
    base C     u32
    count      u32      number of tensors
    per tensor:
        name length u16, UTF-8 name, rank u8, dims u32 * rank,
        payload f32 * prod(dims)

Structural hyperparameters that the header does not carry (paths per
block, head width, pyramid pooling kind and width, auxiliary head) are
recovered from tensor names and shapes.
"""
from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .network import Network, NetworkConfig, build_gcnet, contract_network, named_tensors

MAGIC = b"GCWT"
VERSION = 1
FORMS = {"training": 0, "inference": 1}
_HEADER = struct.Struct("<4sIBBIII")


class FormatError(ValueError):
    """Raised for malformed, truncated or mismatched model files."""


def encode(net: Network) -> bytes:
    cfg = net.config
    tensors = list(named_tensors(net))
    names = [n for n, _, _ in tensors]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    parts = [_HEADER.pack(MAGIC, VERSION, FORMS[net.form], ord(cfg.variant),
                          cfg.num_classes, cfg.C, len(tensors))]
    for name, arr, _ in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_model(net: Network, path) -> None:
    Path(path).write_bytes(encode(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"file truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_tensors(buf: bytes):
    r = _Reader(buf)
    magic, version, form, variant, num_classes, base_c, count = r.unpack(_HEADER.format)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a GCWT model file")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    forms = {v: k for k, v in FORMS.items()}
    if form not in forms:
        raise FormatError(f"unknown form byte {form}")
    variant = chr(variant)
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not UTF-8: {e}") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    header = dict(form=forms[form], variant=variant, num_classes=num_classes, base_channels=base_c)
    return header, tensors


def _infer_config(header: dict, tensors: dict, dtype) -> NetworkConfig:
    try:
        head_mid = tensors["head.conv3x3.conv.weight"].shape[0]
        ppm_width = tensors["ppm.scale0.conv.weight"].shape[0]
    except KeyError as e:
        raise FormatError(f"missing required tensor {e}") from None
    ppm_kind = "dappm" if "ppm.process0.conv.weight" in tensors else "simple"
    paths = None
    pat = re.compile(r"^s2\.0\.path(\d+)\.conv0\.conv\.weight$")
    n3 = sum(1 for k, v in tensors.items() if pat.match(k) and v.shape[-1] == 3)
    if n3:
        paths = n3
    try:
        return NetworkConfig(header["variant"], header["num_classes"], header["base_channels"],
                             paths, head_mid, ppm_kind, ppm_width,
                             aux_head="aux_head.conv1x1.weight" in tensors, dtype=np.dtype(dtype).name)
    except ValueError as e:
        raise FormatError(str(e)) from None


def decode(buf: bytes, dtype="float32") -> Network:
    header, tensors = decode_tensors(buf)
    cfg = _infer_config(header, tensors, dtype)
    net = build_gcnet(cfg, seed=None, calibrate=False)
    if header["form"] == "inference":
        net = contract_network(net)
    expected = {name: arr for name, arr, _ in named_tensors(net)}
    missing = expected.keys() - tensors.keys()
    extra = tensors.keys() - expected.keys()
    if missing or extra:
        raise FormatError(f"tensor set mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, arr in expected.items():
        src = tensors[name]
        if src.shape != arr.shape:
            raise FormatError(f"{name}: stored shape {src.shape}, expected {arr.shape}")
        arr[...] = src
    return net


def load_model(path, dtype="float32") -> Network:
    return decode(Path(path).read_bytes(), dtype)
