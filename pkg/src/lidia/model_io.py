"""LIDIAMDL model container.

Layout (little-endian): magic ``b"LIDIAMDL"``, u32 format version, u32 tensor
count, then per tensor: u16 name length, UTF-8 name, u8 rank, u32 per dim, raw
float32 payload.  The first tensor, ``__descriptor__``, encodes the
architecture; parameters follow in descriptor order, then batch-norm buffers.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .network import ArchDescriptor, LidiaNet, VARIANTS, buffer_shapes, param_shapes

MAGIC = b"LIDIAMDL"
VERSION = 1
DESCRIPTOR = "__descriptor__"
_DESC_FIELDS = ("variant", "color", "patch_side", "k", "feature_dim", "window", "share_weight_net")


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class TensorCountError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


def _encode_descriptor(desc: ArchDescriptor) -> np.ndarray:
    d = desc.to_dict()
    d["variant"] = VARIANTS.index(d["variant"])
    return np.array([float(d[f]) for f in _DESC_FIELDS], dtype=np.float32)


def _decode_descriptor(vec: np.ndarray) -> ArchDescriptor:
    if vec.shape != (len(_DESC_FIELDS),):
        raise ShapeMismatchError(f"descriptor entry has shape {vec.shape}, expected ({len(_DESC_FIELDS)},)")
    v = [int(x) for x in vec]
    if not 0 <= v[0] < len(VARIANTS):
        raise ModelFormatError(f"unknown variant code {v[0]}")
    return ArchDescriptor(
        variant=VARIANTS[v[0]], color=bool(v[1]), patch_side=v[2], k=v[3], feature_dim=v[4], window=v[5],
        share_weight_net=bool(v[6]),
    )


def dumps(model: LidiaNet) -> bytes:
    entries = [(DESCRIPTOR, _encode_descriptor(model.desc))]
    entries += [(k, t.data) for k, t in model.params.items()]
    entries += list(model.buffers.items())
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedModelError(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> LidiaNet:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("not a LIDIAMDL model file (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"model format version {version}, this build reads {VERSION}")
    entries = []
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"payload of {name!r}"), dtype="<f4").reshape(dims)
        entries.append((name, data.astype(np.float32)))
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    if not entries or entries[0][0] != DESCRIPTOR:
        raise ModelFormatError("first entry must be the architecture descriptor")
    desc = _decode_descriptor(entries[0][1])
    pshapes, bshapes = param_shapes(desc), buffer_shapes(desc)
    expected = {**pshapes, **bshapes}
    if len(entries) - 1 != len(expected):
        raise TensorCountError(f"file holds {len(entries) - 1} tensors, architecture needs {len(expected)}")
    got = dict(entries[1:])
    for name, shape in expected.items():
        if name not in got:
            raise TensorCountError(f"tensor {name!r} missing from model file")
        if got[name].shape != tuple(shape):
            raise ShapeMismatchError(f"tensor {name!r} has shape {got[name].shape}, expected {tuple(shape)}")
    return LidiaNet(desc, {k: got[k].copy() for k in pshapes}, {k: got[k].copy() for k in bshapes})


def save_model(model: LidiaNet, path) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(dumps(model))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_model(path) -> LidiaNet:
    return loads(Path(path).read_bytes())
