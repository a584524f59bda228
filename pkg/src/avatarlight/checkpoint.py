"""Binary checkpoint files.

Layout (all little-endian)::

    b"PHYN" | u32 version | u32 n_entries
    per entry: u32 kind tag | u32 len + utf-8 name | u32 len + utf-8 JSON meta
               | u32 ndim | u32 dims... | f32 payload
    u32 CRC32 of everything before it

Maps are stored with their constructor config in ``meta`` so they can be rebuilt.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .fields import NeuralMap

MAGIC = b"PHYN"
VERSION = 1
KIND_TAGS = {"geo": 1, "dtx": 2, "alb": 3, "rgh": 4, "tensor": 16}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, maps: dict | None = None, tensors: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write maps (name -> NeuralMap) and extra tensors (name -> array).

    ``meta`` is stored as a JSON blob under the reserved tensor name ``__meta__``.
    """
    entries = []
    for name, m in (maps or {}).items():
        entries.append((KIND_TAGS[m.kind], name, m.config, m.params))
    for name, arr in (tensors or {}).items():
        entries.append((KIND_TAGS["tensor"], name, {}, np.asarray(arr)))
    if meta is not None:
        entries.append((KIND_TAGS["tensor"], "__meta__", meta, np.zeros(0)))

    buf = bytearray(MAGIC + struct.pack("<II", VERSION, len(entries)))
    for tag, name, m, arr in entries:
        arr = np.asarray(arr)
        buf += struct.pack("<I", tag)
        buf += _pack_str(name)
        buf += _pack_str(json.dumps(m, sort_keys=True))
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class Checkpoint:
    def __init__(self, maps: dict, tensors: dict, meta: dict):
        self.maps = maps
        self.tensors = tensors
        self.meta = meta

    def __contains__(self, name):
        return name in self.maps or name in self.tensors


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12

    def read_u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", data, off)
        off += 4
        return v

    def read_str():
        nonlocal off
        k = read_u32()
        s = data[off:off + k].decode("utf-8")
        off += k
        return s

    maps, tensors, meta = {}, {}, {}
    for _ in range(n):
        tag = read_u32()
        if tag not in TAG_KINDS:
            raise CheckpointError(f"{path}: unknown entry tag {tag}")
        name = read_str()
        m = json.loads(read_str())
        ndim = read_u32()
        shape = tuple(read_u32() for _ in range(ndim))
        count = int(np.prod(shape)) if ndim else 1
        if ndim == 1 and shape[0] == 0:
            count = 0
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 4 * count
        kind = TAG_KINDS[tag]
        if name == "__meta__":
            meta = m
        elif kind == "tensor":
            tensors[name] = arr
        else:
            cfg = dict(m)
            if cfg.get("kind") != kind:
                raise CheckpointError(f"{path}: entry {name!r} tag/config kind mismatch")
            nm = NeuralMap(**cfg)
            if nm.n_params != arr.size:
                raise CheckpointError(f"{path}: entry {name!r} has {arr.size} values, map needs {nm.n_params}")
            nm.params[:] = arr
            maps[name] = nm
    if off != len(data) - 4:
        raise CheckpointError(f"{path}: trailing bytes after entries")
    return Checkpoint(maps, tensors, meta)
