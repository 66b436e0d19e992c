"""Versioned little-endian binary checkpoints.

Layout::

    b"G4AP"                      magic
    u32 version
    u32 n, n bytes               config block (canonical UTF-8 JSON)
    u32 count                    number of tensor records
    count x record:
        u32 n, n bytes           name
        u8 dtype tag             1 = float64, 2 = float32
        u32 rank, rank x u64     extents
        raw little-endian data
    u32 crc32                    of every preceding byte
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .exceptions import CorruptionError, FormatError
from .model import ModelBundle, ModelConfig, attach_adapters, backbone_shapes, parameter_shapes
from .tensor import Tensor

MAGIC = b"G4AP"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(config_block: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = _canonical_json(config_block)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in DTYPE_TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", DTYPE_TAGS[le], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 8:
        raise CorruptionError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}; not a checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < 12:
        raise CorruptionError("checkpoint is truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    r = _Reader(data[:-4])
    r.take(8)
    (n,) = r.unpack("<I")
    try:
        block = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"config block unreadable: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode("utf-8", errors="replace")
        tag, rank = r.unpack("<BI")
        if tag not in TAG_DTYPES:
            raise CorruptionError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}Q")
        dt = TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise CorruptionError("trailing bytes after the last tensor record")
    if zlib.crc32(r.data) != crc:
        raise CorruptionError("checksum mismatch")
    return block, tensors


def _atomic_write(path: Path, payload: bytes) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def save_checkpoint(bundle: ModelBundle, path, backbone_only: bool = False) -> Path:
    path = Path(path)
    names = list(backbone_shapes(bundle.config)) if backbone_only else list(bundle.params)
    block = {
        "config": bundle.config.to_dict(),
        "backbone_only": backbone_only,
        "frozen": [n for n in bundle.frozen if n in names],
        "trainable": [n for n in bundle.trainable if n in names],
        "adapters": {} if backbone_only else {
            name: {"base_ref": ad.base_ref, "r": ad.rank, "alpha": ad.alpha, "init_std": ad.init_std,
                   "X": f"{name}.lora.X", "Y": f"{name}.lora.Y"}
            for name, ad in bundle.adapters.items()
        },
        "metadata": bundle.metadata,
    }
    return _atomic_write(path, encode(block, {n: bundle.params[n].data for n in names}))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path) -> ModelBundle:
    """Full bundle from a checkpoint written by :func:`save_checkpoint`."""
    block, tensors = read_checkpoint(path)
    if block.get("backbone_only"):
        raise FormatError("checkpoint holds only backbone weights; pass it to build() instead")
    config = ModelConfig.from_dict(block["config"])
    expected = parameter_shapes(config)
    if set(tensors) != set(expected):
        raise CorruptionError("tensor names do not match the stored configuration")
    bundle = ModelBundle(config, {n: Tensor(tensors[n]) for n in expected}, {}, block.get("metadata"))
    if bundle.frozen != block["frozen"] or bundle.trainable != block["trainable"]:
        raise CorruptionError("stored partition disagrees with the configuration")
    attach_adapters(bundle)
    return bundle


def load_backbone(path) -> tuple[dict[str, np.ndarray], dict]:
    """Backbone weights and the config block of any checkpoint."""
    block, tensors = read_checkpoint(path)
    config = ModelConfig.from_dict(block["config"])
    names = backbone_shapes(config)
    return {n: tensors[n] for n in names}, block
