"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   4 bytes  b"CRFK"
    version u32
    config  u32 length + UTF-8 JSON block {"config": ..., "step": ...}
    tensors repeated to EOF:
        name    u32 length + UTF-8 bytes
        rank    u32
        extents rank x u64
        data    product(extents) x f32

Tensor payloads are always float32; runs in float64 round through float32
on save. Round-trips are bitwise stable: save(load(save(x))) == save(x).
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .config import Config
from .errors import ContractError

MAGIC = b"CRFK"
VERSION = 1


def _pack_tensor(buf: io.BytesIO, name: str, array: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", array.ndim))
    for extent in array.shape:
        buf.write(struct.pack("<Q", extent))
    buf.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def save_bytes(params: dict[str, np.ndarray], config: Config, step: int = 0,
               moments: dict[str, np.ndarray] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    header = json.dumps({"config": config.to_dict(), "step": int(step)},
                        sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name in sorted(params):
        _pack_tensor(buf, name, np.asarray(params[name]))
    if moments:
        for name in sorted(moments):
            _pack_tensor(buf, name, np.asarray(moments[name]))
    return buf.getvalue()


def save(path: str, params: dict[str, np.ndarray], config: Config, step: int = 0,
         moments: dict[str, np.ndarray] | None = None):
    blob = save_bytes(params, config, step, moments)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], Config, int]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ContractError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", view, 8)
    pos = 12
    header = json.loads(bytes(view[pos:pos + header_len]).decode("utf-8"))
    pos += header_len
    config = Config.from_dict(header["config"])
    step = int(header.get("step", 0))

    arrays: dict[str, np.ndarray] = {}
    total = len(blob)
    while pos < total:
        (name_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        extents = struct.unpack_from("<" + "Q" * rank, view, pos)
        pos += 8 * rank
        count = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(extents)
        pos += 4 * count
        arrays[name] = arr.copy()
    return arrays, config, step


def load(path: str) -> tuple[dict[str, np.ndarray], Config, int]:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())


def split_moments(arrays: dict[str, np.ndarray]) -> tuple[dict, dict]:
    """Separate parameter tensors from optimizer-moment tensors."""
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    moments = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return params, moments
