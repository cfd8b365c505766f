"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic            8 bytes  b"CRSFCKPT"
    version          u32
    metadata length  u64, then UTF-8 JSON (component, config, array count, rng info)
    per array:       u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
                     prod(dims) x float32
    crc32            u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CRSFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    component: str
    arrays: dict[str, np.ndarray]
    metadata: dict


def save_checkpoint(path, arrays: dict, component: str, config: dict | None = None,
                    extra: dict | None = None) -> None:
    arrays = {k: np.asarray(getattr(v, "data", v), dtype="<f4") for k, v in arrays.items()}
    meta = {"component": component, "config": config or {}, "num_arrays": len(arrays)}
    if extra:
        meta.update(extra)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    tmp.replace(path)


def load_checkpoint(path, component: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``component`` (if given) must match the stored one."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    if len(raw) < len(MAGIC) + 16 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch (corrupted or truncated file)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", body, off + 4)
    off += 12
    meta = json.loads(body[off:off + mlen].decode("utf-8"))
    off += mlen
    arrays = {}
    try:
        for _ in range(meta["num_arrays"]):
            (nlen,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + nlen].decode("utf-8")
            off += 4 + nlen
            (rank,) = struct.unpack_from("<I", body, off)
            dims = struct.unpack_from(f"<{rank}Q", body, off + 4)
            off += 4 + 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if off + 4 * count > len(body):
                raise CheckpointError("truncated array data")
            arrays[name] = np.frombuffer(body, dtype="<f4", count=count,
                                         offset=off).reshape(dims).astype(np.float32)
            off += 4 * count
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if off != len(body):
        raise CheckpointError("trailing bytes after last array")
    if component is not None and meta["component"] != component:
        raise CheckpointError(f"checkpoint holds a {meta['component']!r}, expected {component!r}")
    return Checkpoint(meta["component"], arrays, meta)


def apply_arrays(params: dict, arrays: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into live parameters, insisting on identical names and shapes."""
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"parameter names differ: {missing[:5]}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint "
                                  f"{arrays[name].shape} vs model {p.data.shape}")
    for name, p in params.items():
        p.data = arrays[name].astype(p.data.dtype, copy=True)
