"""Named-array container: the on-disk format for checkpoints and embedding caches.

Layout (all integers little-endian):

    magic               5 bytes   b"FLAB1"
    metadata length     u32
    metadata            UTF-8 JSON, canonical (sorted keys, compact separators)
    array count         u32
    per array, in ascending name order:
        name length     u16
        name            UTF-8
        dtype tag       4 bytes   (b"f32 ")
        ndim            u8
        dims            ndim * u32
        payload         little-endian float32, C order

Canonical ordering and canonical JSON make save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"FLAB1"
DTYPE_F32 = b"f32 "


def _canonical_json(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def save_container(path, arrays: dict, metadata: dict | None = None) -> None:
    """Write named float32 arrays plus a JSON metadata block.

    Array values are converted to float32; names must be unique (dict keys)
    and non-empty.
    """
    path = Path(path)
    meta_bytes = _canonical_json(metadata or {})
    chunks = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        if not name:
            raise InputError("array names must be non-empty")
        arr = np.asarray(arrays[name], dtype=np.float32)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise InputError(f"array name too long: {name!r}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(DTYPE_F32)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f4").tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_container(path) -> tuple[dict, dict]:
    """Read a container file; returns (arrays, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise InputError(f"{path}: not a FLAB1 container")
    off = 5
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    metadata = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        tag = buf[off:off + 4]
        off += 4
        if tag != DTYPE_F32:
            raise InputError(f"{path}: unknown dtype tag {tag!r} for {name!r}")
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
        off += 4 * ndim
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n_items, offset=off).reshape(shape)
        off += 4 * n_items
        arrays[name] = arr.copy()
    if off != len(buf):
        raise InputError(f"{path}: trailing bytes after last array")
    return arrays, metadata
