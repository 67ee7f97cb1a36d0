"""Versioned binary container for parameters, optimizer state and run metadata.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic b"MCBCKPT\\0"
    8       4     uint32 format version (currently 1)
    12      4     uint32 reserved, 0
    16      8     uint64 header length H
    24      H     UTF-8 JSON header, keys sorted, compact separators
    24+H    pad   zero bytes up to the next multiple of 8
    ...           array payload: float64 little-endian, row-major, back to back

The header holds ``arrays``: a list of ``{"name", "shape", "offset"}`` in
payload order, with ``offset`` counted in bytes from the payload start, plus
whatever metadata the writer adds (config echo, optimizer steps, RNG state).
Nothing time-dependent is written, so equal state gives equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCBCKPT\0"
VERSION = 1
_FIXED = struct.Struct("<8sIIQ")


class CheckpointError(ValueError):
    pass


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dict(meta)
    if "arrays" in header:
        raise CheckpointError("'arrays' is a reserved header key")
    header["arrays"] = index
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    pad = (-(_FIXED.size + len(text))) % 8
    return b"".join([_FIXED.pack(MAGIC, VERSION, 0, len(text)), text, b"\0" * pad] + blobs)


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _FIXED.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, _, hlen = _FIXED.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _FIXED.size
    if start + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise CheckpointError("checkpoint header lacks an array index")
    base = start + hlen + (-(start + hlen)) % 8
    arrays = {}
    for item in header.pop("arrays"):
        count = int(np.prod(item["shape"], dtype=int))
        lo = base + item["offset"]
        if lo + 8 * count > len(buf):
            raise CheckpointError(f"array {item['name']} runs past the end of the file")
        a = np.frombuffer(buf, dtype="<f8", count=count, offset=lo)
        arrays[item["name"]] = a.reshape(item["shape"]).astype(np.float64)
    return header, arrays


def save(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
