"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"PSVC" | u16 version | u32 header_len | header (UTF-8 JSON) | payload | u32 crc32(payload)

The header is ``{"entries": [{name, dtype, shape, byte_offset, byte_len, trainable}, ...],
"meta": {...}}``; offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from petlsv.errors import CheckpointChecksumError, CheckpointHeaderError, CheckpointTruncatedError
from petlsv.numcore.params import ParamGroup, check_unique

MAGIC = b"PSVC"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def dumps(groups, meta=None) -> bytes:
    check_unique(groups)
    entries, chunks, offset = [], [], 0
    for g in groups:
        dtype = _NAMES.get(g.data.dtype)
        if dtype is None:
            raise TypeError(f"{g.name}: unsupported dtype {g.data.dtype}")
        raw = np.ascontiguousarray(g.data, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            {
                "name": g.name,
                "dtype": dtype,
                "shape": list(g.data.shape),
                "byte_offset": offset,
                "byte_len": len(raw),
                "trainable": g.trainable,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    return b"".join(
        [
            MAGIC,
            struct.pack("<HI", VERSION, len(header)),
            header,
            payload,
            struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF),
        ]
    )


def loads(blob: bytes):
    """Parse checkpoint bytes into ``(groups, meta)``."""
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointHeaderError("bad magic bytes; not a PSVC checkpoint")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointHeaderError(f"unsupported checkpoint version {version}")
    start = 10 + hlen
    if len(blob) < start:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(blob[10:start].decode("utf-8"))
        entries = header["entries"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointHeaderError(f"unreadable header: {exc}") from None
    total = sum(int(e["byte_len"]) for e in entries)
    if len(blob) < start + total + 4:
        raise CheckpointTruncatedError(
            f"payload truncated: need {total + 4} bytes after header, have {len(blob) - start}"
        )
    payload = blob[start : start + total]
    (crc,) = struct.unpack_from("<I", blob, start + total)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointChecksumError("payload checksum mismatch")
    groups = []
    for e in entries:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointHeaderError(f"{e['name']}: unknown dtype {e['dtype']!r}")
        off, n = int(e["byte_offset"]), int(e["byte_len"])
        arr = np.frombuffer(payload[off : off + n], dtype=dt).reshape(e["shape"])
        groups.append(ParamGroup(e["name"], arr.astype(dt.newbyteorder("="), copy=True), bool(e["trainable"])))
    return groups, header.get("meta", {})


def save_checkpoint(groups, path, meta=None) -> None:
    Path(path).write_bytes(dumps(groups, meta))


def load_checkpoint(path, with_meta: bool = False):
    groups, meta = loads(Path(path).read_bytes())
    return (groups, meta) if with_meta else groups
