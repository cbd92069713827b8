"""Shared low-level layout for binary containers.

Both on-disk formats (.eem models, .eekey keys) use the same envelope:
magic bytes, a u32 little-endian header length, a UTF-8 JSON header, then a
format-specific payload. This module owns the envelope; payload semantics
stay with the owning module.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

from .errors import FormatError

_HEADER_LEN_FMT = "<I"


def canonical_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path: str | Path, magic: bytes, header: dict, payload: bytes) -> None:
    header_bytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack(_HEADER_LEN_FMT, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes, int]:
    """Parse the envelope. Returns (header, payload, payload byte offset)."""
    data = Path(path).read_bytes()
    if len(data) < len(magic):
        raise FormatError("file shorter than magic", offset=len(data))
    if data[: len(magic)] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", offset=0)
    if len(data) < len(magic) + 4:
        raise FormatError("file truncated inside header length field", offset=len(data))
    (header_len,) = struct.unpack_from(_HEADER_LEN_FMT, data, len(magic))
    header_start = len(magic) + 4
    header_end = header_start + header_len
    if header_end > len(data):
        raise FormatError("file truncated inside header", offset=len(data))
    try:
        header = json.loads(data[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON ({exc})", offset=header_start) from exc
    if not isinstance(header, dict):
        raise FormatError("header JSON is not an object", offset=header_start)
    return header, data[header_end:], header_end
