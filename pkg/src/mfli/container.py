"""Binary container for published artifacts (snapshots, checkpoints).

Layout: magic "MFLI", format version (u32 LE), kind (u8), created_at
(i64 LE), section count (u32 LE), section table (name, offset, length),
payload bytes, trailing CRC32 (u32 LE) over every preceding byte.
Offsets are relative to the payload start. Unknown versions are rejected.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from .errors import (
    BadMagicError,
    ChecksumError,
    TruncatedSnapshotError,
    UnsupportedVersionError,
)

MAGIC = b"MFLI"
FORMAT_VERSION = 1

KIND_FULL = 0
KIND_DELTA = 1
KIND_CHECKPOINT = 2

_HEADER = struct.Struct("<4sIBqI")  # magic, version, kind, created_at, n_sections
_ENTRY = struct.Struct("<HQQ")  # name length, offset, length
_CRC = struct.Struct("<I")


def pack_container(kind: int, created_at: int, sections: dict[str, bytes]) -> bytes:
    names = list(sections)
    table = bytearray()
    payload = bytearray()
    for name in names:
        blob = sections[name]
        encoded = name.encode("ascii")
        table += _ENTRY.pack(len(encoded), len(payload), len(blob))
        table += encoded
        payload += blob
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, created_at, len(names))
    body += bytes(table) + bytes(payload)
    return body + _CRC.pack(zlib.crc32(body))


def unpack_container(blob: bytes) -> tuple[int, int, dict[str, bytes]]:
    """Returns (kind, created_at, sections); raises typed decode errors."""
    if len(blob) < _HEADER.size + _CRC.size:
        raise TruncatedSnapshotError(f"container of {len(blob)} bytes is too short")
    magic, version, kind, created_at, n_sections = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    (stored_crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    actual_crc = zlib.crc32(blob[: -_CRC.size])
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, actual {actual_crc:#010x}"
        )
    offset = _HEADER.size
    entries: list[tuple[str, int, int]] = []
    for _ in range(n_sections):
        if offset + _ENTRY.size > len(blob) - _CRC.size:
            raise TruncatedSnapshotError("section table overruns container")
        name_len, sec_off, sec_len = _ENTRY.unpack_from(blob, offset)
        offset += _ENTRY.size
        name = blob[offset : offset + name_len].decode("ascii")
        offset += name_len
        entries.append((name, sec_off, sec_len))
    payload_start = offset
    payload_end = len(blob) - _CRC.size
    sections: dict[str, bytes] = {}
    for name, sec_off, sec_len in entries:
        start = payload_start + sec_off
        if start + sec_len > payload_end:
            raise TruncatedSnapshotError(f"section {name!r} overruns container")
        sections[name] = blob[start : start + sec_len]
    return kind, created_at, sections


def write_container(path: str | Path, kind: int, created_at: int,
                    sections: dict[str, bytes]) -> None:
    Path(path).write_bytes(pack_container(kind, created_at, sections))


def read_container(path: str | Path) -> tuple[int, int, dict[str, bytes]]:
    return unpack_container(Path(path).read_bytes())
