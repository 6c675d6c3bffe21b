"""Versioned little-endian binary containers with CRC32 integrity checks.

Every binary artifact in this project (per-image hierarchical representations,
field checkpoints, mask stacks, point clouds) shares one container layout:

    magic(8 bytes) | version u32 | endian_tag u32 | header_len u32 |
    header bytes | payload_len u64 | payload bytes | crc32 u32

The CRC covers header and payload. Readers reject wrong magic, unknown
versions, a foreign endianness tag, truncated files, and CRC mismatches.
Writes go through a temp file + rename so concurrent readers never observe
a half-written container.
"""

from __future__ import annotations

import os
import struct
import zlib

ENDIAN_TAG = 0x01020304


class ContainerError(ValueError):
    """Malformed, corrupt, or incompatible container file."""


def pack_container(magic: bytes, version: int, header: bytes, payload: bytes) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    crc = zlib.crc32(header)
    crc = zlib.crc32(payload, crc)
    parts = [
        magic,
        struct.pack("<III", version, ENDIAN_TAG, len(header)),
        header,
        struct.pack("<Q", len(payload)),
        payload,
        struct.pack("<I", crc),
    ]
    return b"".join(parts)


def unpack_container(blob: bytes, magic: bytes, version: int) -> tuple[bytes, bytes]:
    """Validate and split a container blob into (header, payload)."""
    if len(blob) < 8 + 12:
        raise ContainerError("container truncated")
    if blob[:8] != magic:
        raise ContainerError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    got_version, endian, header_len = struct.unpack_from("<III", blob, 8)
    if got_version != version:
        raise ContainerError(f"unsupported version {got_version}, expected {version}")
    if endian != ENDIAN_TAG:
        raise ContainerError("endianness tag mismatch")
    off = 20
    header = blob[off : off + header_len]
    if len(header) != header_len:
        raise ContainerError("container truncated in header")
    off += header_len
    if len(blob) < off + 8:
        raise ContainerError("container truncated at payload length")
    (payload_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    payload = blob[off : off + payload_len]
    if len(payload) != payload_len:
        raise ContainerError("container truncated in payload")
    off += payload_len
    if len(blob) < off + 4:
        raise ContainerError("container truncated at checksum")
    (want_crc,) = struct.unpack_from("<I", blob, off)
    crc = zlib.crc32(header)
    crc = zlib.crc32(payload, crc)
    if crc != want_crc:
        raise ContainerError("checksum mismatch")
    return header, payload


def write_container(path, magic: bytes, version: int, header: bytes, payload: bytes) -> None:
    blob = pack_container(magic, version, header, payload)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_container(path, magic: bytes, version: int) -> tuple[bytes, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    return unpack_container(blob, magic, version)
