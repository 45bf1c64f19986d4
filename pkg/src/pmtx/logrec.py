"""On-media framing of log records.

Every record starts on a block boundary with a 24-byte header::

    magic u16 | kind u8 | mode u8 | length u32 | txn u32 | seq u32 | aux u32 | crc32 u32

``length`` covers header and payload.  ``aux`` is the object address for
undo/redo records and ``part << 16 | nparts`` for commit markers.  The CRC
covers the header (with the crc field zeroed) and the payload, so a record
that was only partly persisted before a crash is simply not recognised.
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

from .checksum import BLOCK, DATA_BYTES
from .errors import RecoveryError

MAGIC = 0xA7C4
HEADER = struct.Struct("<HBBIIIII")
HEADER_SIZE = HEADER.size  # 24
MAX_RECORD = DATA_BYTES
MAX_PAYLOAD = MAX_RECORD - HEADER_SIZE
_CRC_AT = HEADER_SIZE - 4
_IMAGE_ENTRY = struct.Struct("<II")   # addr, len
_META_ENTRY = struct.Struct("<I")     # addr, followed by one block


class RecordKind(enum.IntEnum):
    UNDO = 1
    REDO = 2
    LCOMMIT = 3
    PCOMMIT = 4


MODE_CODES = {"undo": 0, "redo": 1}
MODE_NAMES = {v: k for k, v in MODE_CODES.items()}


@dataclass
class LogRecord:
    addr: int
    kind: RecordKind
    mode: str
    length: int
    txn: int
    seq: int
    aux: int
    payload: bytes

    @property
    def part(self) -> tuple[int, int]:
        return self.aux >> 16, self.aux & 0xFFFF


def encode(kind: RecordKind, mode: str, txn: int, seq: int, aux: int, payload: bytes) -> bytes:
    length = HEADER_SIZE + len(payload)
    if length > MAX_RECORD:
        raise ValueError(f"log record of {length} bytes exceeds {MAX_RECORD}")
    head = bytearray(HEADER.pack(MAGIC, int(kind), MODE_CODES[mode], length, txn, seq, aux, 0))
    crc = zlib.crc32(payload, zlib.crc32(head))
    struct.pack_into("<I", head, _CRC_AT, crc)
    return bytes(head) + payload


def decode_at(buf, offset: int, base_addr: int, limit: int) -> LogRecord | None:
    """Decode the record at ``buf[offset:]`` or return None if there is none.

    ``limit`` is the end of the region a record may occupy.  A record with a
    valid CRC but impossible framing raises :class:`RecoveryError`.
    """
    if offset + HEADER_SIZE > limit:
        return None
    magic, kind, mode, length, txn, seq, aux, crc = HEADER.unpack_from(buf, offset)
    if magic != MAGIC or length < HEADER_SIZE or length > MAX_RECORD or offset + length > limit:
        if magic == MAGIC and offset + HEADER_SIZE <= limit and length and _crc_ok(buf, offset, min(length, limit - offset), crc):
            raise RecoveryError(f"log record at {base_addr + offset:#x} has impossible length {length}")
        return None
    if not _crc_ok(buf, offset, length, crc):
        return None
    if kind not in RecordKind._value2member_map_ or mode not in MODE_NAMES:
        raise RecoveryError(f"log record at {base_addr + offset:#x} has unknown kind/mode {kind}/{mode}")
    payload = bytes(buf[offset + HEADER_SIZE:offset + length])
    return LogRecord(base_addr + offset, RecordKind(kind), MODE_NAMES[mode], length, txn, seq, aux, payload)


def _crc_ok(buf, offset, length, crc) -> bool:
    head = bytearray(buf[offset:offset + HEADER_SIZE])
    head[_CRC_AT:_CRC_AT + 4] = b"\0\0\0\0"
    return zlib.crc32(bytes(buf[offset + HEADER_SIZE:offset + length]), zlib.crc32(head)) == crc


def scan_region(buf, base_addr: int, limit: int) -> list[LogRecord]:
    """All intact records in ``buf[:limit]`` (records start on block boundaries)."""
    out = []
    off = 0
    while off < limit:
        rec = decode_at(buf, off, base_addr, limit)
        if rec is None:
            off += BLOCK
        else:
            out.append(rec)
            off += -(-rec.length // BLOCK) * BLOCK
    return out


# -- marker payloads ----------------------------------------------------------

def pack_images(entries) -> list[bytes]:
    """Split (addr, bytes) images into payloads that each fit one record."""
    payloads, cur = [], bytearray()
    for addr, data in entries:
        data = bytes(data)
        pos = 0
        while pos < len(data) or (not data and pos == 0):
            room = MAX_PAYLOAD - len(cur) - _IMAGE_ENTRY.size
            if room <= 0:
                payloads.append(bytes(cur))
                cur = bytearray()
                continue
            chunk = data[pos:pos + room]
            cur += _IMAGE_ENTRY.pack(addr + pos, len(chunk)) + chunk
            pos += len(chunk)
            if not data:
                break
    if cur or not payloads:
        payloads.append(bytes(cur))
    return payloads


def unpack_images(payload: bytes) -> list[tuple[int, bytes]]:
    out, pos = [], 0
    while pos < len(payload):
        addr, n = _IMAGE_ENTRY.unpack_from(payload, pos)
        pos += _IMAGE_ENTRY.size
        out.append((addr, payload[pos:pos + n]))
        pos += n
    if pos != len(payload):
        raise RecoveryError("truncated image entry in commit marker")
    return out


def pack_meta(entries) -> list[bytes]:
    """Split (addr, 64-byte block) metadata writes into record payloads."""
    per = MAX_PAYLOAD // (_META_ENTRY.size + BLOCK)
    entries = list(entries)
    if not entries:
        return [b""]
    return [b"".join(_META_ENTRY.pack(a) + bytes(d) for a, d in entries[i:i + per])
            for i in range(0, len(entries), per)]


def unpack_meta(payload: bytes) -> list[tuple[int, bytes]]:
    step = _META_ENTRY.size + BLOCK
    if len(payload) % step:
        raise RecoveryError("malformed metadata entry in commit marker")
    return [(_META_ENTRY.unpack_from(payload, i)[0], payload[i + 4:i + step])
            for i in range(0, len(payload), step)]
