"""Record framing, the 8-byte metadata word, and NVM write-cost formulas.

Framed record layout (all integers little-endian):

    tag(1) | crc32(4) | key_len(2) | value_len(4) | key | value

Bit 0 of the tag byte marks a delete marker; markers carry no value
bytes and value_len is 0.  The checksum is CRC-32 (the zlib polynomial)
computed over the whole framed record with the crc field zeroed, so a
reader can validate a record pulled blindly out of a byte window.

The metadata word packs two log offsets and a flip bit into eight
bytes, most significant bit first:

    new_tag(1) | offset_a(31) | offset_b(31) | reserved(1)

With new_tag=1 the new offset lives in offset_a and the old one in
offset_b; with new_tag=0 the roles are swapped.  Flipping the tag on
update rewrites only one offset field, which keeps the store friendly
to data-comparison writes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

HEADER = struct.Struct("<BIHI")          # tag, crc, key_len, value_len
HEADER_LEN = HEADER.size                 # 11
DELETE_BIT = 0x01

WORD = struct.Struct("<Q")
OFFSET_MASK = 0x7FFF_FFFF
#: offset value that never addresses a real record (chains stay shorter)
OFFSET_SENTINEL = OFFSET_MASK

_crc32 = zlib.crc32


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    key: bytes
    value: bytes | None              # None for delete markers
    is_delete: bool
    length: int                      # framed length in bytes


def record_len(key_len: int, value_len: int) -> int:
    return HEADER_LEN + key_len + value_len


def encode_record(key: bytes, value: bytes | None) -> bytes:
    """Frame one key-value pair; value=None produces a delete marker."""
    if not key:
        raise CodecError("empty key")
    if len(key) > 0xFFFF:
        raise CodecError("key too long")
    tag = DELETE_BIT if value is None else 0
    body = value or b""
    if len(body) > 0xFFFF_FFFF:
        raise CodecError("value too long")
    buf = bytearray(HEADER.pack(tag, 0, len(key), len(body)))
    buf += key
    buf += body
    crc = _crc32(bytes(buf))
    buf[1:5] = struct.pack("<I", crc)
    return bytes(buf)


def verify_record(buf, base: int = 0) -> Record | None:
    """Validate and decode the record starting at buf[base].

    Returns None for anything that does not checksum: short windows,
    torn writes, zeroed space.  The window may extend past the record.
    """
    view = memoryview(buf)
    if base < 0 or base + HEADER_LEN > len(view):
        return None
    tag, crc, key_len, value_len = HEADER.unpack_from(view, base)
    if tag & ~DELETE_BIT:
        return None
    if key_len == 0:
        return None
    is_delete = bool(tag & DELETE_BIT)
    if is_delete and value_len:
        return None
    total = HEADER_LEN + key_len + value_len
    if base + total > len(view):
        return None
    frame = bytearray(view[base:base + total])
    frame[1:5] = b"\x00\x00\x00\x00"
    if _crc32(bytes(frame)) != crc:
        return None
    key = bytes(view[base + HEADER_LEN:base + HEADER_LEN + key_len])
    value = None if is_delete else bytes(
        view[base + HEADER_LEN + key_len:base + total])
    return Record(key=key, value=value, is_delete=is_delete, length=total)


# ---- 8-byte metadata word ----

def pack_word(new_tag: int, new_off: int, old_off: int) -> int:
    if new_tag not in (0, 1):
        raise CodecError("tag must be 0 or 1")
    if not (0 <= new_off <= OFFSET_MASK and 0 <= old_off <= OFFSET_MASK):
        raise CodecError("offset exceeds 31 bits")
    if new_tag:
        a, b = new_off, old_off
    else:
        a, b = old_off, new_off
    return (new_tag << 63) | (a << 32) | (b << 1)


def unpack_word(word: int) -> tuple[int, int, int]:
    """Return (new_tag, new_off, old_off)."""
    tag = (word >> 63) & 1
    a = (word >> 32) & OFFSET_MASK
    b = (word >> 1) & OFFSET_MASK
    return (tag, a, b) if tag else (tag, b, a)


def flip_word(word: int, new_off: int) -> int:
    """Word after an update: tag flipped, previous new offset becomes old."""
    tag, prev_new, _ = unpack_word(word)
    return pack_word(tag ^ 1, new_off, prev_new)


def word_to_bytes(word: int) -> bytes:
    return WORD.pack(word)


def word_from_bytes(raw: bytes) -> int:
    return WORD.unpack(raw)[0]


# ---- per-operation NVM write cost ----
#
# Closed-form accounted bytes per operation; pair_size is the size of
# one key-value pair (key plus value).  These count logical payload
# bytes (framing length fields excluded), which is why a store keeps a
# separate actual-bytes counter.

SCHEMES = ("erda", "redo", "raw")
OPS = ("create", "update", "delete")


def nvm_write_cost(scheme: str, op: str, key_size: int, pair_size: int) -> int:
    if scheme not in SCHEMES:
        raise CodecError(f"unknown scheme {scheme!r}")
    if op not in OPS:
        raise CodecError(f"unknown op {op!r}")
    if scheme == "erda":
        if op == "create":
            return key_size + 10 + pair_size
        if op == "update":
            return 9 + pair_size
        return key_size + 9
    # redo logging and read-after-write share one cost table
    if op == "create":
        return key_size + 12 + 2 * pair_size
    if op == "update":
        return 4 + 2 * pair_size
    return key_size + 8
