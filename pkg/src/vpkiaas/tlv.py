"""Canonical tag-length-value encoding.

A record is a sequence of ``tag (u16) | length (u32) | value`` fields in
strictly increasing tag order. Decoders skip tags they do not know, which is
how optional fields are added without breaking older readers. Because every
value is length-prefixed and tags are ordered, the encoding of a record is
injective on its field values.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping

from .errors import DecodeError, TruncatedFrame

_FIELD = struct.Struct(">HI")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")


def encode_record(fields: Mapping[int, bytes]) -> bytes:
    out = bytearray()
    for tag in sorted(fields):
        value = fields[tag]
        if not 0 <= tag <= 0xFFFF:
            raise ValueError(f"tag out of range: {tag}")
        out += _FIELD.pack(tag, len(value))
        out += value
    return bytes(out)


def decode_record(data: bytes) -> dict[int, bytes]:
    fields: dict[int, bytes] = {}
    view = memoryview(data)
    pos = 0
    last = -1
    while pos < len(view):
        if pos + _FIELD.size > len(view):
            raise TruncatedFrame("truncated field header")
        tag, length = _FIELD.unpack_from(view, pos)
        pos += _FIELD.size
        if pos + length > len(view):
            raise TruncatedFrame(f"field {tag} truncated")
        if tag <= last:
            raise DecodeError(f"field {tag} out of order or repeated")
        fields[tag] = bytes(view[pos:pos + length])
        pos += length
        last = tag
    return fields


def u64(value: int) -> bytes:
    return _U64.pack(value)


def i64(value: int) -> bytes:
    return _I64.pack(value)


def read_u64(data: bytes) -> int:
    if len(data) != _U64.size:
        raise DecodeError("bad u64 length")
    return _U64.unpack(data)[0]


def read_i64(data: bytes) -> int:
    if len(data) != _I64.size:
        raise DecodeError("bad i64 length")
    return _I64.unpack(data)[0]


def text(value: str) -> bytes:
    return value.encode("utf-8")


def read_text(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid utf-8") from exc


def encode_list(items: Iterable[bytes]) -> bytes:
    items = list(items)
    out = bytearray(_U32.pack(len(items)))
    for item in items:
        out += _U32.pack(len(item))
        out += item
    return bytes(out)


def decode_list(data: bytes) -> list[bytes]:
    view = memoryview(data)
    if len(view) < _U32.size:
        raise TruncatedFrame("truncated list header")
    (count,) = _U32.unpack_from(view, 0)
    pos = _U32.size
    items = []
    for _ in range(count):
        if pos + _U32.size > len(view):
            raise TruncatedFrame("truncated list item header")
        (length,) = _U32.unpack_from(view, pos)
        pos += _U32.size
        if pos + length > len(view):
            raise TruncatedFrame("truncated list item")
        items.append(bytes(view[pos:pos + length]))
        pos += length
    if pos != len(view):
        raise DecodeError("trailing bytes after list")
    return items


def require(fields: Mapping[int, bytes], tag: int, name: str) -> bytes:
    try:
        return fields[tag]
    except KeyError:
        raise DecodeError(f"missing field {name} (tag {tag})") from None
