"""Canonical serialization and content digests.

Every protocol object maps to one canonical byte string: length-prefixed
fields in declaration order, little-endian integers, maps sorted by their
encoded keys.  Digests are SHA-256 over those bytes, so equal digests mean
equal canonical bytes (a per-run registry turns the astronomically
unlikely collision into a hard failure instead of silent corruption).

A JSON-ish debug encoding is also provided for traces and golden files.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from fractions import Fraction
from typing import Any

DIGEST_BYTES = 32

_TAG_NONE = b"\x00"
_TAG_BOOL = b"\x01"
_TAG_INT = b"\x02"
_TAG_STR = b"\x03"
_TAG_BYTES = b"\x04"
_TAG_LIST = b"\x05"
_TAG_MAP = b"\x06"
_TAG_FRACTION = b"\x07"
_TAG_OBJ = b"\x08"


class CollisionError(RuntimeError):
    """Two distinct canonical encodings produced the same digest."""


def _u32(value: int) -> bytes:
    return value.to_bytes(4, "little")


def encode(obj: Any) -> bytes:
    """Canonical bytes for a protocol value."""
    if obj is None:
        return _TAG_NONE
    if isinstance(obj, bool):
        return _TAG_BOOL + (b"\x01" if obj else b"\x00")
    if isinstance(obj, int):
        return _TAG_INT + obj.to_bytes(8, "little", signed=True)
    if isinstance(obj, str):
        raw = obj.encode("utf-8")
        return _TAG_STR + _u32(len(raw)) + raw
    if isinstance(obj, (bytes, bytearray)):
        return _TAG_BYTES + _u32(len(obj)) + bytes(obj)
    if isinstance(obj, Fraction):
        return _TAG_FRACTION + encode(obj.numerator) + encode(obj.denominator)
    if isinstance(obj, enum.Enum):
        return encode(obj.value)
    if isinstance(obj, frozenset):
        items = sorted(encode(v) for v in obj)
        return _TAG_LIST + _u32(len(items)) + b"".join(items)
    if isinstance(obj, (list, tuple)):
        parts = [encode(v) for v in obj]
        return _TAG_LIST + _u32(len(parts)) + b"".join(parts)
    if isinstance(obj, dict):
        entries = sorted((encode(k), encode(v)) for k, v in obj.items())
        body = b"".join(k + v for k, v in entries)
        return _TAG_MAP + _u32(len(entries)) + body
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        name = type(obj).__name__.encode("utf-8")
        body = b"".join(
            encode(getattr(obj, field.name)) for field in dataclasses.fields(obj)
        )
        return _TAG_OBJ + _u32(len(name)) + name + body
    raise TypeError(f"cannot canonically encode {type(obj).__name__}")


def digest(obj: Any) -> bytes:
    """32-byte content digest of the canonical encoding."""
    return hashlib.sha256(encode(obj)).digest()


_CLASSES: dict[str, type] = {}


def wire_type(cls):
    """Register a dataclass for decoding.  Fields decode positionally; the
    class's __post_init__ is responsible for coercing collection kinds."""
    _CLASSES[cls.__name__] = cls
    return cls


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode` for registered types."""
    value, offset = _decode_at(data, 0)
    if offset != len(data):
        raise ValueError(f"trailing bytes after canonical value ({len(data)-offset})")
    return value


def _decode_at(data: bytes, off: int):
    tag = data[off : off + 1]
    off += 1
    if tag == _TAG_NONE:
        return None, off
    if tag == _TAG_BOOL:
        return data[off] == 1, off + 1
    if tag == _TAG_INT:
        return int.from_bytes(data[off : off + 8], "little", signed=True), off + 8
    if tag == _TAG_STR:
        n = int.from_bytes(data[off : off + 4], "little")
        off += 4
        return data[off : off + n].decode("utf-8"), off + n
    if tag == _TAG_BYTES:
        n = int.from_bytes(data[off : off + 4], "little")
        off += 4
        return bytes(data[off : off + n]), off + n
    if tag == _TAG_FRACTION:
        num, off = _decode_at(data, off)
        den, off = _decode_at(data, off)
        return Fraction(num, den), off
    if tag == _TAG_LIST:
        n = int.from_bytes(data[off : off + 4], "little")
        off += 4
        items = []
        for _ in range(n):
            v, off = _decode_at(data, off)
            items.append(v)
        return items, off
    if tag == _TAG_MAP:
        n = int.from_bytes(data[off : off + 4], "little")
        off += 4
        out = {}
        for _ in range(n):
            k, off = _decode_at(data, off)
            v, off = _decode_at(data, off)
            out[_freeze_key(k)] = v
        return out, off
    if tag == _TAG_OBJ:
        n = int.from_bytes(data[off : off + 4], "little")
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        cls = _CLASSES.get(name)
        if cls is None:
            raise ValueError(f"unknown wire type {name!r}")
        values = []
        for _ in dataclasses.fields(cls):
            v, off = _decode_at(data, off)
            values.append(v)
        return cls(*values), off
    raise ValueError(f"bad canonical tag {tag!r} at offset {off - 1}")


def _freeze_key(k: Any):
    return tuple(k) if isinstance(k, list) else k


class DigestRegistry:
    """Per-run collision detector.

    record() is idempotent for identical payloads and raises on a digest
    that maps to different canonical bytes.
    """

    def __init__(self):
        self._seen: dict[bytes, bytes] = {}

    def record(self, obj: Any) -> bytes:
        payload = encode(obj)
        d = hashlib.sha256(payload).digest()
        prior = self._seen.get(d)
        if prior is None:
            self._seen[d] = payload
        elif prior != payload:
            raise CollisionError(f"digest collision on {d.hex()}")
        return d

    def __len__(self) -> int:
        return len(self._seen)


def to_jsonable(obj: Any) -> Any:
    """Debug encoding: digests as hex, dataclasses as tagged dicts."""
    if obj is None or isinstance(obj, (bool, int, str, float)):
        return obj
    if isinstance(obj, (bytes, bytearray)):
        return bytes(obj).hex()
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, frozenset):
        return sorted((to_jsonable(v) for v in obj), key=repr)
    if isinstance(obj, dict):
        return {_json_key(k): to_jsonable(v) for k, v in _sorted_items(obj)}
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {"_type": type(obj).__name__}
        for field in dataclasses.fields(obj):
            out[field.name] = to_jsonable(getattr(obj, field.name))
        return out
    raise TypeError(f"cannot debug-encode {type(obj).__name__}")


def _json_key(k: Any) -> str:
    if isinstance(k, (bytes, bytearray)):
        return bytes(k).hex()
    if isinstance(k, tuple):
        return "/".join(str(part) for part in k)
    return str(k)


def _sorted_items(d: dict):
    return sorted(d.items(), key=lambda kv: _json_key(kv[0]))
