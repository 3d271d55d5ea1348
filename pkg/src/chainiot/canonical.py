"""Canonical serialization shared by every signed, hashed or persisted byte string.

Objects are rendered as JSON text with lexicographically sorted keys, no
insignificant whitespace and UTF-8 output.  Byte strings travel as standard
base64 and timestamps as RFC-3339 UTC strings with microsecond precision.
Callers convert their domain objects to JSON-native values first (see the
``to_dict`` methods throughout the package) so that encoding stays on the C
fast path of :mod:`json`.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from datetime import datetime, timezone
from typing import Any

_TIME_FORMAT = "%Y-%m-%dT%H:%M:%S.%fZ"

_encoder = json.JSONEncoder(
    sort_keys=True,
    separators=(",", ":"),
    ensure_ascii=False,
    allow_nan=False,
    check_circular=False,
)


def encode(obj: Any) -> bytes:
    return _encoder.encode(obj).encode("utf-8")


def decode(data: bytes | str) -> Any:
    return json.loads(data)


def is_canonical(data: bytes) -> bool:
    """True if ``data`` parses and re-encodes to exactly the same bytes."""
    try:
        return encode(decode(data)) == data
    except (ValueError, UnicodeDecodeError):
        return False


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    """Strict base64 decode; rejects non-canonical padding bits."""
    if not isinstance(text, str):
        raise ValueError("base64 field must be a string")
    try:
        raw = base64.b64decode(text, validate=True)
    except binascii.Error as exc:
        raise ValueError(f"invalid base64: {exc}") from None
    if base64.b64encode(raw).decode("ascii") != text:
        raise ValueError("non-canonical base64")
    return raw


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def format_time(dt: datetime) -> str:
    if dt.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    return dt.astimezone(timezone.utc).strftime(_TIME_FORMAT)


def parse_time(text: str) -> datetime:
    if not isinstance(text, str) or not text.endswith("Z"):
        raise ValueError(f"not an RFC-3339 UTC timestamp: {text!r}")
    try:
        dt = datetime.strptime(text, _TIME_FORMAT)
    except ValueError:
        # tolerate second precision from hand-written files
        dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    return dt.replace(tzinfo=timezone.utc)


def dump_file(path, obj: Any) -> None:
    """Write ``obj`` canonically via a temp file and atomic rename."""
    import os

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(encode(obj))
    os.replace(tmp, path)


def load_file(path) -> Any:
    with open(path, "rb") as fh:
        return decode(fh.read())
