"""Small shared helpers: clocks, canonical JSON, atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from datetime import datetime, timedelta, timezone
from typing import Any, Callable

Clock = Callable[[], datetime]


def utc_now() -> datetime:
    # Truncated to whole seconds so timestamp arithmetic survives
    # serialization formats that drop sub-second precision (X.509, ISO text).
    return datetime.now(timezone.utc).replace(microsecond=0)


def to_iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).replace(microsecond=0).isoformat()


def from_iso(text: str) -> datetime:
    return datetime.fromisoformat(text).astimezone(timezone.utc)


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path: str, data: bytes, mode: int | None = None) -> None:
    """Write via a temp file + rename so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        if mode is not None:
            os.chmod(tmp, mode)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str, text: str, mode: int | None = None) -> None:
    atomic_write_bytes(path, text.encode("utf-8"), mode=mode)


def parse_duration(text: str) -> timedelta:
    """Parse a duration like ``24h``, ``30m``, ``45s`` or a bare second count."""
    text = text.strip().lower()
    if not text:
        raise ValueError("empty duration")
    unit = {"h": 3600, "m": 60, "s": 1}.get(text[-1])
    number = text[:-1] if unit else text
    if unit is None:
        unit = 1
    try:
        value = float(number)
    except ValueError:
        raise ValueError(f"invalid duration {text!r}") from None
    if value < 0:
        raise ValueError(f"negative duration {text!r}")
    return timedelta(seconds=value * unit)
