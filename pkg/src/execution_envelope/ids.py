"""Envelope identifiers and millisecond-precision UTC timestamps.

Envelope ids are 26-character Crockford base32 strings: a 48-bit
millisecond timestamp prefix followed by 80 random bits. The prefix makes
ids sort in admission order, which keeps event-log scans and directory
listings readable; the random tail makes collisions implausible.
"""

from __future__ import annotations

import os
import random
import re
import threading
from datetime import datetime, timezone

_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
ENVELOPE_ID_LENGTH = 26
_TIMESTAMP_CHARS = 10
_RANDOM_CHARS = 16
_RANDOM_BITS = 80

# Fixed base for seeded id sources so deterministic runs do not depend on
# the wall clock (test hook; see gateway config).
_SEEDED_EPOCH_MS = 1_767_225_600_000  # 2026-01-01T00:00:00Z

TIMESTAMP_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})\.(\d{3})Z$"
)


def _encode_base32(value: int, length: int) -> str:
    chars = []
    for _ in range(length):
        chars.append(_ALPHABET[value & 0x1F])
        value >>= 5
    return "".join(reversed(chars))


def new_envelope_id(timestamp_ms: int | None = None, randomness: int | None = None) -> str:
    """Return a fresh sortable envelope id.

    Both components can be pinned for reproducible tests; by default the
    current clock and os-level randomness are used.
    """
    if timestamp_ms is None:
        timestamp_ms = int(datetime.now(timezone.utc).timestamp() * 1000)
    if randomness is None:
        randomness = int.from_bytes(os.urandom(10), "big")
    if timestamp_ms < 0 or timestamp_ms >= 1 << 48:
        raise ValueError(f"timestamp out of range: {timestamp_ms}")
    if randomness < 0 or randomness >= 1 << _RANDOM_BITS:
        raise ValueError("randomness out of range")
    return _encode_base32(timestamp_ms, _TIMESTAMP_CHARS) + _encode_base32(
        randomness, _RANDOM_CHARS
    )


class IdSource:
    """Thread-safe envelope-id allocator.

    With ``seed=None`` ids come from the real clock and os randomness.
    With an integer seed the sequence is fully reproducible: a fixed epoch
    plus a per-allocation counter stands in for the clock, and the random
    tail comes from a seeded PRNG. Seeded mode exists for determinism
    tests only and must not be used for real traffic.
    """

    def __init__(self, seed: int | None = None):
        self._lock = threading.Lock()
        self._seed = seed
        self._counter = 0
        self._rng = random.Random(seed) if seed is not None else None

    def next(self) -> str:
        if self._rng is None:
            return new_envelope_id()
        with self._lock:
            self._counter += 1
            return new_envelope_id(
                _SEEDED_EPOCH_MS + self._counter, self._rng.getrandbits(_RANDOM_BITS)
            )


def utc_now_ms() -> datetime:
    """Current UTC time truncated to millisecond precision."""
    now = datetime.now(timezone.utc)
    return now.replace(microsecond=(now.microsecond // 1000) * 1000)


def format_timestamp(value: datetime) -> str:
    """Render a UTC datetime as an RFC 3339 string with millisecond precision."""
    if value.tzinfo is None:
        raise ValueError("timestamp must be timezone-aware")
    value = value.astimezone(timezone.utc)
    millis = value.microsecond // 1000
    return f"{value.year:04d}-{value.month:02d}-{value.day:02d}T{value.hour:02d}:{value.minute:02d}:{value.second:02d}.{millis:03d}Z"


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 UTC millisecond timestamp; reject any other shape."""
    match = TIMESTAMP_RE.match(text)
    if match is None:
        raise ValueError(f"not an RFC 3339 UTC millisecond timestamp: {text!r}")
    year, month, day, hour, minute, second, millis = (int(g) for g in match.groups())
    return datetime(
        year, month, day, hour, minute, second, millis * 1000, tzinfo=timezone.utc
    )
