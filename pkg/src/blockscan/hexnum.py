"""Fixed-width hexadecimal normalization of numerals."""
from __future__ import annotations

import re
import threading

from .errors import ParseError

HEX_DIGITS = 40
_LIMIT = 1 << (4 * HEX_DIGITS)
_DEC = re.compile(r"[0-9]+")
_HEX = re.compile(r"0[xX][0-9a-fA-F]+")


class _OverflowCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.value = 0

    def bump(self) -> None:
        with self._lock:
            self.value += 1

    def reset(self) -> None:
        with self._lock:
            self.value = 0


overflow_counter = _OverflowCounter()


def parse_numeral(raw: str) -> int:
    """Parse a non-negative decimal or ``0x``-prefixed hex numeral."""
    if not isinstance(raw, str):
        raise ParseError(f"numeral must be a string, got {type(raw).__name__}")
    s = raw.strip()
    if _DEC.fullmatch(s):
        return int(s, 10)
    if _HEX.fullmatch(s):
        return int(s, 16)
    raise ParseError(f"not a non-negative numeral: {raw!r}")


def is_numeral(raw: str) -> bool:
    s = raw.strip()
    return bool(_DEC.fullmatch(s) or _HEX.fullmatch(s))


def normalize_number(raw: str) -> str:
    """Return ``0x`` + 40 lowercase zero-padded hex digits.

    Values that do not fit in 160 bits fall back to minimal-width hex and are
    tallied in ``overflow_counter``.
    """
    value = parse_numeral(raw)
    if value < _LIMIT:
        return f"0x{value:0{HEX_DIGITS}x}"
    overflow_counter.bump()
    return f"0x{value:x}"
