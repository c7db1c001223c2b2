"""Turn raw backend text into a binary verdict, with failures as values."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .core import Verdict

HEADER = "POSSIBLE DIAGNOSES"
_HEADER_RE = re.compile(re.escape(HEADER), re.IGNORECASE)


class ParseFailure(str, Enum):
    MISSING_HEADER = "missing_header"
    NO_DIGIT = "no_digit"
    AMBIGUOUS_DIGITS = "ambiguous_digits"
    EMPTY_RESPONSE = "empty_response"


@dataclass(frozen=True)
class ParseResult:
    verdict: Optional[Verdict] = None
    failure_reason: Optional[ParseFailure] = None
    matched_span: Optional[tuple[int, int]] = None

    @property
    def ok(self) -> bool:
        return self.verdict is not None


def _skippable(ch: str) -> bool:
    if ch.isspace():
        return True
    # P* = punctuation, S* = symbols (markdown asterisks, dashes, arrows...)
    return unicodedata.category(ch)[0] in "PS"


def _skip(text: str, i: int) -> int:
    while i < len(text) and _skippable(text[i]):
        i += 1
    return i


def _read_answer(text: str, start: int) -> ParseResult:
    i = _skip(text, start)
    if i >= len(text) or not text[i].isdigit():
        return ParseResult(failure_reason=ParseFailure.NO_DIGIT)
    ch = text[i]
    if ch not in "01":
        return ParseResult(failure_reason=ParseFailure.AMBIGUOUS_DIGITS)
    # "10", "1 0", "0/1": more than one digit where a single one was asked for
    if i + 1 < len(text) and text[i + 1].isdigit():
        return ParseResult(failure_reason=ParseFailure.AMBIGUOUS_DIGITS)
    j = _skip(text, i + 1)
    if j < len(text) and text[j].isdigit() and (j + 1 >= len(text) or not text[j + 1].isalnum()):
        return ParseResult(failure_reason=ParseFailure.AMBIGUOUS_DIGITS)
    return ParseResult(verdict=Verdict(int(ch)), matched_span=(i, i + 1))


def parse_response(raw_text: str) -> ParseResult:
    """Locate the last answer header and read the digit that follows it.

    The answer header is the last occurrence followed by a digit, so an
    echoed instruction block before the answer and a header phrase repeated
    in trailing prose are both ignored. Without a header the stripped
    response must be exactly ``"0"`` or ``"1"``. Never raises.
    """
    if raw_text is None or not str(raw_text).strip():
        return ParseResult(failure_reason=ParseFailure.EMPTY_RESPONSE)
    text = str(raw_text)

    matches = list(_HEADER_RE.finditer(text))
    if not matches:
        stripped = text.strip()
        if stripped in ("0", "1"):
            start = text.index(stripped)
            return ParseResult(verdict=Verdict(int(stripped)), matched_span=(start, start + 1))
        return ParseResult(failure_reason=ParseFailure.MISSING_HEADER)

    for m in reversed(matches):
        result = _read_answer(text, m.end())
        if result.failure_reason is not ParseFailure.NO_DIGIT:
            return result
    return ParseResult(failure_reason=ParseFailure.NO_DIGIT)
