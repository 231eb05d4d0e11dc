"""Parsers for the assessment agent's two output shapes.

Judgment mode answers ``False`` (the sentences agree) or ``True`` followed by
a reason. Pattern extraction answers with a ``final_translation`` object, which
models often write with single quotes or wrap in a code fence.
"""

from __future__ import annotations

import ast
import enum
import json
import re
import warnings
from dataclasses import dataclass

from .errors import ExtractionFailure, UnparseableJudgment

KEY = "final_translation"


class Verdict(str, enum.Enum):
    CONVERGED = "Converged"
    CONTINUE = "Continue"


@dataclass(frozen=True)
class JudgmentResult:
    verdict: Verdict
    explanation: str | None = None

    def __post_init__(self) -> None:
        if self.verdict is Verdict.CONVERGED and self.explanation is not None:
            raise ValueError("a converged judgment carries no explanation")


class ParseMode(str, enum.Enum):
    STRICT_OBJECT = "StrictObject"
    LENIENT_QUOTES = "LenientQuotes"
    FENCED_BLOCK = "FencedBlock"


@dataclass(frozen=True)
class ExtractedTranslation:
    final_translation: str
    parse_mode: ParseMode


# Characters skipped before the verdict token and between it and the reason.
_NOISE = " \t\r\n\"'`*_.,:;!?-()[]{}<>#|~“”‘’"
_LEADING_WORD = re.compile(r"[^\W\d_]+")


def parse_judgment(raw: str) -> JudgmentResult:
    """Classify a judgment reply by its leading token.

    Raises UnparseableJudgment when the first word is neither True nor False.
    """
    text = raw.lstrip(_NOISE)
    match = _LEADING_WORD.match(text)
    if match is None:
        raise UnparseableJudgment(raw)
    token = match.group(0).lower()
    if token == "false":
        return JudgmentResult(Verdict.CONVERGED)
    if token == "true":
        reason = text[match.end():].lstrip(_NOISE).rstrip()
        return JudgmentResult(Verdict.CONTINUE, reason or None)
    raise UnparseableJudgment(raw)


_FENCE_RE = re.compile(r"```(?:[\w+.-]*[ \t]*\n)?(.*?)```", re.DOTALL)
_LENIENT_VALUE_RE = re.compile(
    r"""(['"])final_translation\1\s*:\s*(['"])(.*)\2\s*,?\s*\}""",
    re.DOTALL,
)


def _usable(value: object) -> str | None:
    if isinstance(value, str) and value.strip():
        return value
    return None


def _strict(text: str) -> str | None:
    stripped = text.strip()
    try:
        whole = json.loads(stripped)
    except ValueError:
        pass
    else:
        if isinstance(whole, dict):
            return _usable(whole.get(KEY))

    decoder = json.JSONDecoder()
    for start in (i for i, ch in enumerate(text) if ch == "{"):
        try:
            obj, _ = decoder.raw_decode(text, start)
        except ValueError:
            continue
        if isinstance(obj, dict):
            value = _usable(obj.get(KEY))
            if value is not None:
                return value
    return None


def _matching_close(text: str, start: int, quote_aware: bool) -> int | None:
    depth = 0
    quote = None
    i = start
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 1
            elif ch == quote:
                quote = None
        elif quote_aware and ch in "'\"":
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return None


def _balanced_objects(text: str):
    """Yield substrings from each '{' to its matching '}'.

    Quote-aware matching comes first so braces inside string values are
    skipped; plain brace counting follows for replies whose quoting is broken.
    """
    seen = set()
    for quote_aware in (True, False):
        for start in (i for i, ch in enumerate(text) if ch == "{"):
            end = _matching_close(text, start, quote_aware)
            if end is not None and (start, end) not in seen:
                seen.add((start, end))
                yield text[start:end + 1]


def _lenient(text: str) -> str | None:
    for candidate in _balanced_objects(text):
        try:
            with warnings.catch_warnings():
                # Model output is full of stray backslashes; their escape warnings are noise.
                warnings.simplefilter("ignore")
                obj = ast.literal_eval(candidate)
        except (ValueError, TypeError, SyntaxError, MemoryError, RecursionError):
            continue
        if isinstance(obj, dict):
            value = _usable(obj.get(KEY))
            if value is not None:
                return value
    # Unescaped apostrophes inside the value defeat literal_eval.
    match = _LENIENT_VALUE_RE.search(text)
    if match:
        return _usable(match.group(3))
    return None


def parse_final_translation(raw: str) -> ExtractedTranslation:
    """Pull the final translation out of an extraction reply.

    Tiers, in order: a strict JSON object, a single-quoted object like the
    prompt's exemplar, then the same two inside code fences. Text inside fences
    is hidden from the first two tiers.
    """
    try:
        whole = json.loads(raw.strip())
    except ValueError:
        whole = None
    if isinstance(whole, dict) and _usable(whole.get(KEY)) is not None:
        return ExtractedTranslation(whole[KEY], ParseMode.STRICT_OBJECT)

    outside = _FENCE_RE.sub(" ", raw)
    value = _strict(outside)
    if value is not None:
        return ExtractedTranslation(value, ParseMode.STRICT_OBJECT)
    value = _lenient(outside)
    if value is not None:
        return ExtractedTranslation(value, ParseMode.LENIENT_QUOTES)

    blocks = _FENCE_RE.findall(raw)
    if blocks:
        # The raw text goes last: backticks inside a value can split a fence.
        for tier in (_strict, _lenient):
            for text in (*blocks, raw):
                value = tier(text)
                if value is not None:
                    return ExtractedTranslation(value, ParseMode.FENCED_BLOCK)
    raise ExtractionFailure(raw)


_SUGGESTION_HEADING = re.compile(
    r"^[ \t#>*_\-\d.)]*(?:translation\s+)?(?:suggestions?|recommendations?|revision\s+suggestions?)\b.*$",
    re.IGNORECASE | re.MULTILINE,
)


def split_reflection(raw: str) -> tuple[str, str]:
    """Split a reflection reply into (analysis, suggestions).

    The split point is the first line that reads as a suggestions heading. With
    no such line the whole reply is the analysis and suggestions are empty.
    """
    match = _SUGGESTION_HEADING.search(raw)
    if match is None:
        return raw.strip(), ""
    return raw[: match.start()].strip(), raw[match.start():].strip()
