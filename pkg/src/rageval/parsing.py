"""Strict parsers for judge-LLM completions.

Judges vary list syntax (numbering, bullets, case), so parsers normalize
enumeration noise but stay strict about counts and required labels: a
completion that cannot be parsed raises a ParseError subclass and the caller
decides whether to retry.
"""

from __future__ import annotations

import json
import re


class ParseError(Exception):
    """A completion did not match the expected output format.

    ``last_completion`` is attached by the retry helper so failed traces can
    still record what the judge returned.
    """

    last_completion: str | None = None


class NoStatementsError(ParseError):
    pass


class VerdictCountError(ParseError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected {expected} verdicts, parsed {got}")
        self.expected = expected
        self.got = got


class ShortOutputError(ParseError):
    def __init__(self, needed: int, got: int):
        super().__init__(f"needed {needed} questions, parsed {got}")
        self.needed = needed
        self.got = got


class ClassificationLabelError(ParseError):
    pass


class EmptyExtractionError(ParseError):
    pass


# leading bullets, "1." / "1)" / "(1)" / "1:" counters, and "S1:"-style markers
_ENUMERATION = re.compile(r"^(?:[-*•]+|\(?\d+[.):\]]|[Ss]\d+[.:)])\s*")

_CURLY_QUOTES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})


def strip_enumeration(line: str) -> str:
    """Remove leading list markers ("1.", "S1:", "-", "•", ...) from a line."""
    text = line.strip()
    for _ in range(3):
        stripped = _ENUMERATION.sub("", text, count=1)
        if stripped == text:
            break
        text = stripped.strip()
    return text


def parse_lines(completion: str) -> list[str]:
    """Non-empty lines with enumeration markers stripped, in order."""
    items = []
    for line in completion.splitlines():
        cleaned = strip_enumeration(line)
        if cleaned:
            items.append(cleaned)
    return items


def parse_statements(completion: str) -> list[str]:
    statements = parse_lines(completion)
    if not statements:
        raise NoStatementsError("no statements parseable from completion")
    return statements


def parse_questions(completion: str, n: int) -> list[str]:
    """The first ``n`` generated questions; fails when fewer are present."""
    questions = parse_lines(completion)
    if len(questions) < n:
        raise ShortOutputError(n, len(questions))
    return questions[:n]


_VERDICT_WORD = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_FINAL_MARKER = re.compile(r"final\s+verdicts?", re.IGNORECASE)
_TRAILING_VERDICT_LABEL = re.compile(r"(?:final\s+)?verdicts?\s*[:\-]?\s*$", re.IGNORECASE)


def _clean_explanation(segment: str) -> str:
    parts = [strip_enumeration(line) for line in segment.splitlines()]
    text = " ".join(part for part in parts if part).strip()
    return _TRAILING_VERDICT_LABEL.sub("", text).strip()


def parse_verdicts(completion: str, expected_count: int) -> list[tuple[bool, str]]:
    """Ordered (supported, explanation) pairs, one per statement.

    When a "final verdict" marker is present only the text after the last
    marker is scanned for Yes/No tokens; the parsed count must equal the
    statement count exactly.
    """
    markers = list(_FINAL_MARKER.finditer(completion))
    region = completion[markers[-1].end() :] if markers else completion
    tokens = list(_VERDICT_WORD.finditer(region))
    if len(tokens) != expected_count:
        raise VerdictCountError(expected_count, len(tokens))
    verdicts = []
    previous_end = 0
    for token in tokens:
        explanation = _clean_explanation(region[previous_end : token.start()])
        verdicts.append((token.group(1).lower() == "yes", explanation))
        previous_end = token.end()
    return verdicts


_INSUFFICIENT_PHRASE = "insufficient information"


def parse_context_extraction(completion: str) -> tuple[bool, list[str]]:
    """(insufficient_information, extracted sentence candidates).

    A completion that is exactly the "Insufficient Information" phrase (any
    case, optional quotes/period) means no relevant sentences exist; anything
    else is split into candidate sentences line by line.
    """
    bare = completion.strip().strip("\"'“”.").strip()
    if bare.lower() == _INSUFFICIENT_PHRASE:
        return True, []
    from .core import split_sentences  # local import avoids a module cycle

    sentences: list[str] = []
    for line in completion.splitlines():
        cleaned = strip_enumeration(line)
        if cleaned:
            sentences.extend(split_sentences(cleaned).sentences)
    if not sentences:
        raise EmptyExtractionError("no sentences parseable from extraction completion")
    return False, sentences


_LABEL_PATTERN = re.compile(
    r"\b(TP|FP|FN)\b[\"']?\s*[:=]\s*(\[[^\]]*\]|[^\n]*)", re.IGNORECASE
)
_ELLIPSIS_ITEMS = frozenset({"...", "…", "etc"})


def _split_items(raw: str) -> list[str]:
    items = []
    for piece in raw.split(","):
        item = piece.strip().strip("\"'").strip()
        if item and item.lower() not in _ELLIPSIS_ITEMS:
            items.append(item)
    return items


def _classification_from_json(text: str) -> tuple[list[str], list[str], list[str]] | None:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    by_label = {key.upper(): value for key, value in obj.items() if isinstance(key, str)}
    if not ({"TP", "FP", "FN"} & by_label.keys()):
        return None

    def as_list(label: str) -> list[str]:
        value = by_label.get(label, [])
        if isinstance(value, str):
            value = [value] if value.strip() else []
        if not isinstance(value, list):
            return []
        return [str(item).strip() for item in value if str(item).strip()]

    return as_list("TP"), as_list("FP"), as_list("FN")


def parse_classification(completion: str) -> tuple[list[str], list[str], list[str]]:
    """TP/FP/FN statement lists from a classification completion.

    Accepts the JSON-skeleton form and bare ``TP: [...]`` label lines. A label
    that is absent counts as an empty list provided at least one label was
    found; no labels at all is a parse failure.
    """
    text = completion.translate(_CURLY_QUOTES)
    from_json = _classification_from_json(text)
    if from_json is not None:
        return from_json
    found: dict[str, list[str]] = {}
    for match in _LABEL_PATTERN.finditer(text):
        label = match.group(1).upper()
        body = match.group(2).strip()
        if body.startswith("["):
            body = body[1 : body.index("]")] if "]" in body else body[1:]
        if label not in found:
            found[label] = _split_items(body)
    if not found:
        raise ClassificationLabelError("no TP/FP/FN labels found in completion")
    return found.get("TP", []), found.get("FP", []), found.get("FN", [])
