"""Data model, JSONL dataset ingestion, and deterministic text utilities.

Everything downstream (metrics, retrieval, analysis, reporting) consumes the
types defined here. All types are immutable after construction and safe to
share across concurrent workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping


class MetricName(str, Enum):
    FAITHFULNESS = "faithfulness"
    ANSWER_RELEVANCE = "answer_relevance"
    CONTEXT_RELEVANCE = "context_relevance"
    ANSWER_SIMILARITY = "answer_similarity"
    FACTUAL_CORRECTNESS = "factual_correctness"
    ANSWER_CORRECTNESS = "answer_correctness"


ALL_METRICS: tuple[MetricName, ...] = tuple(MetricName)

# Metrics whose computation reads the retrieved context.
CONTEXT_DEPENDENT_METRICS = frozenset(
    {MetricName.FAITHFULNESS, MetricName.CONTEXT_RELEVANCE}
)


class NullReason(str, Enum):
    NO_STATEMENTS = "no_statements"
    PARSE_FAILURE_EXHAUSTED = "parse_failure_exhausted"
    BACKEND_ERROR = "backend_error"
    EMPTY_CLASSIFICATION = "empty_classification"


class DatasetError(Exception):
    """Base class for dataset ingestion and validation failures."""


class MalformedRecordError(DatasetError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"malformed record at line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateIdError(DatasetError):
    def __init__(self, sample_id: str, line_no: int):
        super().__init__(f"duplicate sample id {sample_id!r} at line {line_no}")
        self.sample_id = sample_id
        self.line_no = line_no


class ValidationError(DatasetError):
    """A sample does not satisfy the invariants required for a run."""


class MissingFieldError(ValidationError):
    def __init__(self, sample_id: str, field_name: str):
        super().__init__(f"sample {sample_id!r}: required field {field_name!r} is missing")
        self.sample_id = sample_id
        self.field_name = field_name


class EmptyFieldError(ValidationError):
    def __init__(self, sample_id: str, field_name: str):
        super().__init__(f"sample {sample_id!r}: field {field_name!r} is empty")
        self.sample_id = sample_id
        self.field_name = field_name


class NoContextsError(ValidationError):
    def __init__(self, sample_id: str):
        super().__init__(f"sample {sample_id!r}: a context-dependent metric was requested "
                         "but the sample has no contexts")
        self.sample_id = sample_id


@dataclass(frozen=True)
class EvalSample:
    """One QA record: question, retrieved context(s), generated answer, ground truth.

    ``retrieval_correct`` and ``human_correct`` are optional labels; unknown
    keys from the source record are preserved in ``extra`` and echoed back out
    by the report writer.
    """

    id: str
    question: str
    contexts: tuple[str, ...]
    generated_answer: str
    ground_truth: str
    retrieval_correct: bool | None = None
    human_correct: bool | None = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def joined_context(self) -> str:
        """Contexts merged into one judge context, blank-line separated."""
        return "\n\n".join(self.contexts)

    def to_record(self) -> dict[str, Any]:
        record = {
            "id": self.id,
            "question": self.question,
            "contexts": list(self.contexts),
            "generated_answer": self.generated_answer,
            "ground_truth": self.ground_truth,
            "retrieval_correct": self.retrieval_correct,
            "human_correct": self.human_correct,
        }
        record.update(self.extra)
        return record

    def with_labels(
        self,
        retrieval_correct: bool | None = None,
        human_correct: bool | None = None,
    ) -> "EvalSample":
        return EvalSample(
            id=self.id,
            question=self.question,
            contexts=self.contexts,
            generated_answer=self.generated_answer,
            ground_truth=self.ground_truth,
            retrieval_correct=(
                self.retrieval_correct if retrieval_correct is None else retrieval_correct
            ),
            human_correct=self.human_correct if human_correct is None else human_correct,
            extra=self.extra,
        )

    def with_contexts(self, contexts: Iterable[str], retrieval_correct: bool | None = None) -> "EvalSample":
        return EvalSample(
            id=self.id,
            question=self.question,
            contexts=tuple(contexts),
            generated_answer=self.generated_answer,
            ground_truth=self.ground_truth,
            retrieval_correct=(
                self.retrieval_correct if retrieval_correct is None else retrieval_correct
            ),
            human_correct=self.human_correct,
            extra=self.extra,
        )


@dataclass(frozen=True)
class SentenceList:
    source_text: str
    sentences: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class MetricResult:
    """A metric score in [0, 1] or a null with a reason, plus its trace.

    Exactly one of ``value`` / ``null_reason`` is set. The trace is always
    present, even for nulls: it records whatever was obtained before failure.
    """

    metric_name: MetricName
    sample_id: str
    value: float | None
    null_reason: NullReason | None
    trace: Any

    def __post_init__(self) -> None:
        if (self.value is None) == (self.null_reason is None):
            raise ValueError("exactly one of value / null_reason must be set")
        if self.value is not None and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")
        if self.trace is None:
            raise ValueError("trace must always be present")

    def to_score_record(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "metric_name": self.metric_name.value,
            "value": self.value,
            "null_reason": self.null_reason.value if self.null_reason else None,
        }


_KNOWN_KEYS = (
    "id",
    "question",
    "contexts",
    "generated_answer",
    "ground_truth",
    "retrieval_correct",
    "human_correct",
)


def _optional_bool(record: Mapping[str, Any], key: str, line_no: int) -> bool | None:
    value = record.get(key)
    if value is None:
        return None
    if not isinstance(value, bool):
        raise MalformedRecordError(line_no, f"{key!r} must be a boolean or null")
    return value


def sample_from_record(record: Mapping[str, Any], line_no: int = 0) -> EvalSample:
    """Build an EvalSample from one decoded JSONL record."""
    if not isinstance(record, Mapping):
        raise MalformedRecordError(line_no, "record is not a JSON object")
    for key in ("id", "question", "generated_answer", "ground_truth"):
        if key not in record:
            raise MalformedRecordError(line_no, f"missing key {key!r}")
        if not isinstance(record[key], str):
            raise MalformedRecordError(line_no, f"{key!r} must be a string")
    contexts = record.get("contexts", [])
    if not isinstance(contexts, list) or not all(isinstance(c, str) for c in contexts):
        raise MalformedRecordError(line_no, "'contexts' must be an array of strings")
    extra = {k: v for k, v in record.items() if k not in _KNOWN_KEYS}
    return EvalSample(
        id=record["id"],
        question=record["question"],
        contexts=tuple(contexts),
        generated_answer=record["generated_answer"],
        ground_truth=record["ground_truth"],
        retrieval_correct=_optional_bool(record, "retrieval_correct", line_no),
        human_correct=_optional_bool(record, "human_correct", line_no),
        extra=extra,
    )


def load_dataset(path: str | Path, format: str = "jsonl") -> list[EvalSample]:
    """Load and validate a JSONL dataset; one record per line, UTF-8.

    Raises MalformedRecordError with the offending line number, and
    DuplicateIdError when two records share an id. Blank lines are skipped.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    samples: list[EvalSample] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(line_no, f"invalid JSON ({exc.msg})") from exc
            sample = sample_from_record(record, line_no)
            if not sample.id.strip():
                raise MalformedRecordError(line_no, "'id' is empty")
            if sample.id in seen:
                raise DuplicateIdError(sample.id, line_no)
            seen[sample.id] = line_no
            samples.append(sample)
    return samples


def validate_sample(sample: EvalSample, required_fields: Iterable[str] = ()) -> EvalSample:
    """Check base invariants plus any extra required fields; returns the sample.

    ``required_fields`` may contain "contexts", "retrieval_correct" and
    "human_correct"; base text fields are always checked.
    """
    required = set(required_fields)
    if not sample.id.strip():
        raise EmptyFieldError(sample.id, "id")
    for name in ("question", "generated_answer", "ground_truth"):
        if not getattr(sample, name).strip():
            raise EmptyFieldError(sample.id, name)
    if "contexts" in required and len(sample.contexts) == 0:
        raise NoContextsError(sample.id)
    for name in ("retrieval_correct", "human_correct"):
        if name in required and getattr(sample, name) is None:
            raise MissingFieldError(sample.id, name)
    return sample


def required_fields_for(metrics: Iterable[MetricName | str]) -> set[str]:
    """Sample fields a metric run needs beyond the always-required ones."""
    required: set[str] = set()
    for metric in metrics:
        if MetricName(metric) in CONTEXT_DEPENDENT_METRICS:
            required.add("contexts")
    return required


# --- Sentence segmentation -------------------------------------------------
#
# The context-relevance denominator counts sentences, so segmentation must be
# deterministic. Rule: split on '.', '!' or '?' followed by whitespace and an
# uppercase letter (or end of text), with a fixed abbreviation guard list, a
# single-letter-initial guard, and a decimal-number guard. Whitespace runs are
# collapsed to single spaces before counting.

_GUARDED_TOKENS = frozenset(
    token.lower() for token in ("Rel.", "e.g.", "i.e.", "Fig.", "Sec.", "cf.", "etc.")
)
_TERMINATORS = frozenset(".!?")


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def _is_initial(token: str) -> bool:
    return len(token) == 2 and token[0].isalpha() and token[0].isupper() and token[1] == "."


def _is_sentence_boundary(text: str, index: int, sentence_start: int) -> bool:
    char = text[index]
    if char == ".":
        # decimal numbers like "3.5"
        if 0 < index < len(text) - 1 and text[index - 1].isdigit() and text[index + 1].isdigit():
            return False
        token_start = text.rfind(" ", 0, index) + 1
        token = text[token_start : index + 1]
        if token.lower() in _GUARDED_TOKENS:
            return False
        # single-letter initials like "J. Smith": only name-initial positions are
        # guarded (sentence start or right after another initial), so "A is B."
        # still terminates a sentence.
        if _is_initial(token) and token_start > sentence_start:
            previous = text[text.rfind(" ", 0, token_start - 1) + 1 : token_start - 1]
            if _is_initial(previous):
                return False
        elif _is_initial(token):
            return False
    if index == len(text) - 1:
        return True
    if text[index + 1] != " ":
        return False
    # normalization guarantees at most one space, so index + 2 is the next token
    return index + 2 < len(text) and text[index + 2].isupper()


def split_sentences(text: str) -> SentenceList:
    """Deterministically segment text into sentences.

    Same input always yields the same output; joining the sentences with
    single spaces recovers the whitespace-normalized input exactly.
    """
    normalized = normalize_whitespace(text)
    sentences: list[str] = []
    start = 0
    for index, char in enumerate(normalized):
        if char not in _TERMINATORS or index < start:
            continue
        if _is_sentence_boundary(normalized, index, start):
            sentences.append(normalized[start : index + 1])
            start = index + 2
    if start < len(normalized):
        sentences.append(normalized[start:])
    return SentenceList(source_text=text, sentences=tuple(sentences))
