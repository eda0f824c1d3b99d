"""The six judge-based evaluation metrics, computed prompt by prompt.

Each metric follows the same shape: render a template, call the judge,
strictly parse the completion, apply the score formula. Every intermediate
(rendered prompt, raw completion, parsed structures, raw similarities) is
kept in a typed trace so a score can always be audited or replayed.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence, TypeVar

from .backends import BackendError, ChatBackend, EmbeddingBackend, cosine_similarity, user_request
from .core import (
    EvalSample,
    MetricName,
    MetricResult,
    NoContextsError,
    NullReason,
    normalize_whitespace,
    split_sentences,
)
from .parsing import (
    NoStatementsError,
    ParseError,
    parse_classification,
    parse_context_extraction,
    parse_questions,
    parse_statements,
    parse_verdicts,
)
from .prompts import DEFAULT_PROMPTS, PromptLibrary, render, statements_block

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ZeroSentenceContextError(ValueError):
    """The joined context segments into zero sentences."""


@dataclass(frozen=True)
class StatementSet:
    statements: tuple[str, ...]
    source: str = "from_answer"

    def __len__(self) -> int:
        return len(self.statements)


@dataclass(frozen=True)
class Verdict:
    statement: str
    supported: bool
    explanation: str = ""


@dataclass(frozen=True)
class MetricWeights:
    """Answer-correctness mixing weights; defaults follow the reference 0.75/0.25 split."""

    w_factual: float = 0.75
    w_similarity: float = 0.25

    def __post_init__(self) -> None:
        if self.w_factual < 0 or self.w_similarity < 0:
            raise ValueError("weights must be non-negative")
        if abs(self.w_factual + self.w_similarity - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


@dataclass
class FaithfulnessTrace:
    statement_extraction_prompt: str | None = None
    raw_statement_completion: str | None = None
    statements: StatementSet | None = None
    verdict_prompt: str | None = None
    raw_verdict_completion: str | None = None
    verdicts: tuple[Verdict, ...] = ()
    supported_count: int = 0
    total_count: int = 0
    template_versions: dict[str, str] = field(default_factory=dict)


@dataclass
class AnswerRelevanceTrace:
    question_generation_prompt: str | None = None
    raw_completion: str | None = None
    generated_questions: tuple[str, ...] = ()
    per_question_similarity: tuple[float, ...] = ()
    mean_similarity: float | None = None
    mode: str = "single_call"
    embedding_model_id: str | None = None
    template_versions: dict[str, str] = field(default_factory=dict)


@dataclass
class ContextRelevanceTrace:
    extraction_prompt: str | None = None
    raw_completion: str | None = None
    extracted_sentences: tuple[str, ...] = ()
    insufficient_information: bool = False
    context_sentence_count: int = 0
    non_verbatim_count: int = 0
    capped: bool = False
    template_versions: dict[str, str] = field(default_factory=dict)


@dataclass
class AnswerSimilarityTrace:
    raw_similarity: float | None = None
    answer_model_id: str | None = None
    ground_truth_model_id: str | None = None


@dataclass
class FactualClassification:
    """TP/FP/FN statement lists plus the prompt/completion that produced them.

    The three lists are disjoint as rendered strings: a statement repeated by
    the judge is kept only in the earliest list (TP before FP before FN).
    """

    tp: tuple[str, ...] = ()
    fp: tuple[str, ...] = ()
    fn: tuple[str, ...] = ()
    classification_prompt: str | None = None
    raw_completion: str | None = None
    template_versions: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_lists(
        cls,
        tp: Sequence[str],
        fp: Sequence[str],
        fn: Sequence[str],
        classification_prompt: str | None = None,
        raw_completion: str | None = None,
        template_versions: dict[str, str] | None = None,
    ) -> "FactualClassification":
        tp_t = tuple(tp)
        fp_t = tuple(s for s in fp if s not in tp_t)
        fn_t = tuple(s for s in fn if s not in tp_t and s not in fp_t)
        return cls(
            tp=tp_t,
            fp=fp_t,
            fn=fn_t,
            classification_prompt=classification_prompt,
            raw_completion=raw_completion,
            template_versions=template_versions or {},
        )


@dataclass
class AnswerCorrectnessTrace:
    w_factual: float = 0.75
    w_similarity: float = 0.25
    factual_value: float | None = None
    similarity_value: float | None = None
    factual: FactualClassification | None = None
    similarity: AnswerSimilarityTrace | None = None


@dataclass
class ErrorTrace:
    """Minimal trace for failures outside any metric step (worker crashes)."""

    message: str = ""


def clamp01(value: float) -> float:
    return max(0.0, min(1.0, value))


# --- Score formulas ---------------------------------------------------------


def faithfulness_score(supported_count: int, total_count: int) -> float:
    """Fraction of answer statements the judge found supported by the context."""
    if total_count <= 0:
        raise ValueError("total_count must be positive")
    if not 0 <= supported_count <= total_count:
        raise ValueError("supported_count must lie in [0, total_count]")
    return supported_count / total_count


def answer_relevance_score(raw_similarities: Sequence[float]) -> float:
    """Mean of per-question cosines, each clamped to [0, 1] before averaging."""
    if not raw_similarities:
        raise ValueError("at least one similarity is required")
    return statistics.fmean(clamp01(s) for s in raw_similarities)


def context_relevance_score(extracted_count: int, context_sentence_count: int) -> tuple[float, bool]:
    """(score, capped): extracted / total sentences, capped at 1.0."""
    if context_sentence_count <= 0:
        raise ValueError("context_sentence_count must be positive")
    if extracted_count < 0:
        raise ValueError("extracted_count must be non-negative")
    ratio = extracted_count / context_sentence_count
    return (1.0, True) if ratio > 1.0 else (ratio, False)


def factual_correctness_score(tp: int, fp: int, fn: int) -> float | None:
    """TP / (TP + 0.5*(FP+FN)); None when nothing was classified."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp == 0 and fp == 0 and fn == 0:
        return None
    return tp / (tp + 0.5 * (fp + fn))


def answer_correctness_score(
    factual: float, similarity: float, weights: MetricWeights | None = None
) -> float:
    """Weighted sum of factual correctness and answer similarity."""
    weights = weights or MetricWeights()
    return weights.w_factual * factual + weights.w_similarity * similarity


# --- Trace serialization ----------------------------------------------------

_TRACE_CLASSES: dict[str, type] = {
    MetricName.FAITHFULNESS.value: FaithfulnessTrace,
    MetricName.ANSWER_RELEVANCE.value: AnswerRelevanceTrace,
    MetricName.CONTEXT_RELEVANCE.value: ContextRelevanceTrace,
    MetricName.ANSWER_SIMILARITY.value: AnswerSimilarityTrace,
    MetricName.FACTUAL_CORRECTNESS.value: FactualClassification,
    MetricName.ANSWER_CORRECTNESS.value: AnswerCorrectnessTrace,
}


def trace_to_dict(trace: Any) -> dict[str, Any]:
    data = asdict(trace)
    data["trace_type"] = type(trace).__name__
    return data


def trace_from_dict(metric_name: str, data: dict[str, Any]) -> Any:
    payload = {k: v for k, v in data.items() if k != "trace_type"}
    if data.get("trace_type") == "ErrorTrace":
        return ErrorTrace(**payload)
    cls = _TRACE_CLASSES[metric_name]
    if cls is FaithfulnessTrace:
        statements = payload.get("statements")
        if statements is not None:
            payload["statements"] = StatementSet(
                statements=tuple(statements["statements"]), source=statements["source"]
            )
        payload["verdicts"] = tuple(Verdict(**v) for v in payload.get("verdicts", []))
    elif cls is AnswerRelevanceTrace:
        payload["generated_questions"] = tuple(payload.get("generated_questions", []))
        payload["per_question_similarity"] = tuple(payload.get("per_question_similarity", []))
    elif cls is ContextRelevanceTrace:
        payload["extracted_sentences"] = tuple(payload.get("extracted_sentences", []))
    elif cls is FactualClassification:
        for key in ("tp", "fp", "fn"):
            payload[key] = tuple(payload.get(key, []))
    elif cls is AnswerCorrectnessTrace:
        if payload.get("factual") is not None:
            inner = payload["factual"]
            for key in ("tp", "fp", "fn"):
                inner[key] = tuple(inner.get(key, []))
            payload["factual"] = FactualClassification(**inner)
        if payload.get("similarity") is not None:
            payload["similarity"] = AnswerSimilarityTrace(**payload["similarity"])
    return cls(**payload)


# --- Engine ------------------------------------------------------------------


class MetricEngine:
    """Computes metrics for samples against a chat backend and an embedder.

    Parse steps retry the identical prompt up to ``max_parse_retries`` extra
    times before the metric goes null; backend failures never abort a run,
    they produce nulls with partial traces.
    """

    def __init__(
        self,
        chat: ChatBackend,
        embedder: EmbeddingBackend | None = None,
        model: str = "judge",
        prompts: PromptLibrary | None = None,
        max_parse_retries: int = 2,
        question_count: int = 3,
        question_mode: str = "single_call",
        weights: MetricWeights | None = None,
        temperature: float = 0.0,
        max_tokens: int = 1024,
    ):
        if question_mode not in ("single_call", "per_call"):
            raise ValueError(f"unknown question_mode {question_mode!r}")
        self.chat = chat
        self.embedder = embedder
        self.model = model
        self.prompts = prompts or DEFAULT_PROMPTS
        self.max_parse_retries = max_parse_retries
        self.question_count = question_count
        self.question_mode = question_mode
        self.weights = weights or MetricWeights()
        self.temperature = temperature
        self.max_tokens = max_tokens

    # -- shared plumbing

    def _request(self, prompt: str, tag: str):
        return user_request(
            model=self.model,
            content=prompt,
            request_tag=tag,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )

    def _chat_parse(self, prompt: str, tag: str, parser: Callable[[str], T]) -> tuple[T, str]:
        """Call the judge and parse; retry the identical prompt on parse failure."""
        last_error: ParseError | None = None
        completion = ""
        for _ in range(self.max_parse_retries + 1):
            completion = self.chat.chat_complete(self._request(prompt, tag))
            try:
                return parser(completion), completion
            except ParseError as exc:
                last_error = exc
        assert last_error is not None
        last_error.last_completion = completion
        raise last_error

    def _embedding_backend(self) -> EmbeddingBackend:
        if self.embedder is None:
            raise ValueError("this metric requires an embedding backend")
        return self.embedder

    def compute(self, sample: EvalSample, metric: MetricName | str) -> MetricResult:
        metric = MetricName(metric)
        handler = {
            MetricName.FAITHFULNESS: self.faithfulness,
            MetricName.ANSWER_RELEVANCE: self.answer_relevance,
            MetricName.CONTEXT_RELEVANCE: self.context_relevance,
            MetricName.ANSWER_SIMILARITY: self.answer_similarity,
            MetricName.FACTUAL_CORRECTNESS: self.factual_correctness,
            MetricName.ANSWER_CORRECTNESS: self.answer_correctness,
        }[metric]
        return handler(sample)

    # -- prompt steps (exposed for direct use and tests)

    def extract_statements(
        self, question: str, answer: str, sample_id: str = ""
    ) -> tuple[StatementSet, str, str]:
        """(statements, rendered prompt, raw completion) for the extraction step."""
        prompt = render(self.prompts.statement_extraction, question=question, answer=answer)
        tag = f"faithfulness:{sample_id}:statements"
        parsed, completion = self._chat_parse(prompt, tag, parse_statements)
        return StatementSet(tuple(parsed), source="from_answer"), prompt, completion

    def judge_statements(
        self, context: str, statements: StatementSet, sample_id: str = ""
    ) -> tuple[list[Verdict], str, str]:
        """(verdicts, rendered prompt, raw completion) for the verdict step."""
        if len(statements) == 0:
            raise ValueError("judge_statements requires at least one statement")
        prompt = render(
            self.prompts.verdict,
            context=context,
            statements=statements_block(statements.statements),
        )
        tag = f"faithfulness:{sample_id}:verdicts"
        pairs, completion = self._chat_parse(
            prompt, tag, lambda text: parse_verdicts(text, len(statements))
        )
        verdicts = [
            Verdict(statement=stmt, supported=supported, explanation=explanation)
            for stmt, (supported, explanation) in zip(statements.statements, pairs)
        ]
        return verdicts, prompt, completion

    def generate_questions(
        self, answer: str, n: int | None = None, sample_id: str = ""
    ) -> tuple[list[str], str, str, str]:
        """(questions, rendered prompt, raw completion, mode) for question generation."""
        n = self.question_count if n is None else n
        if n < 1:
            raise ValueError("n must be >= 1")
        prompt = render(self.prompts.question_generation, answer=answer)
        if self.question_mode == "single_call":
            tag = f"answer_relevance:{sample_id}:questions"
            questions, completion = self._chat_parse(
                prompt, tag, lambda text: parse_questions(text, n)
            )
            return questions, prompt, completion, "single_call"
        questions = []
        completions = []
        for index in range(1, n + 1):
            tag = f"answer_relevance:{sample_id}:questions:{index}"
            one, completion = self._chat_parse(prompt, tag, lambda text: parse_questions(text, 1))
            questions.append(one[0])
            completions.append(completion)
        return questions, prompt, "\n".join(completions), "per_call"

    def classify_tp_fp_fn(
        self, question: str, answer: str, ground_truth: str, sample_id: str = ""
    ) -> FactualClassification:
        """Judge-classified TP/FP/FN statement lists with their prompt and completion."""
        prompt = render(
            self.prompts.classification,
            question=question,
            answer=answer,
            ground_truth=ground_truth,
        )
        tag = f"factual_correctness:{sample_id}:classification"
        (tp, fp, fn), completion = self._chat_parse(prompt, tag, parse_classification)
        return FactualClassification.from_lists(
            tp,
            fp,
            fn,
            classification_prompt=prompt,
            raw_completion=completion,
            template_versions=self.prompts.versions_for("classification"),
        )

    # -- metrics

    def faithfulness(self, sample: EvalSample) -> MetricResult:
        if not sample.contexts:
            raise NoContextsError(sample.id)
        trace = FaithfulnessTrace(
            template_versions=self.prompts.versions_for("statement_extraction", "verdict")
        )
        trace.statement_extraction_prompt = render(
            self.prompts.statement_extraction,
            question=sample.question,
            answer=sample.generated_answer,
        )

        def null(reason: NullReason) -> MetricResult:
            return MetricResult(MetricName.FAITHFULNESS, sample.id, None, reason, trace)

        try:
            statements, _, completion = self.extract_statements(
                sample.question, sample.generated_answer, sample.id
            )
        except NoStatementsError as exc:
            trace.raw_statement_completion = exc.last_completion
            return null(NullReason.NO_STATEMENTS)
        except ParseError as exc:
            trace.raw_statement_completion = exc.last_completion
            return null(NullReason.PARSE_FAILURE_EXHAUSTED)
        except BackendError as exc:
            logger.warning("faithfulness(%s): backend failure: %s", sample.id, exc)
            return null(NullReason.BACKEND_ERROR)
        trace.raw_statement_completion = completion
        trace.statements = statements
        trace.total_count = len(statements)

        context = sample.joined_context()
        trace.verdict_prompt = render(
            self.prompts.verdict,
            context=context,
            statements=statements_block(statements.statements),
        )
        try:
            verdicts, _, verdict_completion = self.judge_statements(context, statements, sample.id)
        except ParseError as exc:
            trace.raw_verdict_completion = exc.last_completion
            return null(NullReason.PARSE_FAILURE_EXHAUSTED)
        except BackendError as exc:
            logger.warning("faithfulness(%s): backend failure: %s", sample.id, exc)
            return null(NullReason.BACKEND_ERROR)
        trace.raw_verdict_completion = verdict_completion
        trace.verdicts = tuple(verdicts)
        trace.supported_count = sum(1 for v in verdicts if v.supported)
        value = faithfulness_score(trace.supported_count, trace.total_count)
        return MetricResult(MetricName.FAITHFULNESS, sample.id, value, None, trace)

    def answer_relevance(self, sample: EvalSample, n: int | None = None) -> MetricResult:
        trace = AnswerRelevanceTrace(
            mode=self.question_mode,
            template_versions=self.prompts.versions_for("question_generation"),
        )
        trace.question_generation_prompt = render(
            self.prompts.question_generation, answer=sample.generated_answer
        )

        def null(reason: NullReason) -> MetricResult:
            return MetricResult(MetricName.ANSWER_RELEVANCE, sample.id, None, reason, trace)

        try:
            questions, _, completion, mode = self.generate_questions(
                sample.generated_answer, n, sample.id
            )
        except ParseError as exc:
            trace.raw_completion = exc.last_completion
            return null(NullReason.PARSE_FAILURE_EXHAUSTED)
        except BackendError as exc:
            logger.warning("answer_relevance(%s): backend failure: %s", sample.id, exc)
            return null(NullReason.BACKEND_ERROR)
        trace.raw_completion = completion
        trace.generated_questions = tuple(questions)
        trace.mode = mode

        try:
            embedder = self._embedding_backend()
            vectors = embedder.embed([sample.question] + questions)
            question_vector, generated_vectors = vectors[0], vectors[1:]
            raw = tuple(cosine_similarity(question_vector, v) for v in generated_vectors)
        except (BackendError, ValueError) as exc:
            logger.warning("answer_relevance(%s): embedding failure: %s", sample.id, exc)
            return null(NullReason.BACKEND_ERROR)
        trace.per_question_similarity = raw
        trace.embedding_model_id = embedder.model_id
        value = answer_relevance_score(raw)
        trace.mean_similarity = value
        return MetricResult(MetricName.ANSWER_RELEVANCE, sample.id, value, None, trace)

    def context_relevance(self, sample: EvalSample) -> MetricResult:
        if not sample.contexts:
            raise NoContextsError(sample.id)
        context = sample.joined_context()
        sentence_count = split_sentences(context).count
        if sentence_count == 0:
            raise ZeroSentenceContextError(
                f"sample {sample.id!r}: context splits into zero sentences"
            )
        trace = ContextRelevanceTrace(
            context_sentence_count=sentence_count,
            template_versions=self.prompts.versions_for("context_extraction"),
        )
        prompt = render(
            self.prompts.context_extraction, question=sample.question, context=context
        )
        trace.extraction_prompt = prompt

        def null(reason: NullReason) -> MetricResult:
            return MetricResult(MetricName.CONTEXT_RELEVANCE, sample.id, None, reason, trace)

        tag = f"context_relevance:{sample.id}:extraction"
        try:
            (insufficient, extracted), completion = self._chat_parse(
                prompt, tag, parse_context_extraction
            )
        except ParseError as exc:
            trace.raw_completion = exc.last_completion
            return null(NullReason.PARSE_FAILURE_EXHAUSTED)
        except BackendError as exc:
            logger.warning("context_relevance(%s): backend failure: %s", sample.id, exc)
            return null(NullReason.BACKEND_ERROR)
        trace.raw_completion = completion
        trace.insufficient_information = insufficient
        trace.extracted_sentences = tuple(extracted)
        if insufficient:
            return MetricResult(MetricName.CONTEXT_RELEVANCE, sample.id, 0.0, None, trace)
        normalized_context = normalize_whitespace(context)
        trace.non_verbatim_count = sum(
            1 for s in extracted if normalize_whitespace(s) not in normalized_context
        )
        value, capped = context_relevance_score(len(extracted), sentence_count)
        trace.capped = capped
        return MetricResult(MetricName.CONTEXT_RELEVANCE, sample.id, value, None, trace)

    def answer_similarity(self, sample: EvalSample) -> MetricResult:
        trace = AnswerSimilarityTrace()

        def null(reason: NullReason) -> MetricResult:
            return MetricResult(MetricName.ANSWER_SIMILARITY, sample.id, None, reason, trace)

        try:
            embedder = self._embedding_backend()
            answer_vector, truth_vector = embedder.embed(
                [sample.generated_answer, sample.ground_truth]
            )
            raw = cosine_similarity(answer_vector, truth_vector)
        except (BackendError, ValueError) as exc:
            logger.warning("answer_similarity(%s): embedding failure: %s", sample.id, exc)
            return null(NullReason.BACKEND_ERROR)
        trace.raw_similarity = raw
        trace.answer_model_id = answer_vector.model_id
        trace.ground_truth_model_id = truth_vector.model_id
        return MetricResult(MetricName.ANSWER_SIMILARITY, sample.id, clamp01(raw), None, trace)

    def factual_correctness(self, sample: EvalSample) -> MetricResult:
        empty_trace = FactualClassification(
            classification_prompt=render(
                self.prompts.classification,
                question=sample.question,
                answer=sample.generated_answer,
                ground_truth=sample.ground_truth,
            ),
            template_versions=self.prompts.versions_for("classification"),
        )
        try:
            classification = self.classify_tp_fp_fn(
                sample.question, sample.generated_answer, sample.ground_truth, sample.id
            )
        except ParseError as exc:
            empty_trace.raw_completion = exc.last_completion
            return MetricResult(
                MetricName.FACTUAL_CORRECTNESS,
                sample.id,
                None,
                NullReason.PARSE_FAILURE_EXHAUSTED,
                empty_trace,
            )
        except BackendError as exc:
            logger.warning("factual_correctness(%s): backend failure: %s", sample.id, exc)
            return MetricResult(
                MetricName.FACTUAL_CORRECTNESS,
                sample.id,
                None,
                NullReason.BACKEND_ERROR,
                empty_trace,
            )
        value = factual_correctness_score(
            len(classification.tp), len(classification.fp), len(classification.fn)
        )
        if value is None:
            # nothing classified is judge failure, not a zero-score answer
            return MetricResult(
                MetricName.FACTUAL_CORRECTNESS,
                sample.id,
                None,
                NullReason.EMPTY_CLASSIFICATION,
                classification,
            )
        return MetricResult(MetricName.FACTUAL_CORRECTNESS, sample.id, value, None, classification)

    def answer_correctness(
        self, sample: EvalSample, weights: MetricWeights | None = None
    ) -> MetricResult:
        weights = weights or self.weights
        factual = self.factual_correctness(sample)
        similarity = self.answer_similarity(sample)
        trace = AnswerCorrectnessTrace(
            w_factual=weights.w_factual,
            w_similarity=weights.w_similarity,
            factual_value=factual.value,
            similarity_value=similarity.value,
            factual=factual.trace,
            similarity=similarity.trace,
        )
        for sub in (factual, similarity):
            if sub.value is None:
                return MetricResult(
                    MetricName.ANSWER_CORRECTNESS, sample.id, None, sub.null_reason, trace
                )
        value = answer_correctness_score(factual.value, similarity.value, weights)
        return MetricResult(MetricName.ANSWER_CORRECTNESS, sample.id, value, None, trace)
