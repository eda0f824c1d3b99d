"""Prompt templates for the judge-LLM steps.

Templates use literal ``{question}``/``{answer}``/``{context}``/
``{ground_truth}``/``{statements}`` placeholders; substitution is plain text
replacement, so braces in template bodies (the classification template
contains a JSON skeleton) pass through untouched. Each template carries a
content-derived version id that is recorded in every trace and manifest,
because scores are prompt-dependent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

STATEMENT_EXTRACTION_TEMPLATE = (
    "Given a question and answer, create one or more statements from each sentence "
    "in the given answer.\n"
    "question: {question}\n"
    "answer: {answer}"
)

VERDICT_TEMPLATE = (
    "Consider the given context and following statements, then determine whether they "
    "are supported by the information present in the context. Provide a brief explanation "
    "for each statement before arriving at the verdict (Yes/No). Provide a final verdict "
    "for each statement in order at the end in the given format. Do not deviate from the "
    "specified format.\n"
    "context: {context}\n"
    "{statements}"
)

QUESTION_GENERATION_TEMPLATE = (
    "Generate a question for the given answer.\n"
    "answer: {answer}"
)

CONTEXT_EXTRACTION_TEMPLATE = (
    "Please extract relevant sentences from the provided context that can potentially "
    "help answer the following question. If no relevant sentences are found, or if you "
    "believe the question cannot be answered from the given context, return the phrase "
    '"Insufficient Information". While extracting candidate sentences you\'re not allowed '
    "to make any changes to sentences from given context.\n"
    "question: {question}\n"
    "context: {context}"
)

CLASSIFICATION_TEMPLATE = (
    "Extract following from given question and ground truth.\n"
    '"TP": statements that are present in both the answer and the ground truth,'
    '"FP": statements present in the answer but not found in the ground truth,'
    '"FN": relevant statements found in the ground truth but omitted in the answer.\n'
    "question: {question},\n"
    "answer: {answer},\n"
    "ground truth: {ground_truth},\n"
    "Extracted statements: {\n"
    '    "TP": [statement 1, statement 4, ...],\n'
    '    "FP": [statement 2, ...],\n'
    '    "FN": [statement 3, statement 5, statement 6, ...]\n'
    "}"
)

PLACEHOLDERS = ("question", "answer", "context", "ground_truth", "statements")


def render(template: str, **values: str) -> str:
    """Substitute known placeholders by literal replacement."""
    unknown = set(values) - set(PLACEHOLDERS)
    if unknown:
        raise ValueError(f"unknown placeholders: {sorted(unknown)}")
    rendered = template
    for name, value in values.items():
        rendered = rendered.replace("{" + name + "}", value)
    return rendered


def statements_block(statements: Iterable[str]) -> str:
    """Render statements the way the verdict prompt expects, one per line."""
    return "\n".join(f"statement: {statement}" for statement in statements)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptLibrary:
    """The five judge templates, overridable from a templates directory."""

    statement_extraction: str = STATEMENT_EXTRACTION_TEMPLATE
    verdict: str = VERDICT_TEMPLATE
    question_generation: str = QUESTION_GENERATION_TEMPLATE
    context_extraction: str = CONTEXT_EXTRACTION_TEMPLATE
    classification: str = CLASSIFICATION_TEMPLATE

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptLibrary":
        """Load ``<name>.txt`` overrides from a directory; missing files keep defaults."""
        base = Path(path)
        overrides = {}
        for spec in fields(cls):
            candidate = base / f"{spec.name}.txt"
            if candidate.exists():
                overrides[spec.name] = candidate.read_text(encoding="utf-8")
        return cls(**overrides)

    def digests(self) -> dict[str, str]:
        return {spec.name: _digest(getattr(self, spec.name)) for spec in fields(self)}

    def versions(self) -> dict[str, str]:
        """Short content-derived version ids, one per template."""
        return {name: digest[:12] for name, digest in self.digests().items()}

    def versions_for(self, *names: str) -> dict[str, str]:
        versions = self.versions()
        return {name: versions[name] for name in names}


DEFAULT_PROMPTS = PromptLibrary()
