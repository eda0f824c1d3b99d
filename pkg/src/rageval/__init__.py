"""Transparent RAG evaluation toolkit.

Judge-LLM metrics with full intermediate-trace capture, exact top-k retrieval
accuracy, and threshold concordance analysis against human correctness labels.
"""

from .core import (
    EvalSample,
    MetricName,
    MetricResult,
    NullReason,
    SentenceList,
    load_dataset,
    split_sentences,
    validate_sample,
)
from .metrics import MetricEngine, MetricWeights

__version__ = "0.1.0"

__all__ = [
    "EvalSample",
    "MetricEngine",
    "MetricName",
    "MetricResult",
    "MetricWeights",
    "NullReason",
    "SentenceList",
    "load_dataset",
    "split_sentences",
    "validate_sample",
    "__version__",
]
