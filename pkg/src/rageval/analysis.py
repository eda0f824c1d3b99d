"""Grouped score statistics, Welch significance tests, and concordance.

Concordance follows the conditional-probability definitions literally: strict
inequalities, probabilities computed as exact integer count ratios, and null
metric values excluded from both sides of every ratio (a judge failure is not
evidence about answer correctness). All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from scipy import stats as scipy_stats

from .core import EvalSample, MetricResult


class AnalysisError(Exception):
    pass


class UnresolvedSampleIdError(AnalysisError):
    def __init__(self, sample_id: str):
        super().__init__(f"metric result references unknown sample id {sample_id!r}")
        self.sample_id = sample_id


class MissingRetrievalFlagError(AnalysisError):
    def __init__(self, sample_id: str):
        super().__init__(f"sample {sample_id!r} carries no retrieval_correct flag")
        self.sample_id = sample_id


class NoLabelsError(AnalysisError):
    pass


class InsufficientDataError(AnalysisError):
    pass


@dataclass(frozen=True)
class GroupedStats:
    """Mean and sample s.d. of one metric within one retrieval-correct group."""

    metric_name: str
    retrieval_correct: bool
    n: int
    mean: float | None
    sd: float | None
    null_count: int


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    variance = math.fsum((x - mean) ** 2 for x in values) / (n - 1)
    return mean, math.sqrt(variance)


def group_stats(
    results: Iterable[MetricResult], samples: Iterable[EvalSample]
) -> list[GroupedStats]:
    """One row per (metric, retrieval_correct) group over non-null values."""
    by_id = {sample.id: sample for sample in samples}
    values: dict[tuple[str, bool], list[float]] = {}
    nulls: dict[tuple[str, bool], int] = {}
    for result in results:
        sample = by_id.get(result.sample_id)
        if sample is None:
            raise UnresolvedSampleIdError(result.sample_id)
        if sample.retrieval_correct is None:
            raise MissingRetrievalFlagError(sample.id)
        key = (result.metric_name.value, sample.retrieval_correct)
        if result.value is None:
            nulls[key] = nulls.get(key, 0) + 1
            values.setdefault(key, [])
        else:
            values.setdefault(key, []).append(result.value)
    rows = []
    for key in sorted(values, key=lambda k: (k[0], not k[1])):
        metric_name, flag = key
        group = values[key]
        mean, sd = _mean_sd(group) if group else (None, None)
        rows.append(
            GroupedStats(
                metric_name=metric_name,
                retrieval_correct=flag,
                n=len(group),
                mean=mean,
                sd=sd,
                null_count=nulls.get(key, 0),
            )
        )
    return rows


@dataclass(frozen=True)
class ConcordanceThresholds:
    """High thresholds gate the "correct" condition, low ones the "wrong" condition."""

    theta11: float
    theta12: float
    theta21: float
    theta22: float

    def __post_init__(self) -> None:
        for name in ("theta11", "theta12", "theta21", "theta22"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.theta11, self.theta12, self.theta21, self.theta22)


@dataclass(frozen=True)
class ConcordanceCounts:
    considered: int
    excluded_null: int
    excluded_unlabeled: int
    joint_high_total: int
    joint_high_correct: int
    joint_low_total: int
    joint_low_wrong: int
    m1_high_total: int
    m1_high_correct: int
    m2_high_total: int
    m2_high_correct: int
    m1_low_total: int
    m1_low_wrong: int
    m2_low_total: int
    m2_low_wrong: int
    boundary_high: int
    boundary_low: int


def _ratio(numerator: int, denominator: int) -> float | None:
    return None if denominator == 0 else numerator / denominator


@dataclass(frozen=True)
class ConcordanceReport:
    """Thresholded conditional probabilities with their underlying counts.

    Every probability equals numerator/denominator of the integer counts
    exactly and is None when its denominator is zero.
    """

    thresholds: ConcordanceThresholds
    metric_pair: tuple[str, str]
    p_correct_given_high: float | None
    p_wrong_given_low: float | None
    p_correct_given_m1_high: float | None
    p_correct_given_m2_high: float | None
    p_wrong_given_m1_low: float | None
    p_wrong_given_m2_low: float | None
    counts: ConcordanceCounts

    def to_dict(self) -> dict[str, Any]:
        return {
            "thresholds": {
                "theta11": self.thresholds.theta11,
                "theta12": self.thresholds.theta12,
                "theta21": self.thresholds.theta21,
                "theta22": self.thresholds.theta22,
            },
            "metric_pair": list(self.metric_pair),
            "p_correct_given_high": self.p_correct_given_high,
            "p_wrong_given_low": self.p_wrong_given_low,
            "p_correct_given_m1_high": self.p_correct_given_m1_high,
            "p_correct_given_m2_high": self.p_correct_given_m2_high,
            "p_wrong_given_m1_low": self.p_wrong_given_m1_low,
            "p_wrong_given_m2_low": self.p_wrong_given_m2_low,
            "counts": self.counts.__dict__.copy(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConcordanceReport":
        return cls(
            thresholds=ConcordanceThresholds(**data["thresholds"]),
            metric_pair=tuple(data["metric_pair"]),
            p_correct_given_high=data["p_correct_given_high"],
            p_wrong_given_low=data["p_wrong_given_low"],
            p_correct_given_m1_high=data["p_correct_given_m1_high"],
            p_correct_given_m2_high=data["p_correct_given_m2_high"],
            p_wrong_given_m1_low=data["p_wrong_given_m1_low"],
            p_wrong_given_m2_low=data["p_wrong_given_m2_low"],
            counts=ConcordanceCounts(**data["counts"]),
        )


def concordance(
    samples: Sequence[EvalSample],
    scores: Mapping[str, Mapping[str, float | None]],
    thresholds: ConcordanceThresholds,
    metric_pair: tuple[str, str] = ("factual_correctness", "faithfulness"),
) -> ConcordanceReport:
    """Empirical conditional probabilities of correctness given thresholded scores.

    Counts only samples with a human_correct label and non-null values for
    both metrics; inequalities are strict, so samples exactly at a threshold
    fall outside both conditions (their number is reported separately).
    """
    m1_name, m2_name = metric_pair
    m1_scores = scores.get(m1_name, {})
    m2_scores = scores.get(m2_name, {})
    if not any(sample.human_correct is not None for sample in samples):
        raise NoLabelsError("no sample carries a human_correct label")

    excluded_unlabeled = 0
    excluded_null = 0
    triples: list[tuple[bool, float, float]] = []
    for sample in samples:
        if sample.human_correct is None:
            excluded_unlabeled += 1
            continue
        m1 = m1_scores.get(sample.id)
        m2 = m2_scores.get(sample.id)
        if m1 is None or m2 is None:
            excluded_null += 1
            continue
        triples.append((sample.human_correct, m1, m2))

    t = thresholds
    joint_high = [(c, m1, m2) for c, m1, m2 in triples if m1 > t.theta11 and m2 > t.theta12]
    joint_low = [(c, m1, m2) for c, m1, m2 in triples if m1 < t.theta21 and m2 < t.theta22]
    m1_high = [(c, m1, m2) for c, m1, m2 in triples if m1 > t.theta11]
    m2_high = [(c, m1, m2) for c, m1, m2 in triples if m2 > t.theta12]
    m1_low = [(c, m1, m2) for c, m1, m2 in triples if m1 < t.theta21]
    m2_low = [(c, m1, m2) for c, m1, m2 in triples if m2 < t.theta22]

    counts = ConcordanceCounts(
        considered=len(triples),
        excluded_null=excluded_null,
        excluded_unlabeled=excluded_unlabeled,
        joint_high_total=len(joint_high),
        joint_high_correct=sum(1 for c, _, _ in joint_high if c),
        joint_low_total=len(joint_low),
        joint_low_wrong=sum(1 for c, _, _ in joint_low if not c),
        m1_high_total=len(m1_high),
        m1_high_correct=sum(1 for c, _, _ in m1_high if c),
        m2_high_total=len(m2_high),
        m2_high_correct=sum(1 for c, _, _ in m2_high if c),
        m1_low_total=len(m1_low),
        m1_low_wrong=sum(1 for c, _, _ in m1_low if not c),
        m2_low_total=len(m2_low),
        m2_low_wrong=sum(1 for c, _, _ in m2_low if not c),
        boundary_high=sum(1 for _, m1, m2 in triples if m1 == t.theta11 or m2 == t.theta12),
        boundary_low=sum(1 for _, m1, m2 in triples if m1 == t.theta21 or m2 == t.theta22),
    )
    return ConcordanceReport(
        thresholds=thresholds,
        metric_pair=(m1_name, m2_name),
        p_correct_given_high=_ratio(counts.joint_high_correct, counts.joint_high_total),
        p_wrong_given_low=_ratio(counts.joint_low_wrong, counts.joint_low_total),
        p_correct_given_m1_high=_ratio(counts.m1_high_correct, counts.m1_high_total),
        p_correct_given_m2_high=_ratio(counts.m2_high_correct, counts.m2_high_total),
        p_wrong_given_m1_low=_ratio(counts.m1_low_wrong, counts.m1_low_total),
        p_wrong_given_m2_low=_ratio(counts.m2_low_wrong, counts.m2_low_total),
        counts=counts,
    )


def threshold_sweep(
    samples: Sequence[EvalSample],
    scores: Mapping[str, Mapping[str, float | None]],
    grid: Sequence[tuple[float, float, float, float]],
    metric_pair: tuple[str, str] = ("factual_correctness", "faithfulness"),
) -> list[ConcordanceReport]:
    """One concordance report per grid point, in grid order."""
    return [
        concordance(samples, scores, ConcordanceThresholds(*point), metric_pair)
        for point in grid
    ]


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float


def welch_t_test(
    a: Sequence[float], b: Sequence[float], sidedness: str = "two_sided"
) -> TTestResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.

    ``one_sided_greater`` tests mean(a) > mean(b).
    """
    if sidedness not in ("two_sided", "one_sided_greater"):
        raise ValueError(f"unknown sidedness {sidedness!r}")
    if len(a) < 2 or len(b) < 2:
        raise InsufficientDataError("both groups need at least two observations")
    na, nb = len(a), len(b)
    mean_a = math.fsum(a) / na
    mean_b = math.fsum(b) / nb
    var_a = math.fsum((x - mean_a) ** 2 for x in a) / (na - 1)
    var_b = math.fsum((x - mean_b) ** 2 for x in b) / (nb - 1)
    se_a, se_b = var_a / na, var_b / nb
    se_sq = se_a + se_b
    if se_sq == 0.0:
        # degenerate zero-variance groups
        t = 0.0 if mean_a == mean_b else math.copysign(math.inf, mean_a - mean_b)
        df = float(na + nb - 2)
    else:
        t = (mean_a - mean_b) / math.sqrt(se_sq)
        df = se_sq**2 / (se_a**2 / (na - 1) + se_b**2 / (nb - 1))
    if sidedness == "two_sided":
        p = 2.0 * float(scipy_stats.t.sf(abs(t), df)) if math.isfinite(t) else 0.0
    else:
        if math.isfinite(t):
            p = float(scipy_stats.t.sf(t, df))
        else:
            p = 0.0 if t > 0 else 1.0
    return TTestResult(t=t, p=p, df=df)
