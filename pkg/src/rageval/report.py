"""Run orchestration and emission.

A run directory is the unit of reproducibility: samples.jsonl (the dataset
echoed back, unknown keys included), scores.jsonl, traces.jsonl, a manifest
with content digests, and derived tables. Score and trace files are appended
during the run and rewritten in (sample_id, metric_name) order at
finalization, so two runs with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .analysis import ConcordanceReport, GroupedStats
from .core import (
    EvalSample,
    MetricName,
    MetricResult,
    NullReason,
    load_dataset,
    normalize_whitespace,
    required_fields_for,
    sample_from_record,
    split_sentences,
    validate_sample,
)
from .metrics import (
    ErrorTrace,
    MetricEngine,
    answer_correctness_score,
    answer_relevance_score,
    clamp01,
    context_relevance_score,
    factual_correctness_score,
    faithfulness_score,
    trace_to_dict,
)
from .parsing import (
    ParseError,
    parse_classification,
    parse_context_extraction,
    parse_questions,
    parse_statements,
    parse_verdicts,
)
from .prompts import DEFAULT_PROMPTS, PromptLibrary, render, statements_block

logger = logging.getLogger(__name__)

SCORES_FILE = "scores.jsonl"
TRACES_FILE = "traces.jsonl"
SAMPLES_FILE = "samples.jsonl"
MANIFEST_FILE = "manifest.json"
ACCURACY_FILE = "accuracy.json"
CONCORDANCE_FILE = "concordance.json"

TABLE_STYLES = ("table1", "table2", "table3")


class RunDirectoryExistsError(Exception):
    def __init__(self, path: Path):
        super().__init__(f"output directory {path} exists and is not empty (use --force)")
        self.path = path


class MissingInputsError(Exception):
    def __init__(self, style: str, missing: str):
        super().__init__(f"cannot render {style}: missing {missing}")
        self.style = style
        self.missing = missing


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def prepare_out_dir(path: str | Path, force: bool = False) -> Path:
    out_dir = Path(path)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise RunDirectoryExistsError(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_jsonl(path: Path, records: Iterable[Mapping[str, Any]]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(_dumps(record) + "\n")
    tmp.replace(path)


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records


def read_samples(run_dir: str | Path) -> list[EvalSample]:
    path = Path(run_dir) / SAMPLES_FILE
    return [sample_from_record(r, i) for i, r in enumerate(read_jsonl(path), start=1)]


def read_scores(run_dir: str | Path) -> list[dict[str, Any]]:
    return read_jsonl(Path(run_dir) / SCORES_FILE)


def scores_by_metric(run_dir: str | Path) -> dict[str, dict[str, float | None]]:
    """scores.jsonl pivoted to metric -> sample_id -> value (None for nulls)."""
    table: dict[str, dict[str, float | None]] = {}
    for record in read_scores(run_dir):
        table.setdefault(record["metric_name"], {})[record["sample_id"]] = record["value"]
    return table


def run_evaluation(
    samples: Sequence[EvalSample],
    metrics: Sequence[MetricName | str],
    engine: MetricEngine,
    out_dir: str | Path,
    concurrency: int = 4,
    force: bool = False,
    dataset_path: str | Path | None = None,
    config_snapshot: Mapping[str, Any] | None = None,
) -> Path:
    """Evaluate samples x metrics and write a complete run directory.

    Per-result failures are recorded as nulls and the run continues; only an
    unwritable output directory or an invalid dataset is fatal.
    """
    metric_names = [MetricName(m) for m in metrics]
    required = required_fields_for(metric_names)
    for sample in samples:
        validate_sample(sample, required)
    out = prepare_out_dir(out_dir, force=force)

    _write_jsonl(out / SAMPLES_FILE, (s.to_record() for s in samples))

    scores_path = out / SCORES_FILE
    traces_path = out / TRACES_FILE
    write_lock = threading.Lock()
    scores_handle = open(scores_path, "w", encoding="utf-8")
    traces_handle = open(traces_path, "w", encoding="utf-8")

    def evaluate_one(sample: EvalSample, metric: MetricName) -> MetricResult:
        try:
            return engine.compute(sample, metric)
        except Exception as exc:  # never abort the run for one result
            logger.warning("%s(%s) failed: %s", metric.value, sample.id, exc)
            return MetricResult(
                metric_name=metric,
                sample_id=sample.id,
                value=None,
                null_reason=NullReason.BACKEND_ERROR,
                trace=ErrorTrace(message=f"{type(exc).__name__}: {exc}"),
            )

    results: list[MetricResult] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
            futures = [
                pool.submit(evaluate_one, sample, metric)
                for sample in samples
                for metric in metric_names
            ]
            for future in futures:
                result = future.result()
                results.append(result)
                score_line = _dumps(result.to_score_record())
                trace_line = _dumps(
                    {
                        "sample_id": result.sample_id,
                        "metric_name": result.metric_name.value,
                        "trace": trace_to_dict(result.trace),
                    }
                )
                with write_lock:
                    scores_handle.write(score_line + "\n")
                    traces_handle.write(trace_line + "\n")
                    scores_handle.flush()
                    traces_handle.flush()
    finally:
        scores_handle.close()
        traces_handle.close()

    # finalize: rewrite both files in deterministic order
    order = lambda record: (record["sample_id"], record["metric_name"])
    _write_jsonl(scores_path, sorted(read_jsonl(scores_path), key=order))
    _write_jsonl(traces_path, sorted(read_jsonl(traces_path), key=order))

    nulls_per_metric: dict[str, int] = {m.value: 0 for m in metric_names}
    null_reasons: dict[str, int] = {}
    for result in results:
        if result.value is None:
            nulls_per_metric[result.metric_name.value] += 1
            reason = result.null_reason.value
            null_reasons[reason] = null_reasons.get(reason, 0) + 1
    manifest = {
        "run_id": uuid.uuid4().hex,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "backend_ids": {
            "chat": engine.chat.backend_id,
            "embedding": engine.embedder.backend_id if engine.embedder else None,
        },
        "models": {
            "judge": engine.model,
            "embedding": engine.embedder.model_id if engine.embedder else None,
        },
        "prompt_digests": engine.prompts.digests(),
        "config": dict(config_snapshot or {}),
        "dataset_digest": file_digest(Path(dataset_path)) if dataset_path else None,
        "metrics": [m.value for m in metric_names],
        "counts": {
            "samples": len(samples),
            "results": len(results),
            "evaluated": sum(1 for r in results if r.value is not None),
            "nulls_per_metric": nulls_per_metric,
            "null_reasons": null_reasons,
        },
        "files": {
            SCORES_FILE: file_digest(scores_path),
            TRACES_FILE: file_digest(traces_path),
            SAMPLES_FILE: file_digest(out / SAMPLES_FILE),
        },
    }
    (out / MANIFEST_FILE).write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return out


# --- Tables -------------------------------------------------------------------

_TABLE2_METRIC_ORDER = [m.value for m in MetricName]


def _format_cell(mean: float | None, sd: float | None) -> str:
    if mean is None:
        return "—"
    return f"{mean:.2f}({sd:.2f})"


def _rows_to_text(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = [" | ".join(headers)]
    lines.extend(" | ".join(row) for row in rows)
    return "\n".join(lines) + "\n"


def _write_table(run_dir: Path, style: str, headers: Sequence[str], rows: Sequence[Sequence[str]], footnotes: Sequence[str] = ()) -> str:
    tables_dir = run_dir / "tables"
    tables_dir.mkdir(exist_ok=True)
    text = _rows_to_text(headers, rows)
    if footnotes:
        text += "".join(f"{note}\n" for note in footnotes)
    (tables_dir / f"{style}.txt").write_text(text, encoding="utf-8")
    csv_lines = [",".join(headers)]
    csv_lines.extend(",".join(f'"{cell}"' if "," in cell else cell for cell in row) for row in rows)
    (tables_dir / f"{style}.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return text


def render_table1(run_dir: str | Path) -> str:
    """Retrieval accuracy percentages per k, one row per embedding model."""
    run = Path(run_dir)
    accuracy_path = run / ACCURACY_FILE
    if not accuracy_path.exists():
        raise MissingInputsError("table1", ACCURACY_FILE)
    data = json.loads(accuracy_path.read_text(encoding="utf-8"))
    rows_by_model = data if isinstance(data, list) else [data]
    ks = [k for k, _ in rows_by_model[0]["rows"]]
    headers = ["model"] + [f"k={k}" for k in ks]
    rows = [
        [entry["model_id"]] + [f"{acc:.2f}" for _, acc in entry["rows"]]
        for entry in rows_by_model
    ]
    return _write_table(run, "table1", headers, rows)


def render_table2(run_dir: str | Path) -> str:
    """Grouped mean(s.d.) per metric, split by retrieval correctness."""
    from .analysis import group_stats  # deferred: analysis imports core only

    run = Path(run_dir)
    for name in (SCORES_FILE, SAMPLES_FILE):
        if not (run / name).exists():
            raise MissingInputsError("table2", name)
    samples = read_samples(run)
    score_records = read_scores(run)
    results = [
        MetricResult(
            metric_name=MetricName(r["metric_name"]),
            sample_id=r["sample_id"],
            value=r["value"],
            null_reason=NullReason(r["null_reason"]) if r["null_reason"] else None,
            trace={"replayed": True},
        )
        for r in score_records
    ]
    stats = group_stats(results, samples)
    by_key = {(s.metric_name, s.retrieval_correct): s for s in stats}
    metric_names = [m for m in _TABLE2_METRIC_ORDER if any(s.metric_name == m for s in stats)]
    headers = ["retrieval_correct"] + metric_names + ["questions"]
    group_sizes = {
        flag: len({s.id for s in samples if s.retrieval_correct is flag}) for flag in (True, False)
    }
    rows = []
    footnotes = []
    for flag, label in ((True, "Yes"), (False, "No")):
        row = [label]
        for metric in metric_names:
            cell = by_key.get((metric, flag))
            if cell is None or cell.n == 0:
                row.append("—")
                nulls = cell.null_count if cell else 0
                footnotes.append(f"— {metric}/{label}: n=0 (nulls={nulls})")
            else:
                row.append(_format_cell(cell.mean, cell.sd))
        row.append(str(group_sizes[flag]))
        rows.append(row)
    return _write_table(run, "table2", headers, rows, footnotes)


def render_table3(run_dir: str | Path) -> str:
    """Concordance probabilities per metric and jointly, at the stored thresholds."""
    run = Path(run_dir)
    concordance_path = run / CONCORDANCE_FILE
    if not concordance_path.exists():
        raise MissingInputsError("table3", CONCORDANCE_FILE)
    report = ConcordanceReport.from_dict(
        json.loads(concordance_path.read_text(encoding="utf-8"))
    )
    m1, m2 = report.metric_pair
    fmt = lambda p: "—" if p is None else f"{p:.2f}"
    headers = ["probability", m1, m2, "joint"]
    rows = [
        [
            "P(correct | scores high)",
            fmt(report.p_correct_given_m1_high),
            fmt(report.p_correct_given_m2_high),
            fmt(report.p_correct_given_high),
        ],
        [
            "P(wrong | scores low)",
            fmt(report.p_wrong_given_m1_low),
            fmt(report.p_wrong_given_m2_low),
            fmt(report.p_wrong_given_low),
        ],
    ]
    thresholds = report.thresholds
    footnotes = [
        f"high thresholds: {thresholds.theta11:g}/{thresholds.theta12:g}; "
        f"low thresholds: {thresholds.theta21:g}/{thresholds.theta22:g}"
    ]
    return _write_table(run, "table3", headers, rows, footnotes)


def render_tables(run_dir: str | Path, style: str) -> str:
    if style == "table1":
        return render_table1(run_dir)
    if style == "table2":
        return render_table2(run_dir)
    if style == "table3":
        return render_table3(run_dir)
    raise ValueError(f"unknown table style {style!r}; choose from {TABLE_STYLES}")


def write_accuracy(out_dir: str | Path, model_id: str, rows: Sequence[tuple[int, float]]) -> Path:
    path = Path(out_dir) / ACCURACY_FILE
    payload = {"model_id": model_id, "rows": [[k, acc] for k, acc in rows]}
    path.write_text(_dumps(payload) + "\n", encoding="utf-8")
    return path


def write_concordance(run_dir: str | Path, report: ConcordanceReport) -> Path:
    path = Path(run_dir) / CONCORDANCE_FILE
    path.write_text(json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# --- Replay -------------------------------------------------------------------


@dataclass
class ReplayResult:
    checked: int
    divergences: list[str]

    @property
    def ok(self) -> bool:
        return not self.divergences


def _recompute(
    sample: EvalSample,
    metric: str,
    trace: Mapping[str, Any],
    prompts: PromptLibrary,
) -> tuple[float | None, str | None, list[str]]:
    """Re-derive a metric value from its recorded completions.

    Returns (value, null_reason, divergences-vs-trace). Raw completions and
    similarities are trusted inputs; everything derived from them (parses,
    counts, the score itself) is recomputed and compared.
    """
    problems: list[str] = []

    def check(name: str, expected: Any, actual: Any) -> None:
        if expected != actual:
            problems.append(f"{name}: recorded {actual!r}, recomputed {expected!r}")

    if trace.get("trace_type") == "ErrorTrace":
        return None, NullReason.BACKEND_ERROR.value, problems

    if metric == MetricName.FAITHFULNESS.value:
        prompt = render(
            prompts.statement_extraction,
            question=sample.question,
            answer=sample.generated_answer,
        )
        check("statement_extraction_prompt", prompt, trace.get("statement_extraction_prompt"))
        completion = trace.get("raw_statement_completion")
        if completion is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        try:
            statements = parse_statements(completion)
        except ParseError:
            return None, NullReason.NO_STATEMENTS.value, problems
        recorded = trace.get("statements") or {}
        check("statements", statements, list(recorded.get("statements", [])))
        verdict_prompt = render(
            prompts.verdict,
            context=sample.joined_context(),
            statements=statements_block(statements),
        )
        check("verdict_prompt", verdict_prompt, trace.get("verdict_prompt"))
        verdict_completion = trace.get("raw_verdict_completion")
        if verdict_completion is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        try:
            pairs = parse_verdicts(verdict_completion, len(statements))
        except ParseError:
            return None, NullReason.PARSE_FAILURE_EXHAUSTED.value, problems
        supported = [flag for flag, _ in pairs]
        check(
            "verdicts",
            supported,
            [v["supported"] for v in trace.get("verdicts", [])],
        )
        check("supported_count", sum(supported), trace.get("supported_count"))
        check("total_count", len(statements), trace.get("total_count"))
        return faithfulness_score(sum(supported), len(statements)), None, problems

    if metric == MetricName.ANSWER_RELEVANCE.value:
        prompt = render(prompts.question_generation, answer=sample.generated_answer)
        check("question_generation_prompt", prompt, trace.get("question_generation_prompt"))
        completion = trace.get("raw_completion")
        if completion is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        recorded_questions = list(trace.get("generated_questions", []))
        if trace.get("mode") == "single_call":
            try:
                questions = parse_questions(completion, max(1, len(recorded_questions)))
            except ParseError:
                return None, NullReason.PARSE_FAILURE_EXHAUSTED.value, problems
            if recorded_questions:
                check("generated_questions", questions, recorded_questions)
        similarities = list(trace.get("per_question_similarity", []))
        if not similarities:
            return None, NullReason.BACKEND_ERROR.value, problems
        value = answer_relevance_score(similarities)
        check("mean_similarity", value, trace.get("mean_similarity"))
        return value, None, problems

    if metric == MetricName.CONTEXT_RELEVANCE.value:
        context = sample.joined_context()
        prompt = render(prompts.context_extraction, question=sample.question, context=context)
        check("extraction_prompt", prompt, trace.get("extraction_prompt"))
        denominator = split_sentences(context).count
        check("context_sentence_count", denominator, trace.get("context_sentence_count"))
        completion = trace.get("raw_completion")
        if completion is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        try:
            insufficient, extracted = parse_context_extraction(completion)
        except ParseError:
            return None, NullReason.PARSE_FAILURE_EXHAUSTED.value, problems
        check("insufficient_information", insufficient, trace.get("insufficient_information"))
        check("extracted_sentences", extracted, list(trace.get("extracted_sentences", [])))
        if insufficient:
            return 0.0, None, problems
        normalized = normalize_whitespace(context)
        non_verbatim = sum(1 for s in extracted if normalize_whitespace(s) not in normalized)
        check("non_verbatim_count", non_verbatim, trace.get("non_verbatim_count"))
        value, capped = context_relevance_score(len(extracted), denominator)
        check("capped", capped, trace.get("capped"))
        return value, None, problems

    if metric == MetricName.ANSWER_SIMILARITY.value:
        raw = trace.get("raw_similarity")
        if raw is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        return clamp01(raw), None, problems

    if metric == MetricName.FACTUAL_CORRECTNESS.value:
        prompt = render(
            prompts.classification,
            question=sample.question,
            answer=sample.generated_answer,
            ground_truth=sample.ground_truth,
        )
        check("classification_prompt", prompt, trace.get("classification_prompt"))
        completion = trace.get("raw_completion")
        if completion is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        try:
            tp, fp, fn = parse_classification(completion)
        except ParseError:
            return None, NullReason.PARSE_FAILURE_EXHAUSTED.value, problems
        from .metrics import FactualClassification

        rebuilt = FactualClassification.from_lists(tp, fp, fn)
        check("tp", list(rebuilt.tp), list(trace.get("tp", [])))
        check("fp", list(rebuilt.fp), list(trace.get("fp", [])))
        check("fn", list(rebuilt.fn), list(trace.get("fn", [])))
        value = factual_correctness_score(len(rebuilt.tp), len(rebuilt.fp), len(rebuilt.fn))
        if value is None:
            return None, NullReason.EMPTY_CLASSIFICATION.value, problems
        return value, None, problems

    if metric == MetricName.ANSWER_CORRECTNESS.value:
        factual_trace = trace.get("factual")
        similarity_trace = trace.get("similarity")
        if factual_trace is None or similarity_trace is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        factual_value, factual_null, sub_problems = _recompute(
            sample, MetricName.FACTUAL_CORRECTNESS.value, factual_trace, prompts
        )
        problems.extend(f"factual.{p}" for p in sub_problems)
        check("factual_value", factual_value, trace.get("factual_value"))
        raw = similarity_trace.get("raw_similarity")
        similarity_value = clamp01(raw) if raw is not None else None
        check("similarity_value", similarity_value, trace.get("similarity_value"))
        if factual_value is None:
            return None, factual_null, problems
        if similarity_value is None:
            return None, NullReason.BACKEND_ERROR.value, problems
        from .metrics import MetricWeights

        weights = MetricWeights(trace.get("w_factual", 0.75), trace.get("w_similarity", 0.25))
        return answer_correctness_score(factual_value, similarity_value, weights), None, problems

    raise ValueError(f"unknown metric {metric!r}")


def replay_run(run_dir: str | Path, prompts: PromptLibrary | None = None) -> ReplayResult:
    """Re-derive every score from its trace and check run-directory consistency.

    Raises FileNotFoundError when a required file is absent; any divergence
    (score, trace field, pairing, manifest digest) is reported, first one
    first.
    """
    run = Path(run_dir)
    for name in (SCORES_FILE, TRACES_FILE, SAMPLES_FILE, MANIFEST_FILE):
        if not (run / name).exists():
            raise FileNotFoundError(run / name)
    prompts = prompts or DEFAULT_PROMPTS
    samples = {sample.id: sample for sample in read_samples(run)}
    scores = read_scores(run)
    traces = read_jsonl(run / TRACES_FILE)
    manifest = json.loads((run / MANIFEST_FILE).read_text(encoding="utf-8"))

    divergences: list[str] = []
    trace_index = {(t["sample_id"], t["metric_name"]): t["trace"] for t in traces}
    score_keys = {(s["sample_id"], s["metric_name"]) for s in scores}
    for key in sorted(score_keys - set(trace_index)):
        divergences.append(f"{key[0]}/{key[1]}: score record has no trace record")
    for key in sorted(set(trace_index) - score_keys):
        divergences.append(f"{key[0]}/{key[1]}: trace record has no score record")

    checked = 0
    for record in scores:
        key = (record["sample_id"], record["metric_name"])
        if key not in trace_index:
            continue
        sample = samples.get(record["sample_id"])
        if sample is None:
            divergences.append(f"{key[0]}/{key[1]}: sample missing from samples.jsonl")
            continue
        checked += 1
        value, null_reason, problems = _recompute(sample, key[1], trace_index[key], prompts)
        label = f"{key[0]}/{key[1]}"
        for problem in problems:
            divergences.append(f"{label}: {problem}")
        if record["value"] is None:
            if value is not None:
                divergences.append(
                    f"{label}: recorded null ({record['null_reason']}) but replay yields {value}"
                )
        else:
            if value is None:
                divergences.append(
                    f"{label}: recorded {record['value']} but replay yields null ({null_reason})"
                )
            elif abs(value - record["value"]) > 1e-12:
                divergences.append(
                    f"{label}: recorded {record['value']} but replay yields {value}"
                )

    for name in (SCORES_FILE, TRACES_FILE, SAMPLES_FILE):
        recorded = manifest.get("files", {}).get(name)
        if recorded and recorded != file_digest(run / name):
            divergences.append(f"{name}: digest differs from manifest")
    recorded_counts = manifest.get("counts", {})
    if recorded_counts.get("results") not in (None, len(scores)):
        divergences.append(
            f"manifest: results count {recorded_counts.get('results')} != {len(scores)} score records"
        )
    return ReplayResult(checked=checked, divergences=divergences)
