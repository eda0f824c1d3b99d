"""Command-line entry point: evaluate, retrieve, analyze, report, replay.

Exit codes: 0 success, 1 user error (bad flags, unreadable inputs, existing
outputs without --force), 2 backend or runtime failure. Flags override config
file values, which override built-in defaults; --verbose prints where each
setting came from.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import analysis, backends, report
from .backends import (
    BackendError,
    CachingChatBackend,
    MockEmbedder,
    OpenAIChatBackend,
    OpenAIEmbeddingBackend,
    ResponseCache,
    ScriptedChatBackend,
)
from .core import (
    DatasetError,
    MetricName,
    load_dataset,
    required_fields_for,
    validate_sample,
)
from .metrics import MetricEngine, MetricWeights
from .prompts import DEFAULT_PROMPTS, PromptLibrary
from .retriever import (
    EmptyRunsError,
    RetrieverError,
    VectorIndex,
    index_corpus,
    load_corpus,
    load_gold,
    retrieval_accuracy,
    retrieve_top_k,
)

logger = logging.getLogger(__name__)


class CliUserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse defaults to exit code 2
        raise CliUserError(message)


def _formatter(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=96)


DEFAULTS: dict[str, Any] = {
    "backend": {
        "name": "openai",
        "base_url": None,
        "api_key": None,
        "model": "judge",
        "mock_script": None,
        "cache_path": None,
        "max_attempts": 3,
        "backoff_base": 0.5,
        "timeout": 60.0,
        "seed": None,
    },
    "embedding": {
        "name": None,  # defaults to the chat backend family
        "model": "mock-embedding",
        "dim": 8,
    },
    "concurrency": 4,
    "question_count": 3,
    "question_mode": "single_call",
    "max_parse_retries": 2,
    "weights": {"w_factual": 0.75, "w_similarity": 0.25},
    "templates_dir": None,
}


def _deep_merge(base: dict[str, Any], override: Mapping[str, Any], source: str, sources: dict[str, str], prefix: str = "") -> None:
    for key, value in override.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value, source, sources, prefix=path + ".")
        elif value is not None:
            base[key] = value
            sources[path] = source


def resolve_config(
    config_path: str | None, flag_overrides: Mapping[str, Any]
) -> tuple[dict[str, Any], dict[str, str]]:
    """Layer defaults < config file < flags; returns (config, per-key source)."""
    config = json.loads(json.dumps(DEFAULTS))  # deep copy
    sources = {key: "default" for key in _flatten(DEFAULTS)}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliUserError(f"config file not found: {path}")
        try:
            file_config = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliUserError(f"config file is not valid JSON: {exc}") from exc
        _deep_merge(config, file_config, "config", sources)
    _deep_merge(config, flag_overrides, "flag", sources)
    return config, sources


def _flatten(mapping: Mapping[str, Any], prefix: str = "") -> list[str]:
    keys = []
    for key, value in mapping.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            keys.extend(_flatten(value, path + "."))
        else:
            keys.append(path)
    return keys


def _print_precedence(config: Mapping[str, Any], sources: Mapping[str, str]) -> None:
    print("configuration (value <- source):")
    flat: dict[str, Any] = {}

    def collect(mapping: Mapping[str, Any], prefix: str = "") -> None:
        for key, value in mapping.items():
            path = f"{prefix}{key}"
            if isinstance(value, Mapping):
                collect(value, path + ".")
            else:
                flat[path] = value

    collect(config)
    for path in sorted(flat):
        print(f"  {path} = {flat[path]!r} <- {sources.get(path, 'default')}")


def _build_chat_backend(config: Mapping[str, Any]) -> backends.ChatBackend:
    backend_config = config["backend"]
    name = backend_config["name"]
    if name == "mock":
        script = backend_config.get("mock_script")
        if not script:
            raise CliUserError("mock backend requires --mock-script (or backend.mock_script)")
        if not Path(script).exists():
            raise CliUserError(f"mock script not found: {script}")
        chat: backends.ChatBackend = ScriptedChatBackend.from_script_file(script)
    elif name == "openai":
        chat = OpenAIChatBackend(
            base_url=backend_config.get("base_url"),
            api_key=backend_config.get("api_key"),
            max_attempts=int(backend_config.get("max_attempts", 3)),
            backoff_base=float(backend_config.get("backoff_base", 0.5)),
            timeout=float(backend_config.get("timeout", 60.0)),
            seed=backend_config.get("seed"),
        )
    else:
        raise CliUserError(f"unknown backend {name!r}; valid: mock, openai")
    cache_path = backend_config.get("cache_path")
    if cache_path:
        chat = CachingChatBackend(chat, ResponseCache(cache_path))
    return chat


def _build_embedder(config: Mapping[str, Any]) -> backends.EmbeddingBackend:
    embedding_config = config["embedding"]
    name = embedding_config.get("name") or (
        "mock" if config["backend"]["name"] == "mock" else "openai"
    )
    if name == "mock":
        return MockEmbedder(
            dim=int(embedding_config.get("dim", 8)),
            model_id=embedding_config.get("model", "mock-embedding"),
        )
    if name == "openai":
        backend_config = config["backend"]
        return OpenAIEmbeddingBackend(
            model=embedding_config.get("model", "mock-embedding"),
            base_url=backend_config.get("base_url"),
            api_key=backend_config.get("api_key"),
            max_attempts=int(backend_config.get("max_attempts", 3)),
            backoff_base=float(backend_config.get("backoff_base", 0.5)),
            timeout=float(backend_config.get("timeout", 60.0)),
        )
    raise CliUserError(f"unknown embedding backend {name!r}; valid: mock, openai")


def _parse_metrics(raw: str) -> list[MetricName]:
    names = [name.strip() for name in raw.split(",") if name.strip()]
    if not names or names == ["all"]:
        return list(MetricName)
    metrics = []
    for name in names:
        try:
            metrics.append(MetricName(name))
        except ValueError:
            valid = ", ".join(m.value for m in MetricName)
            raise CliUserError(f"unknown metric {name!r}; valid metrics: {valid}") from None
    return metrics


def _parse_k_list(raw: str) -> list[int]:
    try:
        ks = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise CliUserError(f"invalid k list {raw!r}; expected comma-separated integers") from None
    if not ks or any(k < 1 for k in ks):
        raise CliUserError("k values must be positive integers")
    return ks


def _parse_sweep(raw: str) -> list[float]:
    parts = raw.split(":")
    if len(parts) != 3:
        raise CliUserError(f"invalid sweep {raw!r}; expected start:stop:step")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise CliUserError(f"invalid sweep {raw!r}; expected numeric start:stop:step") from None
    if step <= 0 or stop < start:
        raise CliUserError("sweep requires step > 0 and stop >= start")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(count)]


def _load_question_records(path: Path) -> list[dict[str, Any]]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "id" not in record or "question" not in record:
                raise CliUserError(f"{path}:{line_no}: question records need 'id' and 'question'")
            if record["id"] in seen:
                raise CliUserError(f"{path}:{line_no}: duplicate question id {record['id']!r}")
            seen.add(record["id"])
            records.append(record)
    return records


def _require_file(path: str | None, label: str) -> Path:
    if not path:
        raise CliUserError(f"missing required {label}")
    resolved = Path(path)
    if not resolved.exists():
        raise CliUserError(f"{label} not found: {resolved}")
    return resolved


def _check_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliUserError(f"output {path} exists (use --force to overwrite)")


# --- Commands -------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    flag_overrides: dict[str, Any] = {
        "backend": {
            "name": args.backend,
            "mock_script": args.mock_script,
            "cache_path": args.cache,
            "model": args.model,
            "base_url": args.base_url,
        },
        "concurrency": args.concurrency,
        "templates_dir": args.templates_dir,
    }
    config, sources = resolve_config(args.config, flag_overrides)
    if args.verbose:
        _print_precedence(config, sources)

    metrics = _parse_metrics(args.metrics)
    dataset_path = _require_file(args.dataset, "dataset")
    samples = load_dataset(dataset_path)
    for sample in samples:
        validate_sample(sample, required_fields_for(metrics))

    chat = _build_chat_backend(config)
    embedder = _build_embedder(config)
    prompts = (
        PromptLibrary.from_dir(config["templates_dir"])
        if config.get("templates_dir")
        else DEFAULT_PROMPTS
    )
    engine = MetricEngine(
        chat=chat,
        embedder=embedder,
        model=config["backend"]["model"],
        prompts=prompts,
        max_parse_retries=int(config["max_parse_retries"]),
        question_count=int(config["question_count"]),
        question_mode=config["question_mode"],
        weights=MetricWeights(**config["weights"]),
    )
    out_dir = report.run_evaluation(
        samples,
        metrics,
        engine,
        args.out,
        concurrency=int(config["concurrency"]),
        force=args.force,
        dataset_path=dataset_path,
        config_snapshot=config,
    )
    manifest = json.loads((out_dir / report.MANIFEST_FILE).read_text(encoding="utf-8"))
    counts = manifest["counts"]
    print(
        f"evaluated {counts['samples']} samples x {len(metrics)} metrics: "
        f"{counts['evaluated']} scores, {counts['results'] - counts['evaluated']} nulls"
    )
    for metric, nulls in sorted(counts["nulls_per_metric"].items()):
        if nulls:
            print(f"  nulls[{metric}] = {nulls}")
    print(f"run directory: {out_dir}")
    backend_failures = counts["null_reasons"].get("backend_error", 0)
    if counts["results"] > 0 and backend_failures == counts["results"]:
        print("error: every result failed with a backend error (backend unreachable?)", file=sys.stderr)
        return 2
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    flag_overrides: dict[str, Any] = {
        "embedding": {"name": args.embedding, "model": args.embedding_model, "dim": args.dim},
        "backend": {"base_url": args.base_url},
    }
    config, sources = resolve_config(args.config, flag_overrides)
    if args.verbose:
        _print_precedence(config, sources)
    if config["embedding"].get("name") is None:
        config["embedding"]["name"] = "mock"

    corpus_path = _require_file(args.corpus, "corpus file")
    questions_path = _require_file(args.questions, "questions file")
    gold_path = _require_file(args.gold, "gold file")
    ks = _parse_k_list(args.k)
    stamp_k = args.stamp_k
    out_dir = report.prepare_out_dir(args.out, force=args.force)

    chunks = load_corpus(corpus_path)
    gold = load_gold(gold_path)
    records = _load_question_records(questions_path)
    missing = [r["id"] for r in records if r["id"] not in gold]
    if missing:
        raise CliUserError(f"gold file has no entry for question ids: {missing[:5]}")

    embedder = _build_embedder(config)
    if args.index and Path(args.index).exists():
        index = VectorIndex.load(args.index)
        if index.model_id != embedder.model_id:
            raise CliUserError(
                f"index {args.index} was built with {index.model_id!r}, "
                f"embedder is {embedder.model_id!r}"
            )
    else:
        index = index_corpus(chunks, embedder)
        if args.index:
            index.save(args.index)

    depths = sorted(set(ks) | {stamp_k})
    runs = [
        retrieve_top_k(
            record["question"],
            index,
            embedder,
            k=max(depths),
            question_id=record["id"],
            gold_chunk_id=gold[record["id"]],
            ks=depths,
        )
        for record in records
    ]
    with open(out_dir / "runs.jsonl", "w", encoding="utf-8") as handle:
        for run in runs:
            handle.write(json.dumps(run.to_record(), ensure_ascii=False, sort_keys=True) + "\n")

    rows = retrieval_accuracy(runs, ks)
    report.write_accuracy(out_dir, embedder.model_id, rows)
    table = report.render_table1(out_dir)
    print(table, end="")

    chunk_texts = {chunk.chunk_id: chunk.text for chunk in chunks}
    with open(out_dir / "stamped_samples.jsonl", "w", encoding="utf-8") as handle:
        for record, run in zip(records, runs):
            stamped = dict(record)
            stamped["retrieval_correct"] = run.hit_within(stamp_k)
            stamped["contexts"] = [chunk_texts[cid] for cid, _ in run.ranked[:stamp_k]]
            handle.write(json.dumps(stamped, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"run directory: {out_dir}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    for name in (report.SCORES_FILE, report.SAMPLES_FILE):
        if not (run_dir / name).exists():
            raise CliUserError(f"run directory is missing {name}: {run_dir}")
    samples = report.read_samples(run_dir)
    if args.labels:
        labels_path = _require_file(args.labels, "labels file")
        labels: dict[str, bool] = {}
        with open(labels_path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                labels[record["id"]] = bool(record["human_correct"])
        samples = [s.with_labels(human_correct=labels.get(s.id)) for s in samples]
    scores = report.scores_by_metric(run_dir)

    pair = tuple(name.strip() for name in args.metric_pair.split(","))
    if len(pair) != 2:
        raise CliUserError("--metric-pair needs exactly two comma-separated metric names")
    for name in pair:
        if name not in scores:
            raise CliUserError(f"run has no scores for metric {name!r}")

    thresholds = analysis.ConcordanceThresholds(
        args.theta_high, args.theta_high, args.theta_low, args.theta_low
    )
    concordance_report = analysis.concordance(samples, scores, thresholds, pair)  # may raise NoLabelsError
    _check_output(run_dir / report.CONCORDANCE_FILE, args.force)
    report.write_concordance(run_dir, concordance_report)
    print(report.render_table3(run_dir), end="")

    if args.sweep:
        grid = [(v, v, v, v) for v in _parse_sweep(args.sweep)]
        reports = analysis.threshold_sweep(samples, scores, grid, pair)
        sweep_path = run_dir / "sweep.json"
        _check_output(sweep_path, args.force)
        sweep_path.write_text(
            json.dumps([r.to_dict() for r in reports], ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        print(f"wrote {len(reports)} sweep reports to {sweep_path}")

    if all(s.retrieval_correct is not None for s in samples):
        for metric in pair:
            yes = [v for s in samples if s.retrieval_correct for v in [scores[metric].get(s.id)] if v is not None]
            no = [v for s in samples if s.retrieval_correct is False for v in [scores[metric].get(s.id)] if v is not None]
            if len(yes) >= 2 and len(no) >= 2:
                result = analysis.welch_t_test(yes, no, "one_sided_greater")
                print(
                    f"welch[{metric}] correct-vs-wrong retrieval: "
                    f"t={result.t:.4f}, one-sided p={result.p:.4g}"
                )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise CliUserError(f"run directory not found: {run_dir}")
    _check_output(run_dir / "tables" / f"{args.style}.txt", args.force)
    text = report.render_tables(run_dir, args.style)
    print(text, end="")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    templates_dir = args.templates_dir
    prompts = PromptLibrary.from_dir(templates_dir) if templates_dir else DEFAULT_PROMPTS
    try:
        result = report.replay_run(run_dir, prompts)
    except FileNotFoundError as exc:
        raise CliUserError(f"run directory is missing {exc}") from exc
    if result.ok:
        print(f"scores reproduced ({result.checked} records verified)")
        return 0
    print(f"replay diverged on {len(result.divergences)} check(s); first:", file=sys.stderr)
    print(f"  {result.divergences[0]}", file=sys.stderr)
    return 2


# --- Parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="rageval",
        description="Transparent RAG evaluation: judge-LLM metrics with trace capture, "
        "retrieval accuracy, and concordance analysis.",
        formatter_class=_formatter,
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")

    evaluate = subparsers.add_parser(
        "evaluate", help="compute metrics over a dataset", formatter_class=_formatter
    )
    evaluate.add_argument("--dataset", required=True, help="JSONL dataset of QA samples")
    evaluate.add_argument("--metrics", default="all", help="comma-separated metric names or 'all'")
    evaluate.add_argument("--backend", default=None, help="judge backend: mock or openai")
    evaluate.add_argument("--config", default=None, help="JSON config file")
    evaluate.add_argument("--out", required=True, help="run directory to create")
    evaluate.add_argument("--mock-script", default=None, help="mock rule script (JSON)")
    evaluate.add_argument("--cache", default=None, help="response cache file (JSONL, append-only)")
    evaluate.add_argument("--model", default=None, help="judge model name")
    evaluate.add_argument("--base-url", default=None, help="OpenAI-compatible base URL")
    evaluate.add_argument("--templates-dir", default=None, help="prompt template overrides")
    evaluate.add_argument("--concurrency", type=int, default=None, help="max in-flight requests")
    evaluate.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    evaluate.add_argument("--verbose", action="store_true", help="print config precedence and debug logs")
    evaluate.set_defaults(func=cmd_evaluate)

    retrieve = subparsers.add_parser(
        "retrieve", help="top-k retrieval and accuracy-at-k", formatter_class=_formatter
    )
    retrieve.add_argument("--corpus", required=True, help="JSONL corpus of chunks")
    retrieve.add_argument("--questions", required=True, help="JSONL question records")
    retrieve.add_argument("--gold", required=True, help="JSONL gold chunk mapping")
    retrieve.add_argument("--k", default="1,3,5", help="comma-separated accuracy depths")
    retrieve.add_argument("--stamp-k", type=int, default=1, help="depth used to stamp retrieval_correct")
    retrieve.add_argument("--out", required=True, help="output directory")
    retrieve.add_argument("--index", default=None, help="index file to reuse or create")
    retrieve.add_argument("--embedding", default=None, help="embedding backend: mock or openai")
    retrieve.add_argument("--embedding-model", default=None, help="embedding model name")
    retrieve.add_argument("--dim", type=int, default=None, help="mock embedding dimension")
    retrieve.add_argument("--base-url", default=None, help="OpenAI-compatible base URL")
    retrieve.add_argument("--config", default=None, help="JSON config file")
    retrieve.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    retrieve.add_argument("--verbose", action="store_true", help="print config precedence and debug logs")
    retrieve.set_defaults(func=cmd_retrieve)

    analyze = subparsers.add_parser(
        "analyze", help="concordance of metrics with human labels", formatter_class=_formatter
    )
    analyze.add_argument("--run", required=True, help="run directory from 'evaluate'")
    analyze.add_argument("--labels", default=None, help="JSONL human labels {id, human_correct}")
    analyze.add_argument("--theta-high", type=float, default=0.7, help="high threshold for both metrics")
    analyze.add_argument("--theta-low", type=float, default=0.3, help="low threshold for both metrics")
    analyze.add_argument("--metric-pair", default="factual_correctness,faithfulness",
                         help="the two metrics to threshold jointly")
    analyze.add_argument("--sweep", default=None, help="threshold grid start:stop:step")
    analyze.add_argument("--force", action="store_true", help="overwrite existing analysis outputs")
    analyze.set_defaults(func=cmd_analyze)

    report_cmd = subparsers.add_parser(
        "report", help="render tables from a run directory", formatter_class=_formatter
    )
    report_cmd.add_argument("--run", required=True, help="run directory")
    report_cmd.add_argument("--style", required=True, choices=report.TABLE_STYLES,
                            help="which table to render")
    report_cmd.add_argument("--force", action="store_true", help="overwrite existing tables")
    report_cmd.set_defaults(func=cmd_report)

    replay = subparsers.add_parser(
        "replay", help="verify a run directory reproduces its scores", formatter_class=_formatter
    )
    replay.add_argument("--run", required=True, help="run directory")
    replay.add_argument("--templates-dir", default=None, help="prompt template overrides")
    replay.set_defaults(func=cmd_replay)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliUserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, RetrieverError, EmptyRunsError, analysis.AnalysisError,
            report.RunDirectoryExistsError, report.MissingInputsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure class
        logger.exception("unexpected failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
