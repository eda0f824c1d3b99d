"""Shared fixtures: synthetic datasets and scripted judge responses."""

import json

from rageval.backends import MockEmbedder, MockRule, ScriptedChatBackend
from rageval.core import EvalSample, sample_from_record
from rageval.metrics import MetricEngine


def synthetic_records(n=10):
    """Deterministic QA records; fields vary with the index."""
    records = []
    for i in range(1, n + 1):
        sid = f"s{i:02d}"
        records.append(
            {
                "id": sid,
                "question": f"What does system {i} do?",
                "contexts": [
                    f"System {i} handles requests. It stores results. It reports status."
                ],
                "generated_answer": f"System {i} handles requests. It stores results.",
                "ground_truth": f"System {i} handles requests and stores results.",
                "retrieval_correct": i % 2 == 1,
                "human_correct": i % 3 != 0,
                "topic": f"topic-{i}",
            }
        )
    return records


def synthetic_rules(records):
    """One scripted judge response per metric step per sample.

    Every 5th sample gets an "Insufficient Information" extraction and every
    7th an empty classification, so null paths stay exercised.
    """
    rules = []
    for i, record in enumerate(records, start=1):
        sid = record["id"]
        rules.append(
            MockRule(
                request_tag_prefix=f"faithfulness:{sid}:statements",
                response=f"1. System {i} handles requests.\n2. System {i} stores results.",
            )
        )
        verdict = "1. Yes\n2. Yes" if i % 2 == 1 else "1. Yes\n2. No"
        rules.append(
            MockRule(
                request_tag_prefix=f"faithfulness:{sid}:verdicts",
                response=f"Final verdict for each statement:\n{verdict}",
            )
        )
        rules.append(
            MockRule(
                request_tag_prefix=f"answer_relevance:{sid}:questions",
                response=f"1. What does system {i} do?\n2. How does system {i} work?\n3. What is system {i}?",
            )
        )
        extraction = (
            "Insufficient Information"
            if i % 5 == 0
            else f"System {i} handles requests."
        )
        rules.append(
            MockRule(
                request_tag_prefix=f"context_relevance:{sid}:extraction", response=extraction
            )
        )
        classification = (
            "TP: []"
            if i % 7 == 0
            else f"TP: [handles requests, stores results], FP: [], FN: [combined statement {i}]"
        )
        rules.append(
            MockRule(
                request_tag_prefix=f"factual_correctness:{sid}:classification",
                response=classification,
            )
        )
    return rules


def write_dataset(path, records):
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def write_mock_script(path, rules):
    entries = []
    for rule in rules:
        match = {}
        if rule.request_tag_prefix is not None:
            match["request_tag_prefix"] = rule.request_tag_prefix
        if rule.prompt_substring is not None:
            match["prompt_substring"] = rule.prompt_substring
        entries.append({"match": match, "response": rule.response})
    path.write_text(json.dumps(entries, ensure_ascii=False, indent=1), encoding="utf-8")
    return path


def synthetic_samples(records):
    return [sample_from_record(record) for record in records]


def synthetic_engine(records, **kwargs):
    chat = ScriptedChatBackend(synthetic_rules(records))
    return MetricEngine(chat=chat, embedder=MockEmbedder(), model="judge", **kwargs)
