import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rageval.core import (
    DuplicateIdError,
    EmptyFieldError,
    EvalSample,
    MalformedRecordError,
    MetricName,
    MetricResult,
    MissingFieldError,
    NoContextsError,
    NullReason,
    load_dataset,
    normalize_whitespace,
    required_fields_for,
    split_sentences,
    validate_sample,
)


def make_sample(**overrides):
    fields = dict(
        id="q1",
        question="What is NAS?",
        contexts=("NAS is a protocol layer.",),
        generated_answer="NAS is a protocol layer above RRC.",
        ground_truth="NAS sits above RRC.",
    )
    fields.update(overrides)
    return EvalSample(**fields)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


RECORD = {
    "id": "q1",
    "question": "What is NAS?",
    "contexts": ["NAS is a protocol layer."],
    "generated_answer": "NAS is a protocol layer above RRC.",
    "ground_truth": "NAS sits above RRC.",
}


# --- load_dataset ---------------------------------------------------------


def test_load_dataset_two_valid_lines(tmp_path):
    second = dict(RECORD, id="q2")
    path = tmp_path / "data.jsonl"
    write_jsonl(path, [RECORD, second])
    samples = load_dataset(path)
    assert [s.id for s in samples] == ["q1", "q2"]
    assert samples[0].contexts == ("NAS is a protocol layer.",)


def test_load_dataset_missing_question_names_line(tmp_path):
    bad = {k: v for k, v in RECORD.items() if k != "question"}
    path = tmp_path / "data.jsonl"
    write_jsonl(path, [RECORD, dict(bad, id="q2")])
    with pytest.raises(MalformedRecordError) as err:
        load_dataset(path)
    assert err.value.line_no == 2


def test_load_dataset_duplicate_id(tmp_path):
    path = tmp_path / "data.jsonl"
    write_jsonl(path, [dict(RECORD, id="q7"), dict(RECORD, id="q7")])
    with pytest.raises(DuplicateIdError) as err:
        load_dataset(path)
    assert err.value.sample_id == "q7"


def test_load_dataset_preserves_unknown_keys(tmp_path):
    path = tmp_path / "data.jsonl"
    write_jsonl(path, [dict(RECORD, difficulty="hard", source=3)])
    (sample,) = load_dataset(path)
    assert sample.extra == {"difficulty": "hard", "source": 3}
    assert sample.to_record()["difficulty"] == "hard"


def test_load_dataset_rejects_bad_json(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text(json.dumps(RECORD) + "\n{nope\n", encoding="utf-8")
    with pytest.raises(MalformedRecordError) as err:
        load_dataset(path)
    assert err.value.line_no == 2


def test_load_dataset_rejects_non_bool_flag(tmp_path):
    path = tmp_path / "data.jsonl"
    write_jsonl(path, [dict(RECORD, retrieval_correct="yes")])
    with pytest.raises(MalformedRecordError):
        load_dataset(path)


def test_load_dataset_unknown_format():
    with pytest.raises(ValueError):
        load_dataset("whatever.csv", format="csv")


# --- split_sentences --------------------------------------------------------


def test_split_three_terminated_sentences():
    result = split_sentences("A is B. C is D. E!")
    assert result.sentences == ("A is B.", "C is D.", "E!")
    assert result.count == 3


def test_split_empty_text():
    result = split_sentences("")
    assert result.count == 0
    assert result.sentences == ()


def test_split_abbreviation_guard():
    # hand segmentation: "Rel." is guarded, "spec." ends the first sentence
    result = split_sentences("See 3GPP Rel. 15 spec. It defines NAS.")
    assert result.sentences == ("See 3GPP Rel. 15 spec.", "It defines NAS.")


def test_split_guard_list_tokens_mid_sentence():
    result = split_sentences("Use markers, e.g. This one, inside. Second sentence.")
    assert result.count == 2


def test_split_decimal_number_guard():
    result = split_sentences("GPT-3.5 scored 0.91 overall. Next sentence here.")
    assert result.sentences == ("GPT-3.5 scored 0.91 overall.", "Next sentence here.")


def test_split_single_letter_initial_guard():
    result = split_sentences("J. Smith wrote the spec. It was long.")
    assert result.sentences == ("J. Smith wrote the spec.", "It was long.")


def test_split_lowercase_continuation_is_not_boundary():
    result = split_sentences("It runs at 3. 5 GHz does not apply.")
    assert result.count == 1


def test_split_collapses_whitespace():
    result = split_sentences("First  line.\n\nSecond   one.")
    assert result.sentences == ("First line.", "Second one.")


def test_split_join_recovers_normalized_text():
    text = "Alpha beta.  Gamma delta! Epsilon?  Zeta."
    result = split_sentences(text)
    assert " ".join(result.sentences) == normalize_whitespace(text)


@settings(max_examples=200)
@given(st.text(alphabet="abcdefgXYZ .!?219,", max_size=120))
def test_split_properties(text):
    result = split_sentences(text)
    # deterministic
    assert split_sentences(text).sentences == result.sentences
    assert result.count == len(result.sentences)
    # joining recovers the normalized input
    assert " ".join(result.sentences) == normalize_whitespace(text)
    # whitespace normalization only removes characters
    assert sum(len(s) for s in result.sentences) <= len(text) + result.count
    # idempotence: each sentence re-splits to exactly itself
    for sentence in result.sentences:
        assert split_sentences(sentence).sentences == (sentence,)


# --- validate_sample --------------------------------------------------------


def test_validate_complete_sample_identity():
    sample = make_sample(retrieval_correct=True, human_correct=True)
    assert validate_sample(sample, {"contexts", "human_correct", "retrieval_correct"}) is sample


def test_validate_no_contexts():
    sample = make_sample(contexts=())
    with pytest.raises(NoContextsError):
        validate_sample(sample, {"contexts"})


def test_validate_missing_human_label():
    sample = make_sample()
    with pytest.raises(MissingFieldError) as err:
        validate_sample(sample, {"human_correct"})
    assert err.value.field_name == "human_correct"


def test_validate_empty_question():
    sample = make_sample(question="   ")
    with pytest.raises(EmptyFieldError) as err:
        validate_sample(sample)
    assert err.value.field_name == "question"


def test_required_fields_for_metrics():
    assert required_fields_for([MetricName.FAITHFULNESS]) == {"contexts"}
    assert required_fields_for(["answer_similarity"]) == set()
    assert required_fields_for(["context_relevance", "answer_relevance"]) == {"contexts"}


# --- MetricResult invariants --------------------------------------------------


def test_metric_result_exactly_one_of_value_or_reason():
    with pytest.raises(ValueError):
        MetricResult(MetricName.FAITHFULNESS, "q1", 0.5, NullReason.NO_STATEMENTS, trace={})
    with pytest.raises(ValueError):
        MetricResult(MetricName.FAITHFULNESS, "q1", None, None, trace={})


def test_metric_result_range_checked():
    with pytest.raises(ValueError):
        MetricResult(MetricName.FAITHFULNESS, "q1", 1.5, None, trace={})


def test_metric_result_requires_trace():
    with pytest.raises(ValueError):
        MetricResult(MetricName.FAITHFULNESS, "q1", 0.5, None, trace=None)
