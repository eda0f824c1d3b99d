import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rageval.parsing import (
    ClassificationLabelError,
    EmptyExtractionError,
    NoStatementsError,
    ShortOutputError,
    VerdictCountError,
    parse_classification,
    parse_context_extraction,
    parse_questions,
    parse_statements,
    parse_verdicts,
    strip_enumeration,
)


# --- statements ---------------------------------------------------------------


def test_statements_numbering_prefixes_stripped():
    completion = "S1: NAS is a protocol layer.\nS2: It sits above RRC."
    assert parse_statements(completion) == [
        "NAS is a protocol layer.",
        "It sits above RRC.",
    ]


def test_statements_bullets_and_numbers():
    completion = "1. First fact\n- Second fact\n• Third fact\n2) Fourth fact"
    assert parse_statements(completion) == [
        "First fact",
        "Second fact",
        "Third fact",
        "Fourth fact",
    ]


def test_statements_empty_completion_raises():
    with pytest.raises(NoStatementsError):
        parse_statements("")


def test_statements_enumeration_only_lines_raise():
    with pytest.raises(NoStatementsError):
        parse_statements("1.\n2.\n- \n")


def test_statements_single_line_identity():
    assert parse_statements("The answer is one sentence.") == ["The answer is one sentence."]


def test_strip_enumeration_leaves_plain_text():
    assert strip_enumeration("plain text line") == "plain text line"
    assert strip_enumeration("  (3) indented item ") == "indented item"


# --- verdicts -------------------------------------------------------------------


def test_verdicts_numbered_single_line():
    verdicts = parse_verdicts("1. Yes 2. No 3. Yes", expected_count=3)
    assert [flag for flag, _ in verdicts] == [True, False, True]


def test_verdicts_case_insensitive_with_punctuation():
    verdicts = parse_verdicts("yes.\nNO", expected_count=2)
    assert [flag for flag, _ in verdicts] == [True, False]


def test_verdicts_count_mismatch():
    with pytest.raises(VerdictCountError) as err:
        parse_verdicts("1. Yes", expected_count=2)
    assert (err.value.expected, err.value.got) == (2, 1)


def test_verdicts_final_block_preferred():
    completion = (
        "1. The context says NAS is layer 3, which supports the statement. Verdict: Yes\n"
        "2. No mention of RRC ordering anywhere. Verdict: No\n"
        "Final verdict for each statement:\n1. Yes\n2. No"
    )
    verdicts = parse_verdicts(completion, expected_count=2)
    assert [flag for flag, _ in verdicts] == [True, False]


def test_verdicts_explanations_captured():
    completion = "1. The context states X. Verdict: Yes\n2. Not supported by context. Verdict: No"
    verdicts = parse_verdicts(completion, expected_count=2)
    assert verdicts[0][1] == "The context states X."
    assert verdicts[1][1] == "Not supported by context."


def test_verdicts_stray_tokens_rejected():
    with pytest.raises(VerdictCountError):
        parse_verdicts("Yes No Yes No", expected_count=3)


# --- questions -------------------------------------------------------------------


def test_questions_numbered_list():
    completion = "1. What is NAS?\n2. Where does NAS sit?\n3. What is above RRC?"
    assert parse_questions(completion, 3) == [
        "What is NAS?",
        "Where does NAS sit?",
        "What is above RRC?",
    ]


def test_questions_single_line():
    assert parse_questions("What is NAS?", 1) == ["What is NAS?"]


def test_questions_short_output():
    with pytest.raises(ShortOutputError) as err:
        parse_questions("1. Only one?\n2. And two?", 3)
    assert (err.value.needed, err.value.got) == (3, 2)


def test_questions_truncates_extras():
    completion = "\n".join(f"{i}. Q{i}?" for i in range(1, 6))
    assert parse_questions(completion, 3) == ["Q1?", "Q2?", "Q3?"]


# --- context extraction -----------------------------------------------------------


def test_extraction_insufficient_information_phrase():
    insufficient, sentences = parse_context_extraction("Insufficient Information")
    assert insufficient is True
    assert sentences == []


def test_extraction_insufficient_information_quoted_lowercase():
    insufficient, _ = parse_context_extraction('"insufficient information".')
    assert insufficient is True


def test_extraction_sentences_from_lines():
    completion = "1. NAS is layer 3. It sits above RRC.\n2. RRC handles radio config."
    insufficient, sentences = parse_context_extraction(completion)
    assert insufficient is False
    assert sentences == [
        "NAS is layer 3.",
        "It sits above RRC.",
        "RRC handles radio config.",
    ]


def test_extraction_empty_raises():
    with pytest.raises(EmptyExtractionError):
        parse_context_extraction("- \n-")


# --- classification ----------------------------------------------------------------


def test_classification_worked_template():
    completion = "TP: [statement 1, statement 4], FP: [statement 2], FN: [statement 3, statement 5, statement 6]"
    tp, fp, fn = parse_classification(completion)
    assert (len(tp), len(fp), len(fn)) == (2, 1, 3)


def test_classification_json_form():
    completion = (
        'Extracted statements: {\n'
        '    "TP": ["fact one", "fact two"],\n'
        '    "FP": [],\n'
        '    "FN": ["missed fact"]\n'
        "}"
    )
    tp, fp, fn = parse_classification(completion)
    assert tp == ["fact one", "fact two"]
    assert fp == []
    assert fn == ["missed fact"]


def test_classification_only_tp_label_empty():
    assert parse_classification("TP: []") == ([], [], [])


def test_classification_missing_labels_are_empty_when_one_present():
    tp, fp, fn = parse_classification("TP: [a fact]")
    assert (tp, fp, fn) == (["a fact"], [], [])


def test_classification_prose_without_labels():
    with pytest.raises(ClassificationLabelError):
        parse_classification("The answer seems broadly correct and complete.")


def test_classification_case_insensitive_labels():
    tp, fp, fn = parse_classification("tp: [x], fp: [y], fn: [z]")
    assert (tp, fp, fn) == (["x"], ["y"], ["z"])


def test_classification_curly_quotes_normalized():
    completion = '{“TP”: [“fact”], “FP”: [], “FN”: []}'
    tp, fp, fn = parse_classification(completion)
    assert tp == ["fact"]


def test_classification_ellipsis_items_dropped():
    tp, _, _ = parse_classification("TP: [statement 1, ...]")
    assert tp == ["statement 1"]


# --- property suite over enumeration-style perturbations ----------------------------

statement_text = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz ", min_size=3, max_size=30
).map(lambda s: ("fact " + s).strip()).filter(lambda s: s)

enum_styles = st.sampled_from(["{i}. ", "{i}) ", "({i}) ", "- ", "• ", "S{i}: ", ""])


@settings(max_examples=120)
@given(st.lists(statement_text, min_size=1, max_size=6), enum_styles)
def test_statement_parse_recovers_under_enumeration(statements, style):
    rendered = "\n".join(style.format(i=i + 1) + s for i, s in enumerate(statements))
    assert parse_statements(rendered) == statements


verdict_cases = st.sampled_from(["Yes", "yes", "YES", "yes.", "No", "no", "NO", "no."])


@settings(max_examples=120)
@given(
    st.lists(st.booleans(), min_size=1, max_size=8),
    enum_styles,
    st.sampled_from(["\n", " "]),
    st.booleans(),
)
def test_verdict_parse_recovers_under_perturbation(flags, style, separator, with_header):
    def word(flag, upper):
        token = "Yes" if flag else "No"
        return token.upper() if upper else token

    body = separator.join(
        style.format(i=i + 1) + word(flag, i % 2 == 0) for i, flag in enumerate(flags)
    )
    text = ("Final verdict for each statement:" + separator + body) if with_header else body
    parsed = parse_verdicts(text, expected_count=len(flags))
    assert [flag for flag, _ in parsed] == flags


@settings(max_examples=80)
@given(
    st.lists(statement_text, max_size=4),
    st.lists(statement_text, max_size=4),
    st.lists(statement_text, max_size=4),
    st.booleans(),
)
def test_classification_parse_recovers_counts(tp, fp, fn, as_json):
    if as_json:
        import json as json_module

        rendered = "Extracted statements: " + json_module.dumps({"TP": tp, "FP": fp, "FN": fn})
    else:
        rendered = (
            f"TP: [{', '.join(tp)}]\nFP: [{', '.join(fp)}]\nFN: [{', '.join(fn)}]"
        )
    parsed_tp, parsed_fp, parsed_fn = parse_classification(rendered)
    assert (len(parsed_tp), len(parsed_fp), len(parsed_fn)) == (len(tp), len(fp), len(fn))
