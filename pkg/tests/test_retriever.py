import json
import math

import numpy as np
import pytest

from rageval.backends import MockEmbedder
from rageval.core import EvalSample
from rageval.retriever import (
    Chunk,
    DuplicateChunkIdError,
    EmptyRunsError,
    IdMismatchError,
    RetrievalRun,
    VectorIndex,
    index_corpus,
    load_corpus,
    load_gold,
    retrieval_accuracy,
    retrieve_top_k,
    stamp_retrieval_correct,
)


def brute_force_rank(chunk_ids, matrix, query, k):
    """Independent oracle: per-chunk fsum cosine, full sort, chunk_id tie-break."""
    query_norm = math.sqrt(math.fsum(x * x for x in query))
    scored = []
    for cid, row in zip(chunk_ids, matrix):
        dot = math.fsum(x * y for x, y in zip(row, query))
        norm = math.sqrt(math.fsum(x * x for x in row))
        scored.append((cid, dot / (norm * query_norm)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [cid for cid, _ in scored[:k]]


def table_embedder(chunk_vectors, query_vectors=None):
    table = dict(chunk_vectors)
    table.update(query_vectors or {})
    return MockEmbedder(table=table, model_id="test-embed")


def simple_corpus():
    chunks = [Chunk("A", "text A"), Chunk("B", "text B")]
    embedder = table_embedder({"text A": (1.0, 0.0), "text B": (0.0, 1.0)},
                              {"the question": (1.0, 0.0)})
    return chunks, embedder


def test_index_corpus_shape():
    chunks = [Chunk(f"c{i}", f"text {i}") for i in range(3)]
    embedder = MockEmbedder(dim=4, model_id="test-embed")
    index = index_corpus(chunks, embedder)
    assert len(index) == 3
    assert index.dim == 4
    assert index.model_id == "test-embed"


def test_index_duplicate_chunk_id():
    chunks = [Chunk("c1", "a"), Chunk("c1", "b")]
    with pytest.raises(DuplicateChunkIdError):
        index_corpus(chunks, MockEmbedder())


def test_index_persist_reload_bit_identical(tmp_path):
    chunks = [Chunk(f"c{i}", f"text {i}") for i in range(5)]
    index = index_corpus(chunks, MockEmbedder(dim=7, model_id="test-embed"))
    path = tmp_path / "index.bin"
    index.save(path)
    reloaded = VectorIndex.load(path)
    assert reloaded.model_id == index.model_id
    assert reloaded.chunk_ids == index.chunk_ids
    assert np.array_equal(reloaded.matrix, index.matrix)


def test_retrieve_orthogonal_separation():
    chunks, embedder = simple_corpus()
    index = index_corpus(chunks, embedder)
    run = retrieve_top_k("the question", index, embedder, k=1, question_id="q1",
                         gold_chunk_id="A")
    assert [cid for cid, _ in run.ranked] == ["A"]
    assert run.hit_at == {1: True}


def test_retrieve_k_larger_than_corpus():
    chunks = [Chunk(f"c{i}", f"text {i}") for i in range(3)]
    embedder = MockEmbedder(dim=4, model_id="test-embed")
    index = index_corpus(chunks, embedder)
    run = retrieve_top_k("query", index, embedder, k=5)
    assert len(run.ranked) == 3


def test_retrieve_matches_brute_force_oracle():
    rng = np.random.default_rng(42)
    n, dim = 20, 6
    chunk_ids = [f"c{i:02d}" for i in range(n)]
    matrix = rng.normal(size=(n, dim))
    table = {f"text {cid}": tuple(row) for cid, row in zip(chunk_ids, matrix)}
    query = tuple(rng.normal(size=dim))
    table["the query"] = query
    embedder = MockEmbedder(table=table, model_id="test-embed")
    chunks = [Chunk(cid, f"text {cid}") for cid in chunk_ids]
    index = index_corpus(chunks, embedder)
    run = retrieve_top_k("the query", index, embedder, k=5)
    assert [cid for cid, _ in run.ranked] == brute_force_rank(chunk_ids, matrix, query, 5)


def test_retrieve_tie_break_by_chunk_id():
    same = (0.6, 0.8)
    chunks = [Chunk("zzz", "t1"), Chunk("aaa", "t2"), Chunk("mmm", "t3")]
    embedder = table_embedder({"t1": same, "t2": same, "t3": same}, {"q": (1.0, 0.0)})
    index = index_corpus(chunks, embedder)
    run = retrieve_top_k("q", index, embedder, k=3)
    assert [cid for cid, _ in run.ranked] == ["aaa", "mmm", "zzz"]


def test_retrieve_deterministic_across_persistence(tmp_path):
    rng = np.random.default_rng(7)
    chunk_ids = [f"c{i}" for i in range(30)]
    matrix = rng.normal(size=(30, 8))
    table = {f"text {cid}": tuple(row) for cid, row in zip(chunk_ids, matrix)}
    table["query"] = tuple(rng.normal(size=8))
    embedder = MockEmbedder(table=table, model_id="test-embed")
    chunks = [Chunk(cid, f"text {cid}") for cid in chunk_ids]
    index = index_corpus(chunks, embedder)
    before = retrieve_top_k("query", index, embedder, k=10).ranked
    path = tmp_path / "index.bin"
    index.save(path)
    after = retrieve_top_k("query", VectorIndex.load(path), embedder, k=10).ranked
    assert before == after


def test_hit_at_monotone_in_k():
    ranked = tuple((f"c{i}", 1.0 - i / 10) for i in range(5))
    run = RetrievalRun(question_id="q", ranked=ranked, gold_chunk_id="c2",
                       hit_at={1: False, 3: True, 5: True})
    flags = [run.hit_within(k) for k in range(1, 6)]
    assert flags == sorted(flags)  # False... then True onwards


def test_retrieval_accuracy_counting():
    def run_with_hit(question_id, hit):
        gold = "g" if hit else "other"
        return RetrievalRun(question_id, (("g", 0.9), ("x", 0.5)), gold_chunk_id=gold)

    runs = [run_with_hit(f"q{i}", i < 3) for i in range(4)]
    rows = retrieval_accuracy(runs, [1])
    assert rows == [(1, 75.0)]


def test_retrieval_accuracy_perfect():
    runs = [
        RetrievalRun(f"q{i}", (("gold", 1.0), ("b", 0.5)), gold_chunk_id="gold")
        for i in range(3)
    ]
    rows = retrieval_accuracy(runs, [1, 3, 5])
    assert rows == [(1, 100.0), (3, 100.0), (5, 100.0)]


def test_retrieval_accuracy_empty_runs():
    with pytest.raises(EmptyRunsError):
        retrieval_accuracy([], [1])


def test_retrieval_accuracy_non_decreasing_in_k():
    rng = np.random.default_rng(3)
    runs = []
    for i in range(20):
        ids = [f"c{j}" for j in range(10)]
        rng.shuffle(ids)
        ranked = tuple((cid, 1.0 - j / 10) for j, cid in enumerate(ids))
        runs.append(RetrievalRun(f"q{i}", ranked, gold_chunk_id="c0"))
    rows = retrieval_accuracy(runs, [1, 2, 3, 5, 10])
    accuracies = [acc for _, acc in rows]
    assert accuracies == sorted(accuracies)
    assert accuracies[-1] == 100.0


def sample_for(question_id):
    return EvalSample(
        id=question_id,
        question="what?",
        contexts=(),
        generated_answer="answer",
        ground_truth="truth",
    )


def test_stamp_hit_sets_flag_and_context():
    run = RetrievalRun("q1", (("gold", 0.9), ("b", 0.1)), gold_chunk_id="gold")
    stamped = stamp_retrieval_correct(sample_for("q1"), run, k=1, chunk_texts={"gold": "gold text"})
    assert stamped.retrieval_correct is True
    assert stamped.contexts == ("gold text",)


def test_stamp_miss_attaches_wrong_chunk():
    run = RetrievalRun("q1", (("wrong", 0.9), ("gold", 0.1)), gold_chunk_id="gold")
    stamped = stamp_retrieval_correct(
        sample_for("q1"), run, k=1, chunk_texts={"wrong": "wrong text", "gold": "gold text"}
    )
    assert stamped.retrieval_correct is False
    assert stamped.contexts == ("wrong text",)


def test_stamp_id_mismatch():
    run = RetrievalRun("other", (("g", 1.0),), gold_chunk_id="g")
    with pytest.raises(IdMismatchError):
        stamp_retrieval_correct(sample_for("q1"), run, k=1, chunk_texts={"g": "t"})


def test_load_corpus_and_gold(tmp_path):
    corpus_path = tmp_path / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps({"chunk_id": "c1", "text": "alpha", "source_doc": "d"}) + "\n")
        handle.write(json.dumps({"chunk_id": "c2", "text": "beta"}) + "\n")
    chunks = load_corpus(corpus_path)
    assert [c.chunk_id for c in chunks] == ["c1", "c2"]
    assert chunks[0].source_doc == "d"

    gold_path = tmp_path / "gold.jsonl"
    gold_path.write_text(json.dumps({"question_id": "q1", "gold_chunk_id": "c2"}) + "\n")
    assert load_gold(gold_path) == {"q1": "c2"}


def test_run_record_round_trip():
    run = RetrievalRun("q1", (("a", 0.5), ("b", 0.25)), gold_chunk_id="a", hit_at={1: True, 3: True})
    rebuilt = RetrievalRun.from_record(json.loads(json.dumps(run.to_record())))
    assert rebuilt == run
