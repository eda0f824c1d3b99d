"""Exact cosine top-k retrieval over an embedded chunk corpus.

Corpora at evaluation scale never justify approximate search, so retrieval is
a full scan: every query is scored against every chunk and ties break by
chunk id, which keeps rankings reproducible across runs and platforms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import EmbeddingBackend, ZeroVectorError
from .core import EvalSample, MalformedRecordError


class RetrieverError(Exception):
    pass


class DuplicateChunkIdError(RetrieverError):
    def __init__(self, chunk_id: str):
        super().__init__(f"duplicate chunk id {chunk_id!r}")
        self.chunk_id = chunk_id


class IdMismatchError(RetrieverError):
    def __init__(self, sample_id: str, question_id: str):
        super().__init__(f"sample id {sample_id!r} does not match run question id {question_id!r}")


class EmptyRunsError(RetrieverError):
    pass


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    text: str
    source_doc: str = ""


@dataclass(frozen=True)
class RetrievalRun:
    """Ranked retrieval for one question, with hit flags when gold is known.

    ``ranked`` is sorted by score descending, ties broken by chunk_id
    ascending; ``hit_at[k]`` is true iff the gold chunk appears in the first
    ``k`` entries, which makes the map monotone in ``k`` by construction.
    """

    question_id: str
    ranked: tuple[tuple[str, float], ...]
    gold_chunk_id: str | None = None
    hit_at: Mapping[int, bool] = field(default_factory=dict)

    def hit_within(self, k: int) -> bool:
        if self.gold_chunk_id is None:
            raise ValueError("run has no gold chunk id")
        return any(cid == self.gold_chunk_id for cid, _ in self.ranked[:k])

    def to_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "ranked": [[cid, score] for cid, score in self.ranked],
            "gold_chunk_id": self.gold_chunk_id,
            "hit_at": {str(k): hit for k, hit in sorted(self.hit_at.items())},
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "RetrievalRun":
        return cls(
            question_id=record["question_id"],
            ranked=tuple((cid, float(score)) for cid, score in record["ranked"]),
            gold_chunk_id=record.get("gold_chunk_id"),
            hit_at={int(k): bool(v) for k, v in record.get("hit_at", {}).items()},
        )


class VectorIndex:
    """Immutable chunk-id/vector store; concurrent queries are safe."""

    def __init__(self, model_id: str, chunk_ids: Sequence[str], matrix: np.ndarray):
        if matrix.ndim != 2 or matrix.shape[0] != len(chunk_ids):
            raise ValueError("matrix shape does not match chunk ids")
        self.model_id = model_id
        self.chunk_ids = list(chunk_ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self._norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(self._norms == 0.0):
            bad = self.chunk_ids[int(np.argmax(self._norms == 0.0))]
            raise ZeroVectorError(f"chunk {bad!r} embedded to a zero vector")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def save(self, path: str | Path) -> None:
        """Header record then per-chunk (id, little-endian float64 vector) records."""
        header = json.dumps(
            {"model_id": self.model_id, "dim": self.dim, "count": len(self)},
            sort_keys=True,
        ).encode("utf-8")
        with open(path, "wb") as handle:
            handle.write(header + b"\n")
            for chunk_id, row in zip(self.chunk_ids, self.matrix):
                encoded = chunk_id.encode("utf-8")
                handle.write(struct.pack("<I", len(encoded)))
                handle.write(encoded)
                handle.write(row.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        with open(path, "rb") as handle:
            header = json.loads(handle.readline().decode("utf-8"))
            dim, count = header["dim"], header["count"]
            chunk_ids = []
            rows = np.empty((count, dim), dtype=np.float64)
            for i in range(count):
                (id_len,) = struct.unpack("<I", handle.read(4))
                chunk_ids.append(handle.read(id_len).decode("utf-8"))
                rows[i] = np.frombuffer(handle.read(8 * dim), dtype="<f8")
        return cls(model_id=header["model_id"], chunk_ids=chunk_ids, matrix=rows)


def load_corpus(path: str | Path) -> list[Chunk]:
    """JSONL corpus of {chunk_id, text, source_doc} records."""
    chunks = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(line_no, f"invalid JSON ({exc.msg})") from exc
            for key in ("chunk_id", "text"):
                if key not in record or not isinstance(record[key], str) or not record[key].strip():
                    raise MalformedRecordError(line_no, f"missing or empty {key!r}")
            chunks.append(
                Chunk(
                    chunk_id=record["chunk_id"],
                    text=record["text"],
                    source_doc=record.get("source_doc", ""),
                )
            )
    return chunks


def load_gold(path: str | Path) -> dict[str, str]:
    """JSONL gold mapping of {question_id, gold_chunk_id}."""
    gold = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            try:
                gold[record["question_id"]] = record["gold_chunk_id"]
            except (KeyError, TypeError):
                raise MalformedRecordError(
                    line_no, "expected {question_id, gold_chunk_id}"
                ) from None
    return gold


def index_corpus(
    chunks: Sequence[Chunk], embedder: EmbeddingBackend, batch_size: int = 128
) -> VectorIndex:
    """Embed all chunks into an index; duplicate chunk ids are rejected."""
    if not chunks:
        raise ValueError("cannot index an empty corpus")
    seen: set[str] = set()
    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise DuplicateChunkIdError(chunk.chunk_id)
        seen.add(chunk.chunk_id)
    vectors = []
    texts = [chunk.text for chunk in chunks]
    for start in range(0, len(texts), batch_size):
        vectors.extend(embedder.embed(texts[start : start + batch_size]))
    matrix = np.array([v.values for v in vectors], dtype=np.float64)
    return VectorIndex(model_id=embedder.model_id, chunk_ids=[c.chunk_id for c in chunks], matrix=matrix)


def retrieve_top_k(
    question: str,
    index: VectorIndex,
    embedder: EmbeddingBackend,
    k: int,
    question_id: str = "",
    gold_chunk_id: str | None = None,
    ks: Iterable[int] | None = None,
) -> RetrievalRun:
    """Exact top-k by cosine; returns a ranked prefix of length min(k, |index|).

    When ``gold_chunk_id`` is given, hit flags are computed for every depth in
    ``ks`` (default: just ``k``).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if embedder.model_id != index.model_id:
        raise ValueError(
            f"index built with {index.model_id!r} but embedder is {embedder.model_id!r}"
        )
    (query,) = embedder.embed([question])
    query_values = np.asarray(query.values, dtype=np.float64)
    query_norm = np.linalg.norm(query_values)
    if query_norm == 0.0:
        raise ZeroVectorError("question embedded to a zero vector")
    scores = (index.matrix @ query_values) / (index._norms * query_norm)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.chunk_ids[i]))
    ranked = tuple((index.chunk_ids[i], float(scores[i])) for i in order[:k])
    hit_at: dict[int, bool] = {}
    if gold_chunk_id is not None:
        depths = sorted(set(ks)) if ks else [k]
        ranked_ids = [cid for cid, _ in ranked]
        hit_at = {depth: gold_chunk_id in ranked_ids[:depth] for depth in depths}
    return RetrievalRun(
        question_id=question_id, ranked=ranked, gold_chunk_id=gold_chunk_id, hit_at=hit_at
    )


def retrieval_accuracy(
    runs: Sequence[RetrievalRun], ks: Iterable[int]
) -> list[tuple[int, float]]:
    """Accuracy-at-k rows: percentage of runs whose gold chunk is in the top k."""
    if not runs:
        raise EmptyRunsError("no retrieval runs to aggregate")
    rows = []
    for k in sorted(set(ks)):
        hits = sum(1 for run in runs if run.hit_within(k))
        rows.append((k, 100.0 * hits / len(runs)))
    return rows


def stamp_retrieval_correct(
    sample: EvalSample,
    run: RetrievalRun,
    k: int,
    chunk_texts: Mapping[str, str],
) -> EvalSample:
    """Set retrieval_correct from the run and attach top-1..k texts as contexts."""
    if run.question_id != sample.id:
        raise IdMismatchError(sample.id, run.question_id)
    contexts = [chunk_texts[cid] for cid, _ in run.ranked[:k]]
    return sample.with_contexts(contexts, retrieval_correct=run.hit_within(k))
