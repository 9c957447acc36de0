"""Contextual grounding records and their persistent key-value store.

A grounding captures what Stage 1 learned about a flagged passage from the
single scoring pass: its mean surprisal, the drop ratio (how much the model
adapted to the content within the pass), surprisal peaks, and a peak-centered
source window. Records persist to an append-only JSONL log with an in-memory
index rebuilt on open; retrieval is cosine similarity over stored embeddings.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Sequence

import numpy as np

# Peak-centered excerpt length; desk-scale passages are shorter than this, so
# the source window is usually the whole passage.
SOURCE_WINDOW_TOKENS = 256


@dataclass(frozen=True)
class Grounding:
    doc_id: str
    passage_index: int
    passage_text: str
    surprisal: float
    drop_ratio: float
    peak_positions: tuple[int, ...]
    source_window: str
    metadata: dict | None = None

    @property
    def passage_ref(self) -> tuple[str, int]:
        return (self.doc_id, self.passage_index)

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "passage_index": self.passage_index,
            "passage_text": self.passage_text,
            "surprisal": self.surprisal,
            "drop_ratio": self.drop_ratio,
            "peaks": list(self.peak_positions),
            "source_window": self.source_window,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Grounding":
        return cls(
            doc_id=payload["doc_id"],
            passage_index=int(payload["passage_index"]),
            passage_text=payload["passage_text"],
            surprisal=float(payload["surprisal"]),
            drop_ratio=float(payload["drop_ratio"]),
            peak_positions=tuple(int(p) for p in payload["peaks"]),
            source_window=payload["source_window"],
            metadata=payload.get("metadata"),
        )


def _thirds_bounds(n: int) -> tuple[int, int]:
    """First/last third boundaries; remainder tokens go to the middle third."""
    q = n // 3
    return q, n - q


def drop_ratio(token_surprisals: Sequence[float]) -> float:
    """Normalized surprisal decrease from the first third to the last third.

    (mean(first) - mean(last)) / mean(first); 0 when the first-third mean is
    not positive. Always <= 1; negative when surprisal rises.
    """
    n = len(token_surprisals)
    if n < 3:
        raise ValueError("passage too short for grounding")
    first_end, last_start = _thirds_bounds(n)
    mean_first = fmean(token_surprisals[:first_end])
    mean_last = fmean(token_surprisals[last_start:])
    if mean_first <= 0.0:
        return 0.0
    return (mean_first - mean_last) / mean_first


def peak_positions(token_surprisals: Sequence[float]) -> tuple[int, ...]:
    """Indices of the top-decile tokens by surprisal (ceil(0.1*n) of them), ascending."""
    n = len(token_surprisals)
    n_peaks = math.ceil(0.1 * n)
    by_surprisal = sorted(range(n), key=lambda i: (-token_surprisals[i], i))
    return tuple(sorted(by_surprisal[:n_peaks]))


def _peak_run_center(peaks: Sequence[int], top_peak: int) -> int:
    """Center of the consecutive run of peaks containing the highest-surprisal one."""
    start = end = top_peak
    peak_set = set(peaks)
    while start - 1 in peak_set:
        start -= 1
    while end + 1 in peak_set:
        end += 1
    return (start + end) // 2


def source_window_span(
    token_surprisals: Sequence[float],
    peaks: Sequence[int],
    max_tokens: int = SOURCE_WINDOW_TOKENS,
) -> tuple[int, int]:
    """Token span of up to max_tokens centered on the highest-surprisal peak run."""
    n = len(token_surprisals)
    if n <= max_tokens:
        return (0, n)
    top_peak = max(peaks, key=lambda i: (token_surprisals[i], -i))
    center = _peak_run_center(peaks, top_peak)
    start = min(max(0, center - max_tokens // 2), n - max_tokens)
    return (start, start + max_tokens)


def build_grounding(
    doc_id: str,
    passage_index: int,
    passage_tokens: Sequence[str],
    token_surprisals: Sequence[float],
    metadata: dict | None = None,
    source_window_tokens: int = SOURCE_WINDOW_TOKENS,
) -> Grounding:
    """Assemble the grounding record for one flagged passage.

    ``passage_tokens`` are the token surface strings; their concatenation is
    the passage text, so the source window is a contiguous substring of it.
    """
    if len(passage_tokens) != len(token_surprisals):
        raise ValueError("tokens and surprisals differ in length")
    if len(passage_tokens) < 3:
        raise ValueError("passage too short for grounding")
    peaks = peak_positions(token_surprisals)
    start, end = source_window_span(token_surprisals, peaks, source_window_tokens)
    return Grounding(
        doc_id=doc_id,
        passage_index=passage_index,
        passage_text="".join(passage_tokens),
        surprisal=fmean(token_surprisals),
        drop_ratio=drop_ratio(token_surprisals),
        peak_positions=peaks,
        source_window="".join(passage_tokens[start:end]),
        metadata=metadata,
    )


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"embedding dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(va @ vb) / (na * nb)


@dataclass
class StoredGrounding:
    record_id: str
    grounding: Grounding
    embedding: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        payload = {"id": self.record_id}
        payload.update(self.grounding.to_dict())
        payload["embedding"] = list(self.embedding) if self.embedding is not None else None
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "StoredGrounding":
        embedding = payload.get("embedding")
        return cls(
            record_id=payload["id"],
            grounding=Grounding.from_dict(payload),
            embedding=tuple(float(x) for x in embedding) if embedding is not None else None,
        )


class GroundingStore:
    """Append-only JSONL grounding store with cosine retrieval.

    Concurrent readers are safe; writes are serialized by an internal lock
    (single-writer contract). Reopening replays the log; the last record per
    id wins, so identical re-stores are idempotent.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, StoredGrounding] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        record = StoredGrounding.from_dict(json.loads(line))
                        self._records[record.record_id] = record

    @staticmethod
    def record_id_for(doc_id: str, passage_index: int) -> str:
        return f"{doc_id}#{passage_index}"

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._records

    def add(self, grounding: Grounding, embedding: Sequence[float] | None = None) -> str:
        """Persist one grounding; returns its stable record id.

        Re-storing an identical (doc_id, passage_index) record is a no-op;
        changed content for the same ref is appended and the latest version wins.
        """
        record_id = self.record_id_for(grounding.doc_id, grounding.passage_index)
        record = StoredGrounding(
            record_id=record_id,
            grounding=grounding,
            embedding=tuple(float(x) for x in embedding) if embedding is not None else None,
        )
        with self._lock:
            existing = self._records.get(record_id)
            if existing is not None and existing.to_dict() == record.to_dict():
                return record_id
            line = json.dumps(record.to_dict(), sort_keys=True)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
            self._records[record_id] = record
        return record_id

    def get(self, record_id: str) -> StoredGrounding:
        return self._records[record_id]

    def records(self) -> list[StoredGrounding]:
        return sorted(self._records.values(), key=lambda r: r.record_id)

    def retrieve_similar(
        self, query_embedding: Sequence[float], top_k: int
    ) -> list[tuple[float, StoredGrounding]]:
        """Top-k records by descending cosine similarity; ties break by record id."""
        if not self._records:
            raise ValueError("grounding store is empty")
        scored = []
        for record in self._records.values():
            if record.embedding is None:
                continue
            scored.append((cosine_similarity(query_embedding, record.embedding), record))
        scored.sort(key=lambda pair: (-pair[0], pair[1].record_id))
        return scored[: max(top_k, 0)]
