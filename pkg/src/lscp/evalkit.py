"""Evaluation metrics: perturbation gap, five-way QA scoring, self-extinguishing.

The perturbation gap PPL(paraphrase)/PPL(original) separates rote
memorization from semantic learning: memorized token sequences score the
original far better than a reworded equivalent, so the gap explodes; learned
meaning keeps both close. QA grading is deterministic keyphrase matching
rather than model-as-judge, so results are auditable at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from statistics import fmean

from . import textstat
from .textstat import SurprisalProfile

FIVE_WAY_CATEGORIES = (
    "novel_direct",
    "novel_adjacent",
    "corrupt_direct",
    "corrupt_adjacent",
    "unrelated",
)

CORPUS_CATEGORIES = ("known", "novel", "corrupt")


@dataclass(frozen=True)
class PerturbationResult:
    passage_ref: tuple[str, int] | None
    ppl_original: float
    ppl_paraphrase: float
    gap: float


@dataclass(frozen=True)
class FiveWayItem:
    question: str
    expected_keyphrases: tuple[str, ...]
    category: str

    def __post_init__(self):
        if self.category not in FIVE_WAY_CATEGORIES:
            raise ValueError(f"unknown five-way category {self.category!r}")
        if not self.expected_keyphrases:
            raise ValueError("five-way item needs at least one keyphrase")


@dataclass(frozen=True)
class EvalEntry:
    """One evaluation corpus document: text, its paraphrase, attached questions."""

    entry_id: str
    category: str  # known | novel | corrupt
    text: str
    paraphrase: str | None = None
    metadata: dict | None = None
    five_way: tuple[FiveWayItem, ...] = ()

    def __post_init__(self):
        if self.category not in CORPUS_CATEGORIES:
            raise ValueError(f"unknown corpus category {self.category!r}")


def perturbation_gap(
    backend, original: str, paraphrase: str, passage_ref: tuple[str, int] | None = None
) -> PerturbationResult:
    """PPL ratio paraphrase/original via backend scoring; no weight changes."""
    if not original or not paraphrase:
        raise ValueError("both texts must be non-empty")
    ppl_original = textstat.perplexity([-lp for lp in backend.score_text(original)])
    ppl_paraphrase = textstat.perplexity([-lp for lp in backend.score_text(paraphrase)])
    return PerturbationResult(
        passage_ref=passage_ref,
        ppl_original=ppl_original,
        ppl_paraphrase=ppl_paraphrase,
        gap=ppl_paraphrase / ppl_original,
    )


def score_five_way(backend, items, max_tokens: int = 64) -> dict:
    """Greedy-generate an answer per question; correct iff any expected
    keyphrase appears case-insensitively. Generation failures are reported
    separately as ungraded, not counted as wrong."""
    per_category = {cat: {"correct": 0, "total": 0} for cat in FIVE_WAY_CATEGORIES}
    ungraded = []
    for item in items:
        try:
            response = backend.generate(item.question, temperature=0.0, max_tokens=max_tokens)
        except Exception as exc:  # scoring must survive individual failures
            ungraded.append({"question": item.question, "error": str(exc)})
            continue
        lowered = response.lower()
        hit = any(phrase.lower() in lowered for phrase in item.expected_keyphrases)
        bucket = per_category[item.category]
        bucket["total"] += 1
        bucket["correct"] += int(hit)
    table = {}
    for cat, bucket in per_category.items():
        if bucket["total"] == 0:
            continue
        table[cat] = {
            "correct": bucket["correct"],
            "total": bucket["total"],
            "accuracy": bucket["correct"] / bucket["total"],
        }
    return {"per_category": table, "ungraded": ungraded}


def self_extinguish_fraction(mean_before: float, mean_after: float, threshold: float) -> float:
    """Fraction of the distance to the detection threshold covered by training.

    (mean_before - mean_after) / (mean_before - threshold). May exceed 1
    (overshoot) or go negative (surprisal rose).
    """
    if mean_before <= threshold:
        raise ValueError("passages not flagged to begin with")
    return (mean_before - mean_after) / (mean_before - threshold)


def self_extinguish_report(
    before: SurprisalProfile, after: SurprisalProfile, threshold: float
) -> float:
    """self_extinguish_fraction over the mean passage surprisal of two profiles
    covering the same passage set."""
    if before.doc_id != after.doc_id or len(before.passage_surprisals) != len(
        after.passage_surprisals
    ):
        raise ValueError("before/after profiles cover different passage sets")
    return self_extinguish_fraction(
        fmean(before.passage_surprisals), fmean(after.passage_surprisals), threshold
    )


def load_eval_corpus(path) -> list[EvalEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            entries.append(
                EvalEntry(
                    entry_id=payload["id"],
                    category=payload["category"],
                    text=payload["text"],
                    paraphrase=payload.get("paraphrase"),
                    metadata=payload.get("metadata"),
                    five_way=tuple(
                        FiveWayItem(
                            question=q["question"],
                            expected_keyphrases=tuple(q["expected_keyphrases"]),
                            category=q["category"],
                        )
                        for q in payload.get("five_way", [])
                    ),
                )
            )
    return entries
