"""Self-verification: tagged Q&A chains, consistency checks, break policy, corpus.

For each flagged passage the backend generates a chain of tagged question-
answer pairs in a single call, each pair is consistency-checked against the
model's own knowledge (the passage is never in the check prompt), and a
tag-aware break policy turns the verdicts into a conviction depth k:
failures on background questions are lenient, failures on mechanism or
implication questions terminate the chain and leave a strangeness record.

Prompt templates live in versioned text files (see lscp/prompts/) so they can
be tuned without touching code; placeholders are {{passage}}, {{metadata}},
{{n_questions}}, {{question}}, {{answer}}, {{tag}}, {{claim}}, {{reasoning}}.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ChainGenerationError
from .grounding import Grounding

logger = logging.getLogger(__name__)

TAG_EXISTING = "existing"
TAG_MECHANISM = "mechanism"
TAG_IMPLICATION = "implication"
TAGS = (TAG_EXISTING, TAG_MECHANISM, TAG_IMPLICATION)

VERDICT_PASS = "PASS"
VERDICT_FAIL_LENIENT = "FAIL_LENIENT"
VERDICT_FAIL_BREAK = "FAIL_BREAK"

KIND_QA_PAIR = "qa_pair"
KIND_SOURCE_WINDOW = "source_window"
KIND_STRANGENESS = "strangeness"

UNCERTAINTY_PHRASE = "I cannot confirm or rule this out"

_PAIR_RE = re.compile(
    r"^\s*\[(existing|mechanism|implication)\]\s*Q:\s*(.+?)\s+A:\s*(.+?)\s*$"
)
_VERDICT_RE = re.compile(r"\b(PASS|FAIL)\b")


@dataclass(frozen=True)
class QaPair:
    question: str
    answer: str
    tag: str
    position: int  # 1-based index in the chain

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "tag": self.tag,
            "position": self.position,
        }


@dataclass(frozen=True)
class ChainStep:
    pair: QaPair
    verdict: str  # PASS | FAIL_LENIENT | FAIL_BREAK
    reason: str = ""


@dataclass(frozen=True)
class StrangenessRecord:
    passage_ref: tuple[str, int]
    claim_summary: str
    failure_reasoning: str
    text: str
    k_at_break: int


@dataclass(frozen=True)
class ChainOutcome:
    passage_ref: tuple[str, int]
    steps: tuple[ChainStep, ...]
    conviction_k: int
    completed: bool
    strangeness: StrangenessRecord | None = None

    def to_dict(self) -> dict:
        return {
            "passage_ref": list(self.passage_ref),
            "pairs": [step.pair.to_dict() for step in self.steps],
            "verdicts": [step.verdict for step in self.steps],
            "k": self.conviction_k,
            "completed": self.completed,
            "strangeness": self.strangeness.text if self.strangeness else None,
        }


@dataclass(frozen=True)
class TrainItem:
    """One unit of training text with its conviction depth and importance weight."""

    kind: str  # qa_pair | source_window | strangeness
    text: str
    conviction_k: int
    passage_ref: tuple[str, int]
    importance: float  # the passage's surprisal S_i

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "text": self.text,
            "conviction_k": self.conviction_k,
            "passage_ref": list(self.passage_ref),
            "importance": self.importance,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainItem":
        return cls(
            kind=payload["kind"],
            text=payload["text"],
            conviction_k=int(payload["conviction_k"]),
            passage_ref=tuple(payload["passage_ref"]),
            importance=float(payload["importance"]),
        )


@dataclass(frozen=True)
class PromptTemplates:
    chain_generation: str
    consistency_check: str
    strangeness: str


def load_templates(template_dir: str | Path | None = None) -> PromptTemplates:
    """Load prompt templates, from a directory override or the packaged defaults."""

    def read(name: str) -> str:
        if template_dir is not None:
            return (Path(template_dir) / name).read_text(encoding="utf-8")
        return resources.files("lscp.prompts").joinpath(name).read_text(encoding="utf-8")

    templates = PromptTemplates(
        chain_generation=read("chain_generation.txt"),
        consistency_check=read("consistency_check.txt"),
        strangeness=read("strangeness.txt"),
    )
    if UNCERTAINTY_PHRASE not in templates.strangeness:
        raise ValueError(f"strangeness template must contain {UNCERTAINTY_PHRASE!r}")
    return templates


def format_metadata(metadata: Mapping | None) -> str:
    if not metadata:
        return ""
    return "Source: " + " | ".join(f"{k}: {v}" for k, v in metadata.items())


def chain_length(s_i: float, c: float, n_min: int, n_max: int) -> int:
    """N = clamp(ceil(S_i * c), n_min, n_max)."""
    if c <= 0:
        raise ValueError("scaling constant c must be positive")
    if n_min > n_max or n_min <= 0:
        raise ValueError("invalid chain length clamp")
    return min(max(math.ceil(s_i * c), n_min), n_max)


def render_chain_prompt(templates: PromptTemplates, passage: Grounding, n_questions: int) -> str:
    return (
        templates.chain_generation.replace("{{passage}}", passage.passage_text)
        .replace("{{metadata}}", format_metadata(passage.metadata))
        .replace("{{n_questions}}", str(n_questions))
    )


def render_check_prompt(templates: PromptTemplates, pair: QaPair) -> str:
    return (
        templates.consistency_check.replace("{{question}}", pair.question)
        .replace("{{answer}}", pair.answer)
        .replace("{{tag}}", pair.tag)
    )


def parse_chain_response(response: str, n_max: int) -> list[QaPair]:
    """Parse '[tag] Q: ... A: ...' lines; untagged lines are dropped, not guessed."""
    pairs: list[QaPair] = []
    for line in response.splitlines():
        if not line.strip():
            continue
        match = _PAIR_RE.match(line)
        if match is None:
            logger.warning("dropping unparsable chain line: %r", line.strip()[:80])
            continue
        if len(pairs) >= n_max:
            logger.warning("chain response longer than requested; truncating at %d pairs", n_max)
            break
        tag, question, answer = match.groups()
        pairs.append(QaPair(question=question, answer=answer, tag=tag, position=len(pairs) + 1))
    return pairs


def generate_chain(
    backend,
    passage: Grounding,
    n_questions: int,
    templates: PromptTemplates | None = None,
    temperature: float = 0.7,
    max_tokens: int = 1024,
) -> list[QaPair]:
    """Generate the full tagged chain in a single inference call.

    One retry on a response with no parsable pairs; a second failure raises
    ChainGenerationError and the caller skips (and records) the passage.
    """
    if n_questions < 1:
        raise ValueError("chain needs at least one question")
    templates = templates or load_templates()
    prompt = render_chain_prompt(templates, passage, n_questions)
    for _attempt in range(2):
        response = backend.generate(prompt, temperature=temperature, max_tokens=max_tokens)
        pairs = parse_chain_response(response, n_questions)
        if pairs:
            return pairs
        logger.warning("chain generation for %s produced no pairs; retrying", passage.passage_ref)
    raise ChainGenerationError("chain generation failed")


def check_consistency(
    backend,
    pair: QaPair,
    templates: PromptTemplates | None = None,
    temperature: float = 0.1,
    max_tokens: int = 128,
) -> tuple[str, str]:
    """One consistency-check call; returns ("PASS"|"FAIL", reason text).

    The passage is absent from the prompt by construction: the answer is
    judged against parametric knowledge only. An unparsable verdict is
    retried once, then conservatively treated as FAIL.
    """
    templates = templates or load_templates()
    prompt = render_check_prompt(templates, pair)
    for _attempt in range(2):
        response = backend.generate(prompt, temperature=temperature, max_tokens=max_tokens)
        match = _VERDICT_RE.search(response)
        if match is not None:
            return match.group(1), response.strip()
    return "FAIL", "unparsable"


def render_strangeness(
    templates: PromptTemplates,
    passage_ref: tuple[str, int],
    pair: QaPair,
    reason: str,
    k_at_break: int,
) -> StrangenessRecord:
    claim = pair.answer.strip().rstrip(".")
    reasoning = (reason or "the consistency check failed").strip().rstrip(".")
    text = templates.strangeness.replace("{{claim}}", claim).replace("{{reasoning}}", reasoning).strip()
    return StrangenessRecord(
        passage_ref=passage_ref,
        claim_summary=claim,
        failure_reasoning=reasoning,
        text=text,
        k_at_break=k_at_break,
    )


def run_break_policy(
    passage_ref: tuple[str, int],
    checked: Sequence[tuple],
    templates: PromptTemplates | None = None,
) -> ChainOutcome:
    """Fold raw (pair, "PASS"|"FAIL"[, reason]) verdicts into a chain outcome.

    In position order: PASS increments k; FAIL on an existing-tagged pair is
    recorded and the chain continues; FAIL on mechanism or implication
    terminates immediately with a strangeness record at the current k.
    Entries after a break are not evaluated.
    """
    templates = templates or load_templates()
    steps: list[ChainStep] = []
    k = 0
    strangeness = None
    completed = True
    for entry in checked:
        pair, verdict = entry[0], entry[1]
        reason = entry[2] if len(entry) > 2 else ""
        if verdict == "PASS":
            k += 1
            steps.append(ChainStep(pair, VERDICT_PASS, reason))
        elif pair.tag == TAG_EXISTING:
            steps.append(ChainStep(pair, VERDICT_FAIL_LENIENT, reason))
        else:
            steps.append(ChainStep(pair, VERDICT_FAIL_BREAK, reason))
            strangeness = render_strangeness(templates, passage_ref, pair, reason, k)
            completed = False
            break
    return ChainOutcome(
        passage_ref=passage_ref,
        steps=tuple(steps),
        conviction_k=k,
        completed=completed,
        strangeness=strangeness,
    )


def evaluate_chain(
    backend,
    passage_ref: tuple[str, int],
    pairs: Sequence[QaPair],
    templates: PromptTemplates | None = None,
    temperature: float = 0.1,
) -> ChainOutcome:
    """Check pairs in order, stopping at the first break-worthy failure."""
    templates = templates or load_templates()
    checked: list[tuple[QaPair, str, str]] = []
    for pair in pairs:
        verdict, reason = check_consistency(backend, pair, templates, temperature=temperature)
        checked.append((pair, verdict, reason))
        if verdict == "FAIL" and pair.tag != TAG_EXISTING:
            break
    return run_break_policy(passage_ref, checked, templates)


def qa_item_text(pair: QaPair) -> str:
    return f"Q: {pair.question}\nA: {pair.answer}"


def source_window_text(grounding: Grounding) -> str:
    meta_line = format_metadata(grounding.metadata)
    if meta_line:
        return f"{meta_line}\n{grounding.source_window}"
    return grounding.source_window


def build_corpus(
    outcomes: Iterable[ChainOutcome],
    groundings: Mapping[tuple[str, int], Grounding],
    accept_policy: str = "graduated",
    include_source_windows: bool = True,
) -> list[TrainItem]:
    """Assemble the training corpus from chain outcomes.

    graduated: every passage with k > 0 contributes its PASS-verdict mechanism
    and implication pairs (existing pairs verify baseline, they do not train),
    plus its source window; k = 0 passages contribute only strangeness.
    threshold: only chains that completed without a break (and passed at least
    one check) contribute items. Strangeness records are included under both
    policies, carrying the k at their break point.
    """
    if accept_policy not in ("graduated", "threshold"):
        raise ValueError(f"unknown accept policy {accept_policy!r}")
    items: list[TrainItem] = []
    for outcome in outcomes:
        grounding = groundings[outcome.passage_ref]
        k = outcome.conviction_k
        if accept_policy == "graduated":
            eligible = k > 0
        else:
            eligible = outcome.completed and k > 0
        if eligible:
            for step in outcome.steps:
                if step.verdict == VERDICT_PASS and step.pair.tag in (TAG_MECHANISM, TAG_IMPLICATION):
                    items.append(
                        TrainItem(
                            kind=KIND_QA_PAIR,
                            text=qa_item_text(step.pair),
                            conviction_k=k,
                            passage_ref=outcome.passage_ref,
                            importance=grounding.surprisal,
                        )
                    )
            if include_source_windows:
                items.append(
                    TrainItem(
                        kind=KIND_SOURCE_WINDOW,
                        text=source_window_text(grounding),
                        conviction_k=k,
                        passage_ref=outcome.passage_ref,
                        importance=grounding.surprisal,
                    )
                )
        if outcome.strangeness is not None:
            items.append(
                TrainItem(
                    kind=KIND_STRANGENESS,
                    text=outcome.strangeness.text,
                    conviction_k=outcome.strangeness.k_at_break,
                    passage_ref=outcome.passage_ref,
                    importance=grounding.surprisal,
                )
            )
    return items


def write_outcomes_jsonl(path, outcomes: Iterable[ChainOutcome]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for outcome in outcomes:
            fh.write(json.dumps(outcome.to_dict(), sort_keys=True) + "\n")
