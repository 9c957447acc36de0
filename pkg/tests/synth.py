"""Deterministic synthetic byte-level corpora for toy-scale experiments.

Two disjoint template grammars: a "known" farmyard grammar the toy model is
pretrained on, and a "novel" grammar built from invented vocabulary it has
never seen. Each novel passage comes with a deterministic paraphrase (clause
reorder plus word swaps, same facts) and question-answer renderings of its
content for Q&A-format training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lscp.pipeline import Document

KNOWN_SUBJECTS = [
    "the cat", "the dog", "the mare", "the wren", "the fox",
    "the hen", "the lamb", "the owl", "the goat", "the crow",
]
KNOWN_ACTIONS = [
    "sleeps by the stove", "waits near the gate", "drinks from the pail",
    "hides under the cart", "calls from the fence", "feeds in the yard",
    "rests on the straw", "walks along the wall",
]
KNOWN_TIMES = [
    "at dawn", "at dusk", "after rain", "in the cold",
    "all morning", "most evenings", "before noon", "in deep winter",
]

NOVEL_SUBJECTS = [
    "zorvex shards", "quibran spores", "velmir coils", "tessik looms",
    "marniq flakes", "ulvran beads", "pyxet threads", "dravik husks",
    "korlan foils", "sibrex motes",
]
NOVEL_ACTIONS = [
    "hum with triline charge", "shed pale xenium dust",
    "bind loose argyte grains", "fold crooked umbral seams",
    "leak cold virell glow", "trap stray bexil sparks",
    "grow thin oskan ridges", "spin slow hadrine rings",
]
NOVEL_CONDITIONS = [
    "under borlight", "beneath the frostline", "within the kiln mist",
    "against the null wind", "inside the salt vault", "past the ember gap",
    "near the glass marsh", "below the quiet shelf",
]

# Word swaps used when paraphrasing (same facts, different bytes).
_SWAPS = {
    "hum": "drone", "shed": "release", "bind": "gather", "fold": "crease",
    "leak": "seep", "trap": "catch", "grow": "raise", "spin": "turn",
    "under": "beneath", "within": "inside", "near": "beside", "below": "past",
}


@dataclass(frozen=True)
class SynthDoc:
    doc_id: str
    text: str
    paraphrase: str
    qa: tuple[tuple[str, str], ...]  # (question, answer) pairs about the content

    def document(self, metadata: dict | None = None) -> Document:
        return Document(doc_id=self.doc_id, text=self.text, metadata=metadata)

    @property
    def qa_texts(self) -> tuple[str, ...]:
        return tuple(f"Q: {q}\nA: {a}" for q, a in self.qa)


def _known_sentence(rng) -> str:
    return (
        f"{rng.choice(KNOWN_SUBJECTS)} {rng.choice(KNOWN_ACTIONS)} "
        f"{rng.choice(KNOWN_TIMES)}."
    )


def known_documents(n: int, seed: int = 0, sentences: int = 3) -> list[Document]:
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        text = " ".join(_known_sentence(rng) for _ in range(sentences))
        docs.append(Document(doc_id=f"known-{i:03d}", text=text))
    return docs


def _swap_words(text: str) -> str:
    return " ".join(_SWAPS.get(word, word) for word in text.split())


def novel_passages(n: int, seed: int = 0) -> list[SynthDoc]:
    rng = np.random.default_rng(seed + 1_000)
    docs = []
    for i in range(n):
        subject = rng.choice(NOVEL_SUBJECTS)
        act_a, act_b = rng.choice(NOVEL_ACTIONS, size=2, replace=False)
        cond_a, cond_b = rng.choice(NOVEL_CONDITIONS, size=2, replace=False)
        text = f"{subject} {act_a} {cond_a}. {subject} {act_b} {cond_b}."
        paraphrase = (
            f"{_swap_words(cond_a)}, {subject} {_swap_words(act_a)}. "
            f"{_swap_words(cond_b)}, the same {subject} {_swap_words(act_b)}."
        )
        qa = (
            (f"what do {subject} do {cond_a}?", f"they {act_a}."),
            (f"where do {subject} {act_b.split()[0]} things?", f"{cond_b}."),
            (f"which material {act_a.split()[0]}s {cond_a}?", f"{subject}."),
        )
        docs.append(
            SynthDoc(doc_id=f"novel-{i:03d}", text=text, paraphrase=paraphrase, qa=qa)
        )
    return docs
