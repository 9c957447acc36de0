"""Shared fixtures: a pretrained toy model and a fully scripted pipeline world."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import synth
from lscp import gatedopt, pipeline, verifier
from lscp.config import PipelineConfig
from lscp.errors import BackendError
from lscp.modelhub import ScriptedBackend, ToyBackend, ToyModelConfig
from lscp.pipeline import Document
from lscp.verifier import TrainItem

TOY_CONFIG = ToyModelConfig(
    vocab_size=256, context_length=192, embed_dim=64, n_layers=2, n_heads=4, seed=7
)


def clone_toy(backend: ToyBackend) -> ToyBackend:
    """Fresh backend sharing nothing with the original (params copied)."""
    return ToyBackend(backend.config, params={k: v.copy() for k, v in backend.params.items()})


def source_items(documents, k: int = 0) -> list[TrainItem]:
    return [
        TrainItem(
            kind=verifier.KIND_SOURCE_WINDOW,
            text=doc.text,
            conviction_k=k,
            passage_ref=(doc.doc_id, 0),
            importance=1.0,
        )
        for doc in documents
    ]


def pretrain(backend: ToyBackend, documents, epochs: int = 30, lr: float = 3e-3, seed: int = 11):
    """Standard-AdamW pretraining (gate closed: r=1, k=0) on raw document text."""
    return gatedopt.train_corpus(
        backend,
        source_items(documents, k=0),
        gatedopt.GateSchedule(r=1.0),
        epochs=epochs,
        lr=lr,
        weight_decay=0.0,
        seed=seed,
    )


@dataclass
class PretrainedWorld:
    backend: ToyBackend  # do not mutate; use clone_toy
    known_docs: list[Document]
    novel: list[synth.SynthDoc]
    pretrain_report: dict


@pytest.fixture(scope="session")
def pretrained_world() -> PretrainedWorld:
    known_docs = synth.known_documents(20, seed=5)
    novel = synth.novel_passages(20, seed=5)
    backend = ToyBackend(TOY_CONFIG)
    report = pretrain(backend, known_docs)
    return PretrainedWorld(
        backend=backend, known_docs=known_docs, novel=novel, pretrain_report=report
    )


class ScriptedToyBackend(ToyBackend):
    """Toy model for scoring/embedding/training with canned generation.

    Stage 2 needs sensible Q&A text, which an untrained byte model cannot
    produce; scripting just the generate surface keeps the rest of the
    pipeline (scoring, gating, training) fully real.
    """

    def __init__(self, config=None, params=None, script=None):
        super().__init__(config, params)
        self.script = dict(script or {})
        self.generate_calls: list[str] = []

    def generate(self, prompt, temperature=0.0, max_tokens=256):
        self.generate_calls.append(prompt)
        if prompt in self.script:
            return self.script[prompt]
        raise BackendError(f"scripted toy missing generate entry for {prompt[:60]!r}")


@dataclass
class ToyWorld:
    backend: ScriptedToyBackend
    config: PipelineConfig
    documents: list[Document]
    reference: list[Document]
    novel: list[synth.SynthDoc]


def build_toy_world(
    pretrained: PretrainedWorld,
    r: float = 0.9,
    epochs: int = 3,
    lr: float = 1e-3,
    lam: float = 2.5,
    accept_policy: str = "graduated",
    include_source_windows: bool = True,
    n_docs: int | None = None,
    check_response=lambda ref, pair: "PASS: consistent with what I know.",
) -> ToyWorld:
    """Full-pipeline world on the pretrained toy model: every chain/check
    prompt the run will issue is pre-scripted from the synthetic Q&A."""
    novel = pretrained.novel[: n_docs or len(pretrained.novel)]
    documents = [d.document() for d in novel]
    reference = pretrained.known_docs
    config = PipelineConfig(
        backend_kind="toy",
        train_enabled=True,
        window_w=TOY_CONFIG.context_length,  # one passage per synthetic doc
        lam=lam,
        c=1.0,
        n_min=1,
        n_max=3,
        r=r,
        epochs=epochs,
        lr=lr,
        weight_decay=0.0,
        accept_policy=accept_policy,
        include_source_windows=include_source_windows,
        seed=123,
        toy_context_length=TOY_CONFIG.context_length,
        toy_embed_dim=TOY_CONFIG.embed_dim,
        toy_n_layers=TOY_CONFIG.n_layers,
        toy_n_heads=TOY_CONFIG.n_heads,
    )
    backend = ScriptedToyBackend(
        pretrained.backend.config,
        params={k: v.copy() for k, v in pretrained.backend.params.items()},
    )
    by_id = {d.doc_id: d for d in novel}
    _stats, _profiles, groundings, _sec = pipeline.run_stage1(
        backend, config, documents, reference, store=None
    )
    templates = verifier.load_templates()
    tags = (verifier.TAG_EXISTING, verifier.TAG_MECHANISM, verifier.TAG_IMPLICATION)
    for ref in sorted(groundings):
        grounding = groundings[ref]
        n = verifier.chain_length(grounding.surprisal, config.c, config.n_min, config.n_max)
        qa = by_id[ref[0]].qa
        lines = [f"[{tags[j % 3]}] Q: {q} A: {a}" for j, (q, a) in enumerate(qa[:n])]
        response = "\n".join(lines)
        backend.script[verifier.render_chain_prompt(templates, grounding, n)] = response
        for pair in verifier.parse_chain_response(response, n):
            backend.script[verifier.render_check_prompt(templates, pair)] = check_response(
                ref, pair
            )
    return ToyWorld(
        backend=backend, config=config, documents=documents, reference=reference, novel=novel
    )


# ---------------------------------------------------------------------------
# Scripted world: a self-consistent lookup-table backend plus fixture files
# covering every prompt the pipeline will issue.
# ---------------------------------------------------------------------------

KNOWN_TEXTS = [
    "the cat waits near the gate and the dog sleeps by the stove.",
    "the hen feeds in the yard while the lamb rests on the straw.",
]
NOVEL_TEXTS = [
    "zorvex shards hum with triline charge under borlight all night.",
    "quibran spores shed pale xenium dust within the kiln mist.",
]
REFERENCE_TEXTS = [
    "the mare drinks from the pail after rain most evenings here.",
    "the owl calls from the fence at dusk and hides under the cart.",
]

KNOWN_LOGPROB = -1.0
NOVEL_LOGPROB = -3.0
REFERENCE_LOGPROBS = (-1.0, -1.2)


@dataclass
class ScriptedWorld:
    script: dict
    script_path: Path
    config: PipelineConfig
    documents: list[Document]
    reference: list[Document]
    docs_path: Path
    reference_path: Path
    eval_path: Path
    expected_flagged: int

    def backend(self, strict: bool = True) -> ScriptedBackend:
        return ScriptedBackend(self.script, strict=strict)


def _add_score(script: dict, text: str, logprob: float) -> None:
    script.setdefault("score", {})[text] = [logprob] * len(text.encode("utf-8"))


def build_scripted_world(
    tmp_path: Path,
    lam: float = 2.0,
    check_response=lambda ref, pair: "PASS: consistent with what I know.",
) -> ScriptedWorld:
    tmp_path.mkdir(parents=True, exist_ok=True)
    script: dict = {"score": {}, "generate": {}}
    documents = [Document(f"known-{i}", t) for i, t in enumerate(KNOWN_TEXTS)]
    documents += [
        Document(f"novel-{i}", t, metadata={"journal": "field notes"})
        for i, t in enumerate(NOVEL_TEXTS)
    ]
    reference = [Document(f"ref-{i}", t) for i, t in enumerate(REFERENCE_TEXTS)]

    for text in KNOWN_TEXTS:
        _add_score(script, text, KNOWN_LOGPROB)
    for text in NOVEL_TEXTS:
        _add_score(script, text, NOVEL_LOGPROB)
    for text, lp in zip(REFERENCE_TEXTS, REFERENCE_LOGPROBS):
        _add_score(script, text, lp)

    config = PipelineConfig(
        backend_kind="scripted",
        backend_script="(inline)",
        train_enabled=False,
        window_w=16,
        lam=lam,
        c=1.0,
        n_min=1,
        n_max=20,
        seed=0,
    )

    # Derive the exact groundings stage 1 will build, then script every
    # chain-generation and consistency-check prompt it will issue.
    probe = ScriptedBackend(script, strict=True)
    _stats, _profiles, groundings, _section = pipeline.run_stage1(
        probe, config, documents, reference, store=None
    )
    templates = verifier.load_templates()
    tags = (verifier.TAG_EXISTING, verifier.TAG_MECHANISM, verifier.TAG_IMPLICATION)
    for ref in sorted(groundings):
        grounding = groundings[ref]
        n = verifier.chain_length(grounding.surprisal, config.c, config.n_min, config.n_max)
        pairs = []
        lines = []
        for j in range(n):
            tag = tags[j % 3]
            question = f"probe {ref[0]} {ref[1]} {j}?"
            answer = f"fact {j} holds."
            lines.append(f"[{tag}] Q: {question} A: {answer}")
            pairs.append(verifier.QaPair(question=question, answer=answer, tag=tag, position=j + 1))
        response = "\n".join(lines)
        assert verifier.parse_chain_response(response, n) == pairs
        script["generate"][verifier.render_chain_prompt(templates, grounding, n)] = response
        for pair in pairs:
            script["generate"][verifier.render_check_prompt(templates, pair)] = check_response(
                ref, pair
            )

    # Evaluation corpus: PPL per category, a paraphrase gap pair, five-way items.
    para_known = "near the gate the cat waits and by the stove the dog sleeps."
    para_novel = "under borlight, zorvex shards drone with triline charge at night."
    _add_score(script, para_known, -1.5)
    _add_score(script, para_novel, NOVEL_LOGPROB)  # identity-strength paraphrase
    corrupt_text = "the cat emits xenium dust most evenings beneath the stove door."
    _add_score(script, corrupt_text, -3.1)
    five_way = [
        {
            "question": "what charge do zorvex shards hum with?",
            "expected_keyphrases": ["triline"],
            "category": "novel_direct",
        },
        {
            "question": "what does the cat do near the gate?",
            "expected_keyphrases": ["waits"],
            "category": "novel_adjacent",
        },
        {
            "question": "do cats emit xenium dust?",
            "expected_keyphrases": ["no"],
            "category": "corrupt_direct",
        },
        {
            "question": "where does the lamb rest?",
            "expected_keyphrases": ["straw"],
            "category": "corrupt_adjacent",
        },
        {
            "question": "what does the owl do at dusk?",
            "expected_keyphrases": ["calls"],
            "category": "unrelated",
        },
    ]
    answers = {
        "what charge do zorvex shards hum with?": "a triline charge.",
        "what does the cat do near the gate?": "it waits there.",
        "do cats emit xenium dust?": "that seems very unlikely.",  # miss: no keyphrase
        "where does the lamb rest?": "on the straw.",
        "what does the owl do at dusk?": "it calls from the fence.",
    }
    script["generate"].update(answers)

    eval_entries = [
        {"id": "e-known", "category": "known", "text": KNOWN_TEXTS[0], "paraphrase": para_known},
        {
            "id": "e-novel",
            "category": "novel",
            "text": NOVEL_TEXTS[0],
            "paraphrase": para_novel,
            "five_way": five_way,
        },
        {"id": "e-corrupt", "category": "corrupt", "text": corrupt_text},
    ]

    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps(script, indent=1, sort_keys=True))
    docs_path = tmp_path / "documents.jsonl"
    docs_path.write_text(
        "".join(
            json.dumps({"id": d.doc_id, "text": d.text, "metadata": d.metadata}) + "\n"
            for d in documents
        )
    )
    reference_path = tmp_path / "reference.jsonl"
    reference_path.write_text(
        "".join(json.dumps({"id": d.doc_id, "text": d.text}) + "\n" for d in reference)
    )
    eval_path = tmp_path / "eval.jsonl"
    eval_path.write_text("".join(json.dumps(e) + "\n" for e in eval_entries))

    config = PipelineConfig(
        **{
            **{k if k != "lambda" else "lam": v for k, v in config.to_dict().items()},
            "backend_script": str(script_path),
        }
    )
    return ScriptedWorld(
        script=script,
        script_path=script_path,
        config=config,
        documents=documents,
        reference=reference,
        docs_path=docs_path,
        reference_path=reference_path,
        eval_path=eval_path,
        expected_flagged=len(groundings),
    )


@pytest.fixture
def scripted_world(tmp_path) -> ScriptedWorld:
    return build_scripted_world(tmp_path)
