"""End-to-end orchestration: detect -> verify -> consolidate -> evaluate.

All stages run against the same backend instance; each stage section of the
run report records the backend's instance id so that invariant is checkable
after the fact. Reports are plain JSON-serializable dicts, deterministic
given the seed and a deterministic backend (wall-clock timings live in a
separate "timing" section so determinism checks can exclude them).
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Sequence

import numpy as np

from . import evalkit, gatedopt, textstat, verifier
from .config import PipelineConfig
from .errors import (
    BackendError,
    CapabilityError,
    ChainGenerationError,
    ConfigError,
    StageError,
)
from .grounding import Grounding, GroundingStore, build_grounding
from .modelhub import (
    CAP_EMBED,
    CAP_GENERATE,
    CAP_SCORE,
    CAP_TRAIN,
    RemoteBackend,
    ScriptedBackend,
    ToyBackend,
    ToyModelConfig,
    token_overlap_embedding,
)
from .textstat import SurprisalProfile, fit_reference, flag_passages, surprisal_profile
from .verifier import TrainItem

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    metadata: dict | None = None


def load_documents_jsonl(path) -> list[Document]:
    documents = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            documents.append(
                Document(
                    doc_id=payload["id"],
                    text=payload["text"],
                    metadata=payload.get("metadata"),
                )
            )
    return documents


def make_backend(config: PipelineConfig, fresh_toy: bool = False):
    """Build the configured backend. fresh_toy skips checkpoint loading so
    `train` can bootstrap the checkpoint it is about to write."""
    if config.backend_kind == "toy":
        if config.backend_checkpoint and not fresh_toy:
            try:
                return ToyBackend.load_checkpoint(config.backend_checkpoint)
            except FileNotFoundError as exc:
                raise ConfigError(
                    f"toy checkpoint not found: {config.backend_checkpoint}"
                ) from exc
        return ToyBackend(
            ToyModelConfig(
                vocab_size=config.toy_vocab_size,
                context_length=config.toy_context_length,
                embed_dim=config.toy_embed_dim,
                n_layers=config.toy_n_layers,
                n_heads=config.toy_n_heads,
                seed=config.seed,
            )
        )
    if config.backend_kind == "scripted":
        return ScriptedBackend(config.backend_script)
    return RemoteBackend(base_url=config.remote_url, model=config.remote_model)


def _require_capabilities(backend, config: PipelineConfig) -> None:
    needed = {CAP_SCORE, CAP_GENERATE}
    if config.train_enabled:
        needed.add(CAP_TRAIN)
    missing = sorted(needed - set(backend.descriptor.capabilities))
    if missing:
        raise CapabilityError(
            f"{backend.descriptor.kind} backend lacks required capabilities: {missing}"
        )


def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _profile_document(backend, document: Document, window_w: int):
    tokens, logprobs = backend.score_tokens(document.text)
    profile = surprisal_profile(logprobs, window_w, doc_id=document.doc_id)
    return profile, tokens


def _embed_passage(backend, text: str):
    if backend.supports(CAP_EMBED):
        try:
            return [float(x) for x in np.asarray(backend.embed(text)).ravel()]
        except Exception:
            logger.warning("backend embed failed; falling back to token-overlap vector")
    return [float(x) for x in token_overlap_embedding(text)]


def run_stage1(
    backend,
    config: PipelineConfig,
    documents: Sequence[Document],
    reference_documents: Sequence[Document],
    store: GroundingStore | None = None,
):
    """Score, fit reference stats, flag, and ground the flagged passages."""
    ref_profiles = _map_ordered(
        lambda d: _profile_document(backend, d, config.window_w)[0],
        list(reference_documents),
        config.workers,
    )
    stats = fit_reference(ref_profiles, config.lam)

    doc_results = _map_ordered(
        lambda d: _profile_document(backend, d, config.window_w),
        list(documents),
        config.workers,
    )
    groundings: dict[tuple[str, int], Grounding] = {}
    flag_summary = []
    profiles: dict[str, SurprisalProfile] = {}
    skipped_short = []
    for document, (profile, tokens) in zip(documents, doc_results):
        profiles[document.doc_id] = profile
        flags = flag_passages(profile, stats)
        flag_summary.append(
            {
                "doc_id": document.doc_id,
                "passages": [[f.passage_index, f.surprisal, f.flagged] for f in flags],
            }
        )
        bounds = profile.passage_bounds()
        for f in flags:
            if not f.flagged:
                continue
            start, end = bounds[f.passage_index]
            try:
                grounding = build_grounding(
                    document.doc_id,
                    f.passage_index,
                    tokens[start:end],
                    profile.token_surprisals[start:end],
                    metadata=document.metadata,
                    source_window_tokens=config.source_window_tokens,
                )
            except ValueError:
                skipped_short.append([document.doc_id, f.passage_index])
                continue
            groundings[grounding.passage_ref] = grounding
            if store is not None:
                store.add(grounding, embedding=_embed_passage(backend, grounding.passage_text))

    section = {
        "backend_instance": backend.descriptor.instance_id,
        "reference": stats.to_json(),
        "threshold": stats.threshold(),
        "n_documents": len(documents),
        "n_passages": sum(len(entry["passages"]) for entry in flag_summary),
        "n_flagged": len(groundings) + len(skipped_short),
        "n_grounded": len(groundings),
        "flags": flag_summary,
        "skipped_short_passages": skipped_short,
    }
    return stats, profiles, groundings, section


def generate_chains(backend, config: PipelineConfig, groundings: dict):
    """Stage 2, generation half: one chain per flagged passage (cacheable)."""
    templates = verifier.load_templates(config.template_dir)
    refs = sorted(groundings)

    def one(ref):
        grounding = groundings[ref]
        n = verifier.chain_length(grounding.surprisal, config.c, config.n_min, config.n_max)
        try:
            pairs = verifier.generate_chain(
                backend,
                grounding,
                n,
                templates,
                temperature=config.gen_temperature,
                max_tokens=config.chain_max_tokens,
            )
        except (ChainGenerationError, BackendError, ValueError) as exc:
            # Per-passage failure (unparsable chain, overlong prompt, missing
            # script entry): skip the passage, record why, keep the stage alive.
            return ref, n, None, str(exc)
        return ref, n, pairs, None

    results = _map_ordered(one, refs, config.workers)
    chains = [(ref, n, pairs) for ref, n, pairs, err in results if pairs is not None]
    skipped = [{"passage_ref": list(ref), "error": err} for ref, _n, pairs, err in results if pairs is None]
    return templates, chains, skipped


def check_chains(backend, config: PipelineConfig, templates, chains):
    """Stage 2, verification half: consistency checks plus the break policy."""

    def one(entry):
        ref, _n, pairs = entry
        return verifier.evaluate_chain(
            backend, ref, pairs, templates, temperature=config.check_temperature
        )

    return _map_ordered(one, chains, config.workers)


def assemble_corpus(config: PipelineConfig, outcomes, groundings: dict, stats=None):
    """Apply the optional marginal-failure filter, then build the corpus.

    A broken chain over a passage only marginally above the detection
    threshold is the signature of noise, not novelty; with
    discard_marginal_failures on, such passages are dropped outright,
    strangeness included. Returns (corpus, discarded passage refs).
    """
    discarded_marginal = []
    kept = outcomes
    if config.discard_marginal_failures and stats is not None:
        band = stats.threshold() + config.marginal_band_sigma * stats.sigma
        kept = []
        for outcome in outcomes:
            marginal = groundings[outcome.passage_ref].surprisal <= band
            if not outcome.completed and marginal:
                discarded_marginal.append(list(outcome.passage_ref))
            else:
                kept.append(outcome)
    corpus = verifier.build_corpus(
        kept,
        groundings,
        accept_policy=config.accept_policy,
        include_source_windows=config.include_source_windows,
    )
    return corpus, discarded_marginal


def run_stage2(
    backend,
    config: PipelineConfig,
    groundings: dict,
    out_dir: Path | None = None,
    stats=None,
):
    templates, chains, skipped = generate_chains(backend, config, groundings)
    outcomes = check_chains(backend, config, templates, chains)
    corpus, discarded_marginal = assemble_corpus(config, outcomes, groundings, stats)
    if out_dir is not None:
        verifier.write_outcomes_jsonl(out_dir / "chain_outcomes.jsonl", outcomes)
    counts = {kind: 0 for kind in (verifier.KIND_QA_PAIR, verifier.KIND_SOURCE_WINDOW, verifier.KIND_STRANGENESS)}
    for item in corpus:
        counts[item.kind] += 1
    section = {
        "backend_instance": backend.descriptor.instance_id,
        "accept_policy": config.accept_policy,
        "include_source_windows": config.include_source_windows,
        "discarded_marginal": discarded_marginal,
        "chains": [
            {
                "passage_ref": list(outcome.passage_ref),
                "n_questions": n,
                "n_evaluated": len(outcome.steps),
                "k": outcome.conviction_k,
                "completed": outcome.completed,
                "strangeness": outcome.strangeness is not None,
            }
            for (ref, n, _pairs), outcome in zip(chains, outcomes)
        ],
        "skipped": skipped,
        "corpus_counts": {**counts, "total": len(corpus)},
    }
    return outcomes, corpus, section


def run_stage3(backend, config: PipelineConfig, corpus: Sequence[TrainItem]):
    schedule = gatedopt.GateSchedule(r=config.r, beta2_floor=config.beta2_floor)
    report = gatedopt.train_corpus(
        backend,
        corpus,
        schedule,
        epochs=config.epochs,
        lr=config.lr,
        weight_decay=config.weight_decay,
        seed=config.seed,
    )
    report["backend_instance"] = backend.descriptor.instance_id
    return report


def evaluate_backend(backend, config: PipelineConfig, eval_entries) -> dict:
    """Perplexity per corpus category, perturbation gaps, five-way accuracy."""
    ppl_by_category: dict[str, list[float]] = {}
    gaps = []
    for entry in eval_entries:
        surprisals = [-lp for lp in backend.score_text(entry.text)]
        ppl_by_category.setdefault(entry.category, []).append(textstat.perplexity(surprisals))
        if entry.paraphrase:
            result = evalkit.perturbation_gap(backend, entry.text, entry.paraphrase)
            gaps.append({"id": entry.entry_id, "category": entry.category, "gap": result.gap})
    five_way_items = [item for entry in eval_entries for item in entry.five_way]
    section = {
        "ppl": {cat: fmean(values) for cat, values in sorted(ppl_by_category.items())},
        "perturbation": {
            "per_entry": gaps,
            "mean_gap": fmean([g["gap"] for g in gaps]) if gaps else None,
        },
    }
    if five_way_items:
        section["five_way"] = evalkit.score_five_way(
            backend, five_way_items, max_tokens=config.answer_max_tokens
        )
    return section


def _flagged_mean(backend, config: PipelineConfig, documents, groundings) -> float | None:
    """Mean S_i over currently-flagged passage slots, re-scored now."""
    if not groundings:
        return None
    by_doc: dict[str, list[int]] = {}
    for doc_id, passage_index in groundings:
        by_doc.setdefault(doc_id, []).append(passage_index)
    values = []
    for document in documents:
        if document.doc_id not in by_doc:
            continue
        profile, _tokens = _profile_document(backend, document, config.window_w)
        for index in by_doc[document.doc_id]:
            values.append(profile.passage_surprisals[index])
    return fmean(values) if values else None


def run_pipeline(
    config: PipelineConfig,
    documents: Sequence[Document],
    reference_documents: Sequence[Document],
    eval_entries: Sequence[evalkit.EvalEntry] | None = None,
    backend=None,
    out_dir: str | Path | None = None,
) -> dict:
    """Run detect -> verify -> (train) -> evaluate and return the run report."""
    backend = backend or make_backend(config)
    _require_capabilities(backend, config)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    report: dict = {"config": config.to_dict(), "incomplete": None, "timing": {}}
    if not documents:
        logger.warning("empty document corpus; nothing to do")
        report["warning"] = "empty document corpus"
        report["stage1"] = report["stage2"] = report["stage3"] = report["eval"] = None
        if out_path is not None:
            write_report(out_path / "report.json", report)
        return report

    store = GroundingStore(out_path / "groundings.jsonl") if out_path is not None else None

    def timed(stage_name, fn):
        started = time.perf_counter()
        try:
            result = fn()
        except CapabilityError:
            raise
        except Exception as exc:
            report["incomplete"] = {"stage": stage_name, "error": str(exc)}
            if out_path is not None:
                write_report(out_path / "report.json", report)
            raise StageError(f"{stage_name} failed: {exc}") from exc
        report["timing"][stage_name] = time.perf_counter() - started
        return result

    stats, profiles, groundings, stage1 = timed(
        "stage1", lambda: run_stage1(backend, config, documents, reference_documents, store)
    )
    report["stage1"] = stage1
    if out_path is not None:
        textstat.write_profiles_jsonl(
            out_path / "profiles.jsonl", [profiles[d.doc_id] for d in documents]
        )

    outcomes, corpus, stage2 = timed(
        "stage2", lambda: run_stage2(backend, config, groundings, out_path, stats)
    )
    report["stage2"] = stage2

    eval_before = None
    if eval_entries:
        eval_before = timed("eval_before", lambda: evaluate_backend(backend, config, eval_entries))
    mean_before = timed(
        "score_before", lambda: _flagged_mean(backend, config, documents, groundings)
    )

    stage3 = None
    eval_after = None
    self_extinguish = None
    if config.train_enabled:
        if corpus:
            stage3 = timed("stage3", lambda: run_stage3(backend, config, corpus))
            if out_path is not None:
                backend.save_checkpoint(out_path / "model.ckpt")
            if eval_entries:
                eval_after = timed(
                    "eval_after", lambda: evaluate_backend(backend, config, eval_entries)
                )
            mean_after = timed(
                "score_after", lambda: _flagged_mean(backend, config, documents, groundings)
            )
            if mean_before is not None and mean_after is not None:
                threshold = stats.threshold()
                if mean_before > threshold:
                    self_extinguish = {
                        "mean_before": mean_before,
                        "mean_after": mean_after,
                        "threshold": threshold,
                        "fraction": evalkit.self_extinguish_fraction(
                            mean_before, mean_after, threshold
                        ),
                    }
                else:
                    self_extinguish = {
                        "mean_before": mean_before,
                        "mean_after": mean_after,
                        "threshold": threshold,
                        "fraction": None,
                        "note": "flagged passages were not above threshold at training time",
                    }
        else:
            logger.warning("training corpus is empty; skipping stage 3")
            stage3 = {"skipped": "empty corpus", "backend_instance": backend.descriptor.instance_id}
    report["stage3"] = stage3
    report["eval"] = {
        "before": eval_before,
        "after": eval_after,
        "flagged_mean_surprisal_before": mean_before,
        "self_extinguish": self_extinguish,
    }
    report["counts"] = {
        "flagged": stage1["n_flagged"],
        "grounded": stage1["n_grounded"],
        "stage2_inputs": len(stage2["chains"]) + len(stage2["skipped"]),
        "corpus_items": stage2["corpus_counts"]["total"],
        "trained_items": len(corpus) if (config.train_enabled and corpus) else 0,
    }

    if out_path is not None:
        write_report(out_path / "report.json", report)
    return report


def run_normal_baseline(
    config: PipelineConfig,
    groundings: dict,
    backend,
    epochs: int | None = None,
) -> dict:
    """Memorization control arm: standard SFT on the flagged passages' raw text.

    Same optimizer loop, fixed beta2 = 0.999 (gate closed: r = 1, k = 0).
    """
    if not backend.supports(CAP_TRAIN):
        raise CapabilityError("normal baseline needs a trainable backend")
    items = [
        TrainItem(
            kind=verifier.KIND_SOURCE_WINDOW,
            text=verifier.source_window_text(grounding),
            conviction_k=0,
            passage_ref=ref,
            importance=grounding.surprisal,
        )
        for ref, grounding in sorted(groundings.items())
    ]
    schedule = gatedopt.GateSchedule(r=1.0, beta2_floor=config.beta2_floor)
    report = gatedopt.train_corpus(
        backend,
        items,
        schedule,
        epochs=epochs if epochs is not None else config.epochs,
        lr=config.lr,
        weight_decay=config.weight_decay,
        seed=config.seed,
    )
    report["backend_instance"] = backend.descriptor.instance_id
    report["condition"] = "normal"
    return report


def run_r_sweep(
    config: PipelineConfig,
    documents: Sequence[Document],
    reference_documents: Sequence[Document],
    r_values: Sequence[float],
    eval_entries: Sequence[evalkit.EvalEntry] | None = None,
    backend=None,
) -> list[dict]:
    """Sweep the gate decay r. Chains are generated once and cached per
    passage; consistency checking, training (from a snapshot of the base
    weights), and evaluation rerun per r value."""
    backend = backend or make_backend(config)
    _require_capabilities(backend, config)
    if not backend.supports(CAP_TRAIN):
        raise CapabilityError("r sweep trains the backend; toy backend required")

    stats, profiles, groundings, stage1 = run_stage1(
        backend, config, documents, reference_documents, store=None
    )
    templates, chains, skipped = generate_chains(backend, config, groundings)
    base_params = {name: arr.copy() for name, arr in backend.params.items()}

    reports = []
    for r in r_values:
        for name, arr in base_params.items():
            backend.params[name][...] = arr
        run_config = PipelineConfig(**{**_config_kwargs(config), "r": r})
        outcomes = check_chains(backend, run_config, templates, chains)
        corpus, discarded = assemble_corpus(run_config, outcomes, groundings, stats)
        report = {
            "r": r,
            "stage1": stage1,
            "corpus_items": len(corpus),
            "discarded_marginal": discarded,
            "skipped": skipped,
        }
        if corpus:
            report["stage3"] = run_stage3(backend, run_config, corpus)
            if eval_entries:
                report["eval"] = evaluate_backend(backend, run_config, eval_entries)
        reports.append(report)
    for name, arr in base_params.items():
        backend.params[name][...] = arr
    return reports


def _config_kwargs(config: PipelineConfig) -> dict:
    payload = config.to_dict()
    payload["lam"] = payload.pop("lambda")
    return payload


def write_report(path, report: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")


def report_without_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}
