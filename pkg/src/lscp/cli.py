"""Command-line interface.

Subcommands: calibrate (fit reference stats), detect, verify, train, eval,
run (full pipeline), report (render a saved run report as tables). Config
comes from a TOML file with flag overrides; --seed is mandatory for train.

Exit codes: 0 success, 1 config error, 2 stage failure, 3 backend capability
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalkit, gatedopt, pipeline, verifier
from .config import PipelineConfig, load_config
from .errors import CapabilityError, ConfigError, LscpError, StageError
from .grounding import GroundingStore
from .textstat import ReferenceStats, fit_reference, flag_passages

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STAGE = 2
EXIT_CAPABILITY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; config errors are 1
        raise ConfigError(message)


def _add_config_args(parser, seed_required: bool = False):
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="flagging threshold multiplier")
    parser.add_argument("--r", type=float, default=None, help="gate decay factor")
    parser.add_argument("--seed", type=int, default=None, required=seed_required,
                        help="RNG seed (mandatory for train)")
    parser.add_argument("--window-w", dest="window_w", type=int, default=None)
    parser.add_argument("--c", type=float, default=None, help="chain length scaling constant")
    parser.add_argument("--n-min", dest="n_min", type=int, default=None)
    parser.add_argument("--n-max", dest="n_max", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--accept-policy", dest="accept_policy",
                        choices=("graduated", "threshold"), default=None)
    parser.add_argument("--no-source-windows", dest="include_source_windows",
                        action="store_false", default=None)
    parser.add_argument("--no-train", dest="train_enabled", action="store_false", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--backend-kind", dest="backend_kind",
                        choices=("toy", "scripted", "remote"), default=None)
    parser.add_argument("--backend-script", dest="backend_script", default=None)
    parser.add_argument("--backend-checkpoint", dest="backend_checkpoint", default=None)
    parser.add_argument("--remote-url", dest="remote_url", default=None)
    parser.add_argument("--remote-model", dest="remote_model", default=None)


_OVERRIDE_KEYS = (
    "lam", "r", "seed", "window_w", "c", "n_min", "n_max", "epochs", "lr",
    "accept_policy", "include_source_windows", "train_enabled", "workers",
    "backend_kind", "backend_script", "backend_checkpoint", "remote_url", "remote_model",
)


def _config_from_args(args) -> PipelineConfig:
    overrides = {key: getattr(args, key) for key in _OVERRIDE_KEYS if hasattr(args, key)}
    return load_config(args.config, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="lscp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit reference surprisal statistics")
    _add_config_args(p)
    p.add_argument("--reference", type=Path, required=True, help="reference corpus JSONL")
    p.add_argument("--out", type=Path, required=True, help="stats JSON output")

    p = sub.add_parser("detect", help="flag surprising passages and ground them")
    _add_config_args(p)
    p.add_argument("--corpus", type=Path, required=True, help="documents JSONL")
    p.add_argument("--reference", type=Path, default=None, help="reference corpus JSONL")
    p.add_argument("--stats", type=Path, default=None, help="previously fitted stats JSON")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("verify", help="run Q&A chains over detected groundings")
    _add_config_args(p)
    p.add_argument("--groundings", type=Path, required=True, help="grounding store JSONL from detect")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="consolidate a verified corpus into toy weights")
    _add_config_args(p, seed_required=True)
    p.add_argument("--corpus", type=Path, required=True, help="training corpus JSONL from verify")
    p.add_argument("--checkpoint-out", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="training report JSON")
    p.add_argument("--allow-empty", action="store_true")

    p = sub.add_parser("eval", help="run the evaluation kit against a backend")
    _add_config_args(p)
    p.add_argument("--eval-corpus", type=Path, required=True, help="evaluation JSONL")
    p.add_argument("--out", type=Path, required=True, help="metrics JSON output")

    p = sub.add_parser("run", help="full pipeline: detect, verify, train, evaluate")
    _add_config_args(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--eval-corpus", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("report", help="render a saved run report as tables")
    p.add_argument("--report", type=Path, required=True)
    return parser


def cmd_calibrate(args) -> int:
    config = _config_from_args(args)
    backend = pipeline.make_backend(config)
    reference = pipeline.load_documents_jsonl(args.reference)
    profiles = [
        pipeline._profile_document(backend, doc, config.window_w)[0] for doc in reference
    ]
    stats = fit_reference(profiles, config.lam)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(stats.to_json(), indent=1, sort_keys=True) + "\n")
    print(f"fitted reference over {stats.n_samples} passages: "
          f"mu={stats.mu:.4f} sigma={stats.sigma:.4f} threshold={stats.threshold():.4f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    config = _config_from_args(args)
    if args.stats is None and args.reference is None:
        raise ConfigError("detect needs --stats or --reference")
    backend = pipeline.make_backend(config)
    documents = pipeline.load_documents_jsonl(args.corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.stats is not None:
        stats = ReferenceStats.from_json(json.loads(args.stats.read_text()))
        if args.lam is not None:
            stats = ReferenceStats(mu=stats.mu, sigma=stats.sigma, lam=args.lam,
                                   n_samples=stats.n_samples)
        reference_documents = None
    else:
        reference_documents = pipeline.load_documents_jsonl(args.reference)
        stats = None

    store = GroundingStore(args.out / "groundings.jsonl")
    if stats is None:
        stats, _profiles, groundings, section = pipeline.run_stage1(
            backend, config, documents, reference_documents, store
        )
    else:
        # Pre-fitted stats: flag against them without refitting.
        groundings = {}
        flag_summary = []
        for document in documents:
            profile, tokens = pipeline._profile_document(backend, document, config.window_w)
            flags = flag_passages(profile, stats)
            flag_summary.append({
                "doc_id": document.doc_id,
                "passages": [[f.passage_index, f.surprisal, f.flagged] for f in flags],
            })
            bounds = profile.passage_bounds()
            for f in flags:
                if not f.flagged:
                    continue
                start, end = bounds[f.passage_index]
                grounding = pipeline.build_grounding(
                    document.doc_id, f.passage_index, tokens[start:end],
                    profile.token_surprisals[start:end], metadata=document.metadata,
                    source_window_tokens=config.source_window_tokens,
                )
                groundings[grounding.passage_ref] = grounding
                store.add(grounding, embedding=pipeline._embed_passage(backend, grounding.passage_text))
        section = {
            "backend_instance": backend.descriptor.instance_id,
            "reference": stats.to_json(),
            "threshold": stats.threshold(),
            "n_documents": len(documents),
            "n_flagged": len(groundings),
            "n_grounded": len(groundings),
            "flags": flag_summary,
        }
    pipeline.write_report(args.out / "detect_report.json", section)
    print(f"flagged {section['n_flagged']} passages at threshold {section['threshold']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    config = _config_from_args(args)
    if not args.groundings.exists():
        raise StageError("verify refuses to run: no grounding store (run detect first)")
    store = GroundingStore(args.groundings)
    if len(store) == 0:
        raise StageError("verify refuses to run: grounding store has no flagged passages")
    backend = pipeline.make_backend(config)
    groundings = {record.grounding.passage_ref: record.grounding for record in store.records()}
    args.out.mkdir(parents=True, exist_ok=True)
    outcomes, corpus, section = pipeline.run_stage2(backend, config, groundings, args.out)
    with open(args.out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for item in corpus:
            fh.write(json.dumps(item.to_dict(), sort_keys=True) + "\n")
    pipeline.write_report(args.out / "verify_report.json", section)
    print(f"verified {len(outcomes)} chains -> {len(corpus)} training items "
          f"({section['corpus_counts']})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config_from_args(args)
    items = []
    with open(args.corpus, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                items.append(verifier.TrainItem.from_dict(json.loads(line)))
    if not items and not args.allow_empty:
        raise StageError("train refuses an empty corpus (pass --allow-empty to override)")
    # A configured-but-absent checkpoint means this run creates it: start fresh.
    fresh = bool(
        config.backend_kind == "toy"
        and config.backend_checkpoint
        and not Path(config.backend_checkpoint).exists()
    )
    backend = pipeline.make_backend(config, fresh_toy=fresh)
    if not backend.supports("train"):
        raise CapabilityError(f"{config.backend_kind} backend cannot train")
    if items:
        schedule = gatedopt.GateSchedule(r=config.r, beta2_floor=config.beta2_floor)
        report = gatedopt.train_corpus(
            backend, items, schedule, epochs=config.epochs, lr=config.lr,
            weight_decay=config.weight_decay, seed=config.seed,
        )
    else:
        report = {"epochs": 0, "steps": 0, "per_item": [], "final_losses": [],
                  "diverged": False, "note": "empty corpus"}
    backend.save_checkpoint(args.checkpoint_out)
    pipeline.write_report(args.out, report)
    print(f"trained {len(items)} items for {report['steps']} steps "
          f"(diverged={report['diverged']})")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    backend = pipeline.make_backend(config)
    entries = evalkit.load_eval_corpus(args.eval_corpus)
    section = pipeline.evaluate_backend(backend, config, entries)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_report(args.out, section)
    print(json.dumps(section.get("ppl", {}), sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    config = _config_from_args(args)
    documents = pipeline.load_documents_jsonl(args.corpus)
    reference = pipeline.load_documents_jsonl(args.reference)
    eval_entries = (
        evalkit.load_eval_corpus(args.eval_corpus) if args.eval_corpus else None
    )
    report = pipeline.run_pipeline(
        config, documents, reference, eval_entries, out_dir=args.out
    )
    if report.get("warning"):
        print(f"warning: {report['warning']}")
    else:
        counts = report["counts"]
        print(f"run complete: {counts['flagged']} flagged -> "
              f"{counts['corpus_items']} items -> trained {counts['trained_items']}")
    print(f"report written to {args.out / 'report.json'}")
    return EXIT_OK


def _format_table(title: str, headers: list[str], rows: list[list]) -> str:
    widths = [len(h) for h in headers]
    rendered = [[str(cell) for cell in row] for row in rows]
    for row in rendered:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rendered:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def render_report(report: dict) -> str:
    blocks = []
    eval_section = report.get("eval") or {}
    before = eval_section.get("before") or {}
    after = eval_section.get("after") or {}

    categories = sorted(set((before.get("ppl") or {})) | set((after.get("ppl") or {})))
    if categories:
        rows = [
            [cat, _fmt((before.get("ppl") or {}).get(cat)), _fmt((after.get("ppl") or {}).get(cat))]
            for cat in categories
        ]
        blocks.append(_format_table("Perplexity by category", ["category", "before", "after"], rows))

    gap_before = (before.get("perturbation") or {}).get("mean_gap")
    gap_after = (after.get("perturbation") or {}).get("mean_gap")
    if gap_before is not None or gap_after is not None:
        blocks.append(_format_table(
            "Perturbation gap (paraphrase PPL / original PPL)",
            ["condition", "mean gap"],
            [["before", _fmt(gap_before)], ["after", _fmt(gap_after)]],
        ))

    fw_before = (before.get("five_way") or {}).get("per_category", {})
    fw_after = (after.get("five_way") or {}).get("per_category", {})
    fw_categories = sorted(set(fw_before) | set(fw_after))
    if fw_categories:
        rows = []
        for cat in fw_categories:
            b = fw_before.get(cat, {})
            a = fw_after.get(cat, {})
            rows.append([cat, _fmt(b.get("accuracy")), _fmt(a.get("accuracy"))])
        blocks.append(_format_table("Five-way QA accuracy", ["category", "before", "after"], rows))

    counts = report.get("counts")
    if counts:
        rows = [[key, counts[key]] for key in sorted(counts)]
        blocks.append(_format_table("Flow counts", ["count", "value"], rows))

    extinguish = eval_section.get("self_extinguish")
    if extinguish:
        rows = [[key, _fmt(extinguish.get(key))]
                for key in ("mean_before", "mean_after", "threshold", "fraction")]
        blocks.append(_format_table("Self-extinguishing", ["metric", "value"], rows))

    if report.get("warning"):
        blocks.append(f"warning: {report['warning']}")
    if report.get("incomplete"):
        blocks.append(f"INCOMPLETE RUN: {report['incomplete']}")
    return "\n\n".join(blocks) if blocks else "(empty report)"


def cmd_report(args) -> int:
    report = json.loads(args.report.read_text(encoding="utf-8"))
    print(render_report(report))
    return EXIT_OK


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "verify": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (StageError, LscpError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # keep raw tracebacks off the console
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
