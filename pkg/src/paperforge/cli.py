"""Command-line surface: ingest, extract, train, generate, eval, store.

Every command validates inputs, delegates to its stage module, writes its
outcome as JSON on stdout, and logs to stderr. Partial failures are data
(dropped papers, failure lists), not crashes; exit 3 is reserved for a
backend that is genuinely down or a broken mock script.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import corpus as corpus_mod
from . import inference as inference_mod
from . import metrics as metrics_mod
from . import training as training_mod
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusError
from .extraction import TraceStatus, extract_paper
from .gateway import (
    BackendUnavailable,
    RateLimited,
    SchemaViolation,
    ScriptExhausted,
    UnmatchedRequest,
)
from .sections import GENERATION_TARGETS, SectionKind
from .store import ReflectionReport, ReflectionStore, StoreSet, UnknownId, query_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3

FATAL_BACKEND_ERRORS = (BackendUnavailable, RateLimited, UnmatchedRequest, ScriptExhausted)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# Flag name -> config override key.
_OVERRIDE_KEYS = {
    "mode": "mode",
    "rounds": "extraction.rounds",
    "threshold": "extraction.threshold",
    "top_k": "retrieval.k",
    "runs": "eval.runs",
    "cutoff": "cutoff",
    "seed": "seed",
    "backend": "backend",
    "mock_script": "backend.script",
    "workers": "workers",
}


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--mode", choices=inference_mod.MODES)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--top-k", dest="top_k", type=int)
    parser.add_argument("--runs", type=int)
    parser.add_argument("--cutoff")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", choices=("http", "mock"))
    parser.add_argument("--mock-script", dest="mock_script")
    parser.add_argument("--workers", type=int)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for flag, key in _OVERRIDE_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, indent=2, ensure_ascii=False) + "\n")


def _clock_for(cfg: RunConfig):
    if cfg.backend == "mock":
        return training_mod.fixed_clock()
    return training_mod._utc_now


def _pool_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> int:
    papers = corpus_mod.read_raw_papers(args.corpus)
    entries = []
    dropped = []
    for paper in papers:
        mapping = corpus_mod.map_chapters(paper, require_all=False)
        missing = [k.value for k in SectionKind if k not in mapping]
        entries.append(
            {
                "id": paper.id,
                "found": [k.value for k in mapping],
                "missing": missing,
            }
        )
        if missing:
            dropped.append(paper.id)
    report = {"papers": entries, "dropped": dropped}
    Path(args.out).write_text(
        json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    _emit(
        {
            "command": "ingest",
            "papers": len(papers),
            "ok": len(papers) - len(dropped),
            "dropped": dropped,
            "report": str(args.out),
        }
    )
    return EXIT_OK


def cmd_extract(args: argparse.Namespace, cfg: RunConfig) -> int:
    papers = corpus_mod.read_raw_papers(args.corpus)
    backend = cfg.make_backend()
    extraction_cfg = cfg.extraction_config()

    def work(paper):
        try:
            structured, reason = extract_paper(paper, extraction_cfg, backend)
        except SchemaViolation as exc:
            return paper.id, None, f"schema violation: {exc}"
        return paper.id, structured, reason

    results = _pool_map(work, papers, cfg.workers)
    results.sort(key=lambda item: item[0])
    kept = [structured for _, structured, _ in results if structured is not None]
    dropped = [
        {"id": paper_id, "reason": reason}
        for paper_id, structured, reason in results
        if structured is None
    ]
    corpus_mod.write_structured_papers(kept, args.out)
    _emit(
        {
            "command": "extract",
            "papers": len(papers),
            "extracted": len(kept),
            "dropped": dropped,
            "out": str(args.out),
        }
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    papers = corpus_mod.read_structured_papers(args.dataset)
    train, test = corpus_mod.temporal_split(papers, cfg.cutoff)
    backend = cfg.make_backend()
    store_set = StoreSet(args.store, cfg.make_embedder())
    summary = training_mod.run_training(
        train,
        GENERATION_TARGETS,
        store_set,
        backend,
        runs=cfg.runs,
        clock=_clock_for(cfg),
    )
    store_set.persist()
    payload = {
        "command": "train",
        "train_papers": len(train),
        "test_papers": len(test),
        **summary.to_dict(),
        "store": str(args.store),
    }
    if args.out:
        Path(args.out).write_text(
            json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    _emit(payload)
    return EXIT_OK


def _generation_inputs(args: argparse.Namespace, cfg: RunConfig):
    """Yield (paper_id, topic, context) from a dataset or a topics file."""
    items = []
    if args.topics:
        with open(args.topics, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, 1):
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                context = {
                    kind: record.get(kind.value, "")
                    for kind in SectionKind
                    if record.get(kind.value)
                }
                items.append((str(record["id"]), record["topic"], context))
    else:
        papers = corpus_mod.read_structured_papers(args.corpus)
        _, test = corpus_mod.temporal_split(papers, cfg.cutoff)
        for paper in test:
            context = {kind: paper.section(kind) for kind in SectionKind}
            items.append((paper.id, paper.topic, context))
    return items


def cmd_generate(args: argparse.Namespace, cfg: RunConfig) -> int:
    items = _generation_inputs(args, cfg)
    backend = cfg.make_backend()
    store_set = StoreSet(args.store, cfg.make_embedder()) if args.store else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        paper_id, topic, context = item
        result = inference_mod.run_inference(
            topic,
            context,
            GENERATION_TARGETS,
            store_set,
            backend,
            mode=cfg.mode,
            k=cfg.k,
            token_budget=cfg.token_budget,
        )
        return paper_id, topic, result

    results = _pool_map(work, items, cfg.workers)
    results.sort(key=lambda item: item[0])

    drafts_path = out_dir / "drafts.jsonl"
    with open(drafts_path, "w", encoding="utf-8") as handle:
        for paper_id, topic, result in results:
            for kind in GENERATION_TARGETS:
                draft = result.drafts.get(kind)
                if draft is None:
                    continue
                handle.write(
                    json.dumps(
                        {
                            "paper_id": paper_id,
                            "kind": kind.value,
                            "mode": cfg.mode,
                            "topic": topic,
                            "body": draft.body,
                            "inputs": list(draft.inputs_digest),
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    audit = {
        "mode": cfg.mode,
        "papers": {paper_id: result.audit for paper_id, _, result in results},
    }
    inference_mod.write_audit(audit, out_dir / "audit.json")
    failures = {
        paper_id: {kind.value: msg for kind, msg in result.errors.items()}
        for paper_id, _, result in results
        if result.errors
    }
    _emit(
        {
            "command": "generate",
            "papers": len(items),
            "drafts": sum(len(r.drafts) for _, _, r in results),
            "failures": failures,
            "out": str(drafts_path),
            "audit": str(out_dir / "audit.json"),
        }
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    references = {
        paper.id: paper for paper in corpus_mod.read_structured_papers(args.references)
    }
    drafts = []
    with open(args.drafts, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                drafts.append(json.loads(line))
    backend = cfg.make_backend()
    embedder = cfg.make_embedder()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    details = []
    accumulator: dict[tuple[str, SectionKind], list[dict]] = {}
    for record in drafts:
        kind = SectionKind(record["kind"])
        mode = record.get("mode", cfg.mode)
        reference_paper = references.get(record["paper_id"])
        if reference_paper is None:
            logger.warning("no reference paper for %s; skipping", record["paper_id"])
            continue
        reference = reference_paper.section(kind)
        alignment = metrics_mod.align(
            metrics_mod.decompose(record["body"]),
            metrics_mod.decompose(reference),
            embedder,
            tau=cfg.tau,
        )
        precision = metrics_mod.soft_precision(alignment, mode=cfg.precision_mode)
        recall = metrics_mod.soft_recall(alignment)
        draft = training_mod.SectionDraft(
            kind=kind, topic=record["topic"], body=record["body"], inputs_digest=("topic",)
        )
        evaluation = training_mod.evaluate_section(draft, reference, backend, runs=cfg.runs)
        detail = {
            "paper_id": record["paper_id"],
            "kind": kind.value,
            "mode": mode,
            "soft_precision": precision.value,
            "precision_degenerate": precision.degenerate,
            "soft_recall": recall.value,
            "recall_degenerate": recall.degenerate,
            "dimension_means": evaluation.mean_scores(),
            "run_scores": evaluation.run_scores,
        }
        details.append(detail)
        accumulator.setdefault((mode, kind), []).append(detail)

    scorecards: dict[str, dict[SectionKind, metrics_mod.SectionScorecard]] = {}
    for (mode, kind), rows in sorted(
        accumulator.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        n = len(rows)
        precision = sum(r["soft_precision"] for r in rows) / n
        recall = sum(r["soft_recall"] for r in rows) / n
        dim_means = {
            metric: sum(r["dimension_means"][metric] for r in rows) / n
            for metric in metrics_mod.EVALUATION_METRICS[kind]
        }
        scorecards.setdefault(mode, {})[kind] = metrics_mod.make_scorecard(
            kind, precision, recall, dim_means
        )

    table, data = metrics_mod.build_report(scorecards)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    (out_dir / "report.json").write_text(metrics_mod.report_to_json(data), encoding="utf-8")
    (out_dir / "details.json").write_text(
        json.dumps(details, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    _emit(
        {
            "command": "eval",
            "drafts": len(details),
            "modes": sorted(scorecards),
            "report": data,
            "out": str(out_dir),
        }
    )
    sys.stderr.write(table)
    return EXIT_OK


def cmd_store(args: argparse.Namespace, cfg: RunConfig) -> int:
    root = Path(args.store)
    embedder = cfg.make_embedder()
    if args.action == "ls":
        rows = []
        for kind in SectionKind:
            directory = root / kind.value
            if not (directory / "manifest.json").is_file():
                continue
            store = ReflectionStore.load(directory)
            for rid in store.ids():
                report = store.get(rid)
                rows.append({"id": rid, "kind": kind.value, "topic": report.topic})
        _emit({"command": "store", "action": "ls", "reports": rows})
        return EXIT_OK
    if args.action == "stats":
        store_set = StoreSet(root, embedder)
        _emit({"command": "store", "action": "stats", "counts": store_set.counts()})
        return EXIT_OK
    if args.action == "add":
        if not args.report:
            raise UsageError("store add needs --report")
        record = json.loads(Path(args.report).read_text(encoding="utf-8"))
        report = ReflectionReport.from_dict(record)
        store_set = StoreSet(root, embedder)
        report_id = store_set.add_report(report)
        store_set.persist()
        _emit({"command": "store", "action": "add", "report_id": report_id})
        return EXIT_OK
    if args.action == "rm":
        if not args.id:
            raise UsageError("store rm needs --id")
        for kind in SectionKind:
            directory = root / kind.value
            if not (directory / "manifest.json").is_file():
                continue
            store = ReflectionStore.load(directory)
            try:
                store.remove(args.id)
            except UnknownId:
                continue
            store.persist(directory)
            _emit({"command": "store", "action": "rm", "report_id": args.id})
            return EXIT_OK
        raise UnknownId(args.id)
    raise UsageError(f"unknown store action {args.action!r}")


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="paperforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="validate a raw corpus and map chapters")
    p_ingest.add_argument("--corpus", required=True)
    p_ingest.add_argument("--out", required=True)
    _add_common_flags(p_ingest)

    p_extract = sub.add_parser("extract", help="run the capture/score loop over a corpus")
    p_extract.add_argument("--corpus", required=True)
    p_extract.add_argument("--out", required=True)
    _add_common_flags(p_extract)

    p_train = sub.add_parser("train", help="accumulate reflection reports from the train split")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--store", required=True)
    p_train.add_argument("--out")
    _add_common_flags(p_train)

    p_generate = sub.add_parser("generate", help="generate sections with retrieval guidance")
    p_generate.add_argument("--corpus")
    p_generate.add_argument("--topics")
    p_generate.add_argument("--store")
    p_generate.add_argument("--out", required=True)
    _add_common_flags(p_generate)

    p_eval = sub.add_parser("eval", help="score drafts against references")
    p_eval.add_argument("--drafts", required=True)
    p_eval.add_argument("--references", required=True)
    p_eval.add_argument("--out", required=True)
    _add_common_flags(p_eval)

    p_store = sub.add_parser("store", help="inspect or edit a reflection store")
    p_store.add_argument("action", choices=("ls", "add", "rm", "stats"))
    p_store.add_argument("--store", required=True)
    p_store.add_argument("--report")
    p_store.add_argument("--id")
    _add_common_flags(p_store)

    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "store": cmd_store,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    try:
        cfg = _config_from_args(args)
        random.seed(cfg.seed)
        if getattr(args, "command", None) == "generate" and not (args.corpus or args.topics):
            raise UsageError("generate needs --corpus or --topics")
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except FATAL_BACKEND_ERRORS as exc:
        sys.stderr.write(f"backend error: {exc}\n")
        return EXIT_BACKEND
    except (CorpusError, UnknownId, FileNotFoundError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"input error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
