"""Command line entry point: ``rad <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import DEFAULT_TOP_K, Corpus, DenseRetriever, HashingEmbedder, PrecomputedEmbedder, ingest_corpus, read_jsonl
from .refinement import (
    DEFAULT_TEMPLATE,
    EchoClient,
    GuidelineStore,
    HTTPClient,
    RefinementRequest,
    ResponseCache,
    TranscriptClient,
    load_template,
    refine,
    verify,
)

logger = logging.getLogger("rad")


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")


def _config(args, overrides: dict | None = None) -> dict:
    from .pipeline import load_config

    extra = dict(overrides or {})
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.out:
        extra.setdefault("paths", {})["out"] = args.out
    return load_config(args.config, extra)


# -- commands ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    corpus = ingest_corpus(read_jsonl(args.corpus))
    out = _out(args, "corpus")
    corpus.save(out / "docs.jsonl")
    _write_json(out / "rejected.json", [{"index": i, "reason": r} for i, r in corpus.rejected])
    print(f"ingested {len(corpus)} documents ({len(corpus.rejected)} rejected) -> {out / 'docs.jsonl'}")
    return 0


def cmd_retrieve(args) -> int:
    corpus = Corpus.load(args.docs)
    embedder = PrecomputedEmbedder.from_jsonl(args.embeddings) if args.embeddings else HashingEmbedder(args.dim)
    result = DenseRetriever(embedder, metric=args.metric).fit(corpus).retrieve(
        args.disease, args.k, disease_id=args.disease_id or args.disease)
    out = _out(args, "retrieval.json")
    _write_json(out, result.to_dict())
    for doc_id, score in result.hits:
        print(f"{score:10.4f}  {doc_id}  {corpus.get(doc_id).title}")
    return 0


def _client(name: str, transcript: str | None):
    if name == "echo":
        return EchoClient("passages")
    if name == "transcript":
        if not transcript:
            raise SystemExit("--transcript is required with --client transcript")
        return TranscriptClient.from_jsonl(transcript)
    return HTTPClient()


def cmd_refine(args) -> int:
    from .corpus import RetrievalResult

    corpus = Corpus.load(args.docs)
    result = RetrievalResult.from_dict(json.loads(Path(args.retrieval).read_text(encoding="utf-8")))
    template = load_template(args.template) if args.template else DEFAULT_TEMPLATE
    request = RefinementRequest(args.disease, args.name or args.disease, [corpus.get(i) for i, _ in result.hits],
                                template=template)
    store = GuidelineStore(args.store)
    cache = ResponseCache(Path(args.store) / ".cache")
    path = store.save(refine(request, _client(args.client, args.transcript), cache))
    print(f"wrote unverified guideline {path}")
    return 0


def cmd_verify(args) -> int:
    store = GuidelineStore(args.store)
    raw = Path(args.indicators).read_text(encoding="utf-8")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        data = [line for line in raw.splitlines() if line.strip()]
    indicators = data.get(args.disease, []) if isinstance(data, dict) else data
    path = store.save(verify(store.load(args.disease), indicators))
    print(f"verified {args.disease} with {len(indicators)} indicators -> {path}")
    return 0


def cmd_synth(args) -> int:
    from .dataset import make_synthetic, synthetic_knowledge

    seed = 0 if args.seed is None else args.seed
    manifest = make_synthetic(args.m, args.n, seed=seed, strength=args.strength)
    out = _out(args, "data")
    manifest.save(out)
    if args.knowledge:
        records, _, indicators = synthetic_knowledge(manifest)
        with (out / "corpus.jsonl").open("w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")
        _write_json(out / "indicators.json", indicators)
    print(f"wrote {len(manifest.samples)} samples, {len(manifest.diseases)} diseases -> {out}")
    return 0


def cmd_train(args) -> int:
    from .dataset import DatasetManifest
    from .trainer import TrainConfig, train

    config = _config(args)
    paths = config["paths"]
    data = Path(args.data or paths["dataset"] or Path(paths["out"]) / "data")
    store = GuidelineStore(args.guidelines or paths["guideline_store"] or Path(paths["out"]) / "guidelines")
    out = _out(args, str(Path(paths["out"]) / "train"))
    res = train(DatasetManifest.load(data), store, TrainConfig.from_dict(config["train"]), out)
    last = res.record.epochs[-1] if res.record.epochs else {}
    print(f"checkpoint {res.checkpoint}; last epoch {last}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import DatasetManifest
    from .estimator import RADClassifier
    from .metrics import evaluate

    est = RADClassifier.load(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    samples = manifest.subset(args.split)
    if not samples:
        raise SystemExit(f"split {args.split!r} is empty")
    report = evaluate(est.predict_proba(samples), manifest.labels(samples), args.threshold, manifest.disease_ids)
    extra = getattr(est, "checkpoint_extra_", {})
    report.meta.update({"split": args.split, "split_hash": manifest.split_hash(),
                        "config_hash": extra.get("config_hash"), "seed": extra.get("seed")})
    out = _out(args, "report.json")
    _write_json(out, report.to_dict())
    print(json.dumps(report.macro, indent=1), f"\nACC-S {report.acc_s:.4f} -> {out}")
    return 0


def cmd_interpret(args) -> int:
    from .dataset import DatasetManifest
    from .estimator import RADClassifier
    from .interpret import dump_traces, emit_overlays, load_boxes

    est = RADClassifier.load(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    samples = manifest.subset(args.split)[: args.max_samples]
    attentions = est.explain(samples, branch=args.branch)
    out = _out(args, "interpret")
    boxes = load_boxes(args.boxes) if args.boxes else None
    extra = getattr(est, "checkpoint_extra_", {})
    meta = {k: extra[k] for k in ("config_hash", "seed") if k in extra}
    summary = emit_overlays(samples, attentions, est.guidelines_, out, args.theta_mult, args.percentile,
                            meta=meta, boxes=boxes)
    dump_traces(attentions, manifest.disease_ids, out / "traces.jsonl")
    print(f"recall Avg-D {summary['recall']['avg_d']}, mIoU Avg-D {summary['iou']['avg_d']} -> {out}")
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import STAGES, run_pipeline

    config = _config(args)
    stages = args.stages.split(",") if args.stages else STAGES
    result = run_pipeline(config, stages, force=args.force)
    print(f"ran: {', '.join(result.ran) or '-'}; cached: {', '.join(result.skipped) or '-'}")
    if result.report:
        print(f"test macro-F1 {result.report['macro']['f1']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import run_ablation_grid

    config = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    axes = [a for a in args.axes.split(",") if a]
    table = run_ablation_grid(config, axes, Path(config["paths"]["out"]) / "ablation", seeds, progress=print)
    print(f"{len(table['rows'])} configurations -> {Path(config['paths']['out']) / 'ablation'}")
    return 0


# -- parser ----------------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copy must not overwrite flags given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML or JSON config file", **kw)
    p.add_argument("--seed", type=int, help="master seed", **({"default": None} | kw))
    p.add_argument("--out", help="output file or directory", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="rad", description="Retrieval-augmented multimodal diagnosis toolkit",
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build a deduplicated corpus from JSON lines")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("retrieve", parents=[common], help="top-k documents for a disease name")
    p.add_argument("--disease", required=True, help="disease name used as the query")
    p.add_argument("--disease-id")
    p.add_argument("--k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--docs", default="corpus/docs.jsonl")
    p.add_argument("--embeddings", help="JSON lines of precomputed vectors")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--metric", choices=("ip", "cosine"), default="ip")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("refine", parents=[common], help="summarize retrieved documents into a guideline")
    p.add_argument("--disease", required=True, help="disease id")
    p.add_argument("--name", help="disease name (defaults to the id)")
    p.add_argument("--template", help="prompt template file")
    p.add_argument("--retrieval", default="retrieval.json")
    p.add_argument("--docs", default="corpus/docs.jsonl")
    p.add_argument("--store", default="guidelines")
    p.add_argument("--client", choices=("echo", "transcript", "http"), default="http")
    p.add_argument("--transcript")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("verify", parents=[common], help="attach curated indicators and mark verified")
    p.add_argument("--disease", required=True)
    p.add_argument("--indicators", required=True, help="JSON list, JSON {disease: [...]}, or one phrase per line")
    p.add_argument("--store", default="guidelines")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multimodal dataset")
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--strength", type=float, default=0.9)
    p.add_argument("--knowledge", action="store_true", help="also write a matching corpus and indicator file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train from a config")
    p.add_argument("--data")
    p.add_argument("--guidelines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpret", parents=[common], help="guideline recall, grounding IoU and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--theta-mult", type=float, default=2.0)
    p.add_argument("--percentile", type=float, default=90.0)
    p.add_argument("--branch", choices=("guide", "label"), default="guide")
    p.add_argument("--boxes", help="ground-truth boxes JSON")
    p.add_argument("--max-samples", type=int, default=16)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("pipeline", parents=[common], help="run all stages with memoization")
    p.add_argument("--stages", help="comma-separated subset")
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", parents=[common], help="ablation grid over components and hyperparameters")
    p.add_argument("--axes", default="gecl_text,gecl_vision,dual_decoder")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
