"""End-to-end pipeline with memoized stages, plus the ablation grid runner."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import Corpus, DenseRetriever, HashingEmbedder, PrecomputedEmbedder, RetrievalResult, ingest_corpus, read_jsonl
from .dataset import DatasetManifest, make_synthetic, synthetic_knowledge
from .estimator import RADClassifier
from .interpret import DEFAULT_PERCENTILE, DEFAULT_THETA_MULT, dump_traces, emit_overlays, load_boxes
from .metrics import evaluate
from .refinement import (
    ConfigurationError,
    EchoClient,
    GuidelineStore,
    HTTPClient,
    RefinementRequest,
    ResponseCache,
    TranscriptClient,
    load_template,
    refine_many,
    verify,
)
from .trainer import RunRecord, TrainConfig, ablation_config, config_hash, train

logger = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "retrieve", "refine", "verify", "train", "eval", "interpret", "plot")

DEFAULTS: dict = {
    "seed": 0,
    "paths": {"out": "runs/rad", "corpus": "", "dataset": "", "guideline_store": "", "indicators": "",
              "embeddings": "", "boxes": ""},
    "synth": {"m": 8, "n": 512, "strength": 0.9, "prevalence": 0.25, "image_size": 28, "ratio": 0.8},
    "retrieve": {"top_k": 10, "dim": 256, "metric": "ip"},
    "refine": {"client": "echo", "echo_mode": "passages", "transcript": "", "template": "", "target_length": 2000,
               "max_workers": 4},
    "train": {},
    "eval": {"threshold": 0.5, "split": "test"},
    "interpret": {"theta_mult": DEFAULT_THETA_MULT, "percentile": DEFAULT_PERCENTILE, "branch": "guide",
                  "max_samples": 16},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Read a TOML or JSON pipeline config and fill defaults."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        raw = path.read_bytes()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    config = _merge(DEFAULTS, data)
    if overrides:
        config = _merge(config, overrides)
    unknown = set(config) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    config["train"] = {**config["train"], "seed": config["seed"]}
    TrainConfig.from_dict(config["train"])  # validate early
    return config


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in paths:
        h.update(str(p.relative_to(path) if path.is_dir() else p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    artifacts: dict[str, list[str]] = field(default_factory=dict)
    report: dict | None = None
    summary: dict | None = None


class Pipeline:
    """Stages run in order; a stage is skipped when its memo key and outputs are unchanged.

    The memo key of a stage hashes its name, its config subtree, the seed
    and the hashes of any external input files.  Once a stage runs, every
    later stage runs as well.
    """

    def __init__(self, config: dict):
        self.config = config
        self.seed = int(config["seed"])
        paths = config["paths"]
        self.out = Path(paths["out"])
        self.data_dir = Path(paths["dataset"]) if paths["dataset"] else self.out / "data"
        self.store_dir = Path(paths["guideline_store"]) if paths["guideline_store"] else self.out / "guidelines"
        # locations do not change results, so they stay out of the hash
        self.config_hash = config_hash({k: v for k, v in config.items() if k != "paths"})
        self.stamp = {"config_hash": self.config_hash, "seed": self.seed}

    # -- memoization -----------------------------------------------------
    def _external(self, stage: str) -> list[Path]:
        p = self.config["paths"]
        inputs = {
            "synth": [p["dataset"]] if p["dataset"] else [],
            "ingest": [p["corpus"]] if p["corpus"] else [],
            "retrieve": [p["embeddings"]] if p["embeddings"] else [],
            "refine": [x for x in (self.config["refine"]["transcript"], self.config["refine"]["template"]) if x],
            "verify": [p["indicators"]] if p["indicators"] else [],
            "interpret": [p["boxes"]] if p["boxes"] else [],
        }.get(stage, [])
        return [Path(x) for x in inputs]

    def _subtree(self, stage: str) -> dict:
        section = {"synth": "synth", "retrieve": "retrieve", "refine": "refine", "train": "train",
                   "eval": "eval", "interpret": "interpret"}.get(stage)
        return self.config.get(section, {}) if section else {}

    def stage_key(self, stage: str) -> str:
        for path in self._external(stage):
            if not path.exists():
                raise ConfigurationError(f"{stage}: input {path} does not exist")
        payload = {"stage": stage, "config": self._subtree(stage), "seed": self.seed,
                   "inputs": [file_hash(p) for p in self._external(stage)]}
        return config_hash(payload)

    def _marker(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.json"

    def is_cached(self, stage: str, key: str) -> bool:
        marker = self._marker(stage)
        if not marker.exists():
            return False
        info = json.loads(marker.read_text(encoding="utf-8"))
        return (info.get("status") == "done" and info.get("key") == key
                and all(Path(o).exists() for o in info.get("outputs", [])))

    def _write_marker(self, stage: str, **info) -> None:
        marker = self._marker(stage)
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(json.dumps({"stage": stage, **self.stamp, **info}, indent=1, sort_keys=True),
                          encoding="utf-8")

    # -- run -------------------------------------------------------------
    def validate_paths(self) -> None:
        for stage in STAGES:
            for path in self._external(stage):
                if not path.exists():
                    raise ConfigurationError(f"{stage}: input {path} does not exist")

    def run(self, stages=STAGES, force: bool = False) -> PipelineResult:
        self.validate_paths()
        result = PipelineResult()
        dirty = force
        for stage in stages:
            key = self.stage_key(stage)
            if not dirty and self.is_cached(stage, key):
                result.skipped.append(stage)
                logger.info("stage %s: cache hit", stage)
                continue
            dirty = True
            self._write_marker(stage, status="running", key=key)
            try:
                outputs = getattr(self, f"stage_{stage}")()
            except Exception as exc:
                self._write_marker(stage, status="failed", key=key, error=f"{type(exc).__name__}: {exc}")
                raise StageFailed(stage, exc) from exc
            self._write_marker(stage, status="done", key=key, outputs=[str(o) for o in outputs])
            result.ran.append(stage)
            result.artifacts[stage] = [str(o) for o in outputs]
        report = self.out / "eval" / "report.json"
        if report.exists():
            result.report = json.loads(report.read_text(encoding="utf-8"))
        summary = self.out / "interpret" / "summary.json"
        if summary.exists():
            result.summary = json.loads(summary.read_text(encoding="utf-8"))
        return result

    # -- helpers -----------------------------------------------------------
    def manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.data_dir)

    def _indicators(self, manifest: DatasetManifest) -> dict[str, list[str]]:
        path = self.config["paths"]["indicators"]
        if path:
            return json.loads(Path(path).read_text(encoding="utf-8"))
        if manifest.meta.get("generator") != "synthetic":
            raise ConfigurationError("paths.indicators is required for non-synthetic data")
        return synthetic_knowledge(manifest)[2]

    def _client(self):
        cfg = self.config["refine"]
        if cfg["client"] == "echo":
            return EchoClient(cfg["echo_mode"])
        if cfg["client"] == "transcript":
            return TranscriptClient.from_jsonl(cfg["transcript"])
        if cfg["client"] == "http":
            return HTTPClient()
        raise ConfigurationError(f"unknown refine client {cfg['client']!r}")

    def _write_json(self, path: Path, data) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
        return path

    # -- stages ------------------------------------------------------------
    def stage_synth(self) -> list[Path]:
        if self.config["paths"]["dataset"]:
            self.manifest()  # validate
            return [self.data_dir / "manifest.json"]
        manifest = make_synthetic(seed=self.seed, **self.config["synth"])
        manifest.meta.update(self.stamp)
        return [manifest.save(self.data_dir)]

    def stage_ingest(self) -> list[Path]:
        path = self.config["paths"]["corpus"]
        records = read_jsonl(path) if path else synthetic_knowledge(self.manifest())[0]
        corpus = ingest_corpus(records)
        out = self.out / "corpus"
        docs = corpus.save(out / "docs.jsonl")
        rejected = self._write_json(out / "rejected.json", [{"index": i, "reason": r} for i, r in corpus.rejected])
        return [docs, rejected]

    def stage_retrieve(self) -> list[Path]:
        cfg = self.config["retrieve"]
        corpus = Corpus.load(self.out / "corpus" / "docs.jsonl")
        emb_path = self.config["paths"]["embeddings"]
        embedder = PrecomputedEmbedder.from_jsonl(emb_path) if emb_path else HashingEmbedder(cfg["dim"])
        retriever = DenseRetriever(embedder, metric=cfg["metric"]).fit(corpus)
        outputs = []
        for did, name in self.manifest().diseases:
            res = retriever.retrieve(name, cfg["top_k"], disease_id=did)
            outputs.append(self._write_json(self.out / "retrieval" / f"{did}.json", {**res.to_dict(), **self.stamp}))
        return outputs

    def stage_refine(self) -> list[Path]:
        cfg = self.config["refine"]
        corpus = Corpus.load(self.out / "corpus" / "docs.jsonl")
        template_kw = {"template": load_template(cfg["template"])} if cfg["template"] else {}
        requests = []
        for did, name in self.manifest().diseases:
            res = RetrievalResult.from_dict(json.loads((self.out / "retrieval" / f"{did}.json").read_text("utf-8")))
            docs = [corpus.get(i) for i, _ in res.hits]
            requests.append(RefinementRequest(did, name, docs, target_length=cfg["target_length"], **template_kw))
        cache = ResponseCache(self.out / "cache" / "llm")
        store = GuidelineStore(self.store_dir)
        return [store.save(g) for g in refine_many(requests, self._client(), cache, max_workers=cfg["max_workers"])]

    def stage_verify(self) -> list[Path]:
        manifest = self.manifest()
        indicators = self._indicators(manifest)
        store = GuidelineStore(self.store_dir)
        outputs = []
        for did, name in manifest.diseases:
            if did not in indicators:
                raise ConfigurationError(f"no indicator list for disease {did!r} ({name})")
            outputs.append(store.save(verify(store.load(did), indicators[did])))
        return outputs

    def stage_train(self) -> list[Path]:
        cfg = TrainConfig.from_dict(self.config["train"])
        res = train(self.manifest(), GuidelineStore(self.store_dir), cfg, self.out / "train")
        return [res.checkpoint, self.out / "train" / "run.jsonl"]

    def stage_eval(self) -> list[Path]:
        cfg = self.config["eval"]
        est = RADClassifier.load(self.out / "train" / "model.pt")
        manifest = self.manifest()
        samples = manifest.subset(cfg["split"])
        report = evaluate(est.predict_proba(samples), manifest.labels(samples), cfg["threshold"],
                          manifest.disease_ids)
        report.meta.update({**self.stamp, "split": cfg["split"], "split_hash": manifest.split_hash()})
        return [self._write_json(self.out / "eval" / "report.json", report.to_dict())]

    def stage_interpret(self) -> list[Path]:
        cfg = self.config["interpret"]
        est = RADClassifier.load(self.out / "train" / "model.pt")
        manifest = self.manifest()
        samples = manifest.subset(self.config["eval"]["split"])[: cfg["max_samples"]]
        attentions = est.explain(samples, branch=cfg["branch"])
        boxes = load_boxes(self.config["paths"]["boxes"]) if self.config["paths"]["boxes"] else None
        out = self.out / "interpret"
        emit_overlays(samples, attentions, est.guidelines_, out, cfg["theta_mult"], cfg["percentile"],
                      meta=self.stamp, boxes=boxes)
        dump_traces(attentions, manifest.disease_ids, out / "traces.jsonl")
        return [out / "summary.json", out / "traces.jsonl"]

    def stage_plot(self) -> list[Path]:
        record = RunRecord.read_jsonl(self.out / "train" / "run.jsonl")
        path = self.out / "plots" / "loss.png"
        plot_losses(record, path)
        return [path]


def plot_losses(record: RunRecord, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    for key in ("total", "bce_guide", "bce_label", "gecl"):
        vals = [s[key] for s in record.steps if s.get(key) is not None]
        if vals:
            ax.plot(vals, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def run_pipeline(config: dict, stages=STAGES, force: bool = False) -> PipelineResult:
    return Pipeline(config).run(stages, force)


# -- ablation grid -----------------------------------------------------------

FLAG_AXES = ("gecl_vision", "gecl_text", "dual_decoder")
SWEEP_AXES = {"alpha": (1e-3, 1e-2, 1e-1), "beta": (1e-2, 1e-1, 1.0), "top_k": (1, 5, 10)}
# the component-ablation rows: none, each branch alone, both GECL branches, decoder alone, everything
TABLE_ROWS = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 1, 1))


def flag_grid(axes) -> list[dict]:
    """Flag settings for the swept subset of {gecl_vision, gecl_text, dual_decoder}.

    Sweeping all three gives the six component-ablation rows; a subset is
    the full product over that subset with other flags on.
    """
    swept = [a for a in FLAG_AXES if a in axes]
    if not swept:
        return []
    if len(swept) == 3:
        return [dict(zip(FLAG_AXES, map(bool, row))) for row in TABLE_ROWS]
    rows = []
    for values in itertools.product((False, True), repeat=len(swept)):
        row = {a: True for a in FLAG_AXES}
        row.update(zip(swept, values))
        rows.append(row)
    return rows


def ablation_configs(base: TrainConfig, axes, sweeps: dict | None = None) -> list[tuple[str, dict]]:
    axes = list(axes)
    if not axes:
        raise ConfigurationError("ablation grid needs at least one axis")
    bad = set(axes) - set(FLAG_AXES) - set(SWEEP_AXES)
    if bad:
        raise ConfigurationError(f"unknown ablation axes: {sorted(bad)}")
    sweeps = {**SWEEP_AXES, **(sweeps or {})}
    runs = []
    for flags in flag_grid(axes):
        name = "".join("1" if flags[a] else "0" for a in FLAG_AXES)
        runs.append((f"flags={name}", {"kind": "flags", **flags}))
    for axis in (a for a in SWEEP_AXES if a in axes):
        for value in sweeps[axis]:
            runs.append((f"{axis}={value}", {"kind": axis, axis: value}))
    return runs


def run_ablation_grid(config: dict, axes, out_dir: str | Path | None = None, seeds=None,
                      sweeps: dict | None = None, progress: Callable[[str], None] | None = None) -> dict:
    """Train every grid configuration on shared synthetic splits; returns and writes the table."""
    base = TrainConfig.from_dict(config["train"])
    runs = ablation_configs(base, axes, sweeps)
    seeds = list(seeds) if seeds is not None else [int(config["seed"])]
    out = Path(out_dir) if out_dir is not None else Path(config["paths"]["out"]) / "ablation"
    manifests = {s: make_synthetic(seed=s, **config["synth"]) for s in seeds}
    knowledge = {s: synthetic_knowledge(manifests[s]) for s in seeds}
    rows = []
    for name, spec in runs:
        cfg = base
        if spec["kind"] == "flags":
            cfg = ablation_config(base, spec["gecl_vision"], spec["gecl_text"], spec["dual_decoder"])
        else:
            cfg = TrainConfig.from_dict({**base.to_dict(), spec["kind"]: spec[spec["kind"]]})
        reports, split_hashes = [], []
        for s in seeds:
            manifest = manifests[s]
            guidelines = _reference_guidelines(manifest, knowledge[s], cfg.top_k)
            seeded = TrainConfig.from_dict({**cfg.to_dict(), "seed": s})
            res = train(manifest, guidelines, seeded, eval_each_epoch=False)
            test = manifest.subset("test")
            reports.append(evaluate(res.estimator.predict_proba(test), manifest.labels(test), cfg.threshold))
            split_hashes.append(manifest.split_hash())
        macro = {k: float(np.mean([r.macro[k] for r in reports])) for k in reports[0].macro}
        macro["acc_s"] = float(np.mean([r.acc_s for r in reports]))
        macro["avg"] = float(np.mean([r.average for r in reports]))
        rows.append({"name": name, **{k: v for k, v in spec.items() if k != "kind"}, "kind": spec["kind"],
                     "metrics": macro, "split_hashes": split_hashes, "config_hash": seeded.hash()})
        if progress:
            progress(f"{name}: f1={macro['f1']:.4f}")
    table = {"axes": list(axes), "seeds": seeds, "rows": rows,
             "config_hash": config_hash({k: v for k, v in config.items() if k != "paths"})}
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.json").write_text(json.dumps(table, indent=1, sort_keys=True), encoding="utf-8")
    (out / "table.md").write_text(format_table(rows), encoding="utf-8")
    for axis in (a for a in SWEEP_AXES if a in axes):
        plot_trend(rows, axis, out / f"trend_{axis}.png")
    return table


def _reference_guidelines(manifest: DatasetManifest, knowledge, top_k: int):
    """Verified synthetic guidelines; ``top_k`` truncates the retrieved evidence they are built from."""
    from .refinement import DiseaseGuideline

    records, texts, indicators = knowledge
    if top_k >= 10:
        return [DiseaseGuideline(d, n, texts[d], indicators[d], verified=True) for d, n in manifest.diseases]
    corpus = ingest_corpus(records)
    retriever = DenseRetriever().fit(corpus)
    out = []
    for d, n in manifest.diseases:
        hits = retriever.retrieve(n, top_k, disease_id=d).hits
        text = " ".join(corpus.get(i).text for i, _ in hits)
        out.append(DiseaseGuideline(d, n, text, indicators[d], [i for i, _ in hits], verified=True))
    return out


def format_table(rows: list[dict]) -> str:
    cols = ("f1", "precision", "recall", "auc", "map", "acc", "acc_s", "avg")
    lines = ["| run | GECL-vision | GECL-text | decoder | " + " | ".join(c.upper() for c in cols) + " |",
             "|" + "---|" * (4 + len(cols))]
    mark = {True: "yes", False: "no", None: ""}
    for r in rows:
        flags = [mark[r.get(a)] for a in FLAG_AXES]
        vals = " | ".join(f"{100 * r['metrics'][c]:.2f}" for c in cols)
        lines.append(f"| {r['name']} | " + " | ".join(flags) + f" | {vals} |")
    return "\n".join(lines) + "\n"


def plot_trend(rows: list[dict], axis: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [(r[axis], r["metrics"]) for r in rows if r["kind"] == axis]
    fig, ax = plt.subplots(figsize=(4, 3))
    for key in ("f1", "auc", "avg"):
        ax.plot(range(len(pts)), [100 * m[key] for _, m in pts], marker="o", label=key.upper())
    ax.set_xticks(range(len(pts)))
    ax.set_xticklabels([str(v) for v, _ in pts])
    ax.set_xlabel(axis)
    ax.set_ylabel("score (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
