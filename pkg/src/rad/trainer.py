"""Training runs: configuration, per-step records, checkpoints and ablation routing."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .dataset import DatasetManifest
from .estimator import RADClassifier, TrainingDiverged
from .metrics import evaluate
from .refinement import ConfigurationError, DiseaseGuideline, GuidelineStore

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 1e-2
    beta: float = 1e-1
    ratio: int = 5
    top_k: int = 10
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    gecl_text: bool = True
    gecl_vision: bool = True
    dual_decoder: bool = True
    tau: float = 0.07
    normalize: bool = True
    dim: int = 64
    max_length: int = 128
    text_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    query_mode: str = "prototype"
    query_pool: str = "cls"
    prototype_cache: str = "step"
    threshold: float = 0.5

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.top_k < 1 or self.ratio < 0:
            raise ConfigurationError("top_k must be >= 1 and ratio >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def estimator_params(self) -> dict:
        """Constructor arguments for :class:`RADClassifier`; ``top_k`` belongs to retrieval."""
        return dict(
            alpha=self.alpha, beta=self.beta, ratio=self.ratio, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay, seed=self.seed, gecl_text=self.gecl_text,
            gecl_vision=self.gecl_vision, decoder_mode="dual" if self.dual_decoder else "mlp", tau=self.tau,
            normalize=self.normalize, dim=self.dim, max_length=self.max_length, text_layers=self.text_layers,
            decoder_layers=self.decoder_layers, heads=self.heads, query_mode=self.query_mode,
            query_pool=self.query_pool, prototype_cache=self.prototype_cache, threshold=self.threshold,
        )


def config_hash(data) -> str:
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class RunRecord:
    """Append-only log of one training run."""

    config_hash: str
    seed: int
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def add_step(self, record: dict) -> None:
        self.steps.append(dict(record))

    def add_epoch(self, record: dict) -> None:
        self.epochs.append(dict(record))

    def losses(self, key: str = "total", n: int | None = None) -> list[float]:
        return [s[key] for s in self.steps[:n]]

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "config_hash": self.config_hash, "seed": self.seed}) + "\n")
            for s in self.steps:
                fh.write(json.dumps({"type": "step", **s}) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"type": "epoch", **e}) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "RunRecord":
        record = None
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                kind = row.pop("type")
                if kind == "header":
                    record = cls(row["config_hash"], row["seed"])
                elif record is None:
                    raise ValueError(f"{path}: run record lacks a header line")
                elif kind == "step":
                    record.add_step(row)
                else:
                    record.add_epoch(row)
        if record is None:
            raise ValueError(f"{path}: empty run record")
        return record


@dataclass
class TrainResult:
    estimator: RADClassifier
    record: RunRecord
    checkpoint: Path | None


def resolve_guidelines(manifest: DatasetManifest,
                       guidelines: GuidelineStore | Sequence[DiseaseGuideline]) -> list[DiseaseGuideline]:
    """Guidelines in the manifest's label order; aborts naming the first missing disease."""
    if isinstance(guidelines, GuidelineStore):
        missing = [(d, n) for d, n in manifest.diseases if d not in guidelines]
        if missing:
            d, n = missing[0]
            raise ConfigurationError(f"no guideline for disease {d!r} ({n}) in {guidelines.directory}")
        return guidelines.load_many(manifest.disease_ids)
    by_id = {g.disease_id: g for g in guidelines}
    for d, n in manifest.diseases:
        if d not in by_id:
            raise ConfigurationError(f"no guideline for disease {d!r} ({n})")
    return [by_id[d] for d in manifest.disease_ids]


def train(manifest: DatasetManifest, guidelines, config: TrainConfig | None = None,
          out_dir: str | Path | None = None, eval_each_epoch: bool = True) -> TrainResult:
    """Fit on the manifest's train split, writing a checkpoint and eval row per epoch."""
    config = config or TrainConfig()
    ordered = resolve_guidelines(manifest, guidelines)
    train_set, test_set = manifest.subset("train"), manifest.subset("test")
    if not train_set:
        raise ConfigurationError("manifest has no training samples")
    chash = config.hash()
    record = RunRecord(chash, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    extra = {"config": config.to_dict(), "config_hash": chash, "seed": config.seed,
             "split_hash": manifest.split_hash(), "diseases": manifest.diseases}
    est = RADClassifier(**config.estimator_params())
    seen = [0]

    def on_epoch(epoch: int, model: RADClassifier) -> None:
        for row in model.history_[seen[0]:]:
            record.add_step(row)
        seen[0] = len(model.history_)
        row = {"epoch": epoch}
        if eval_each_epoch and test_set:
            report = evaluate(model.predict_proba(test_set), manifest.labels(test_set), config.threshold)
            row.update({k: report.macro[k] for k in ("f1", "auc", "map")})
        record.add_epoch(row)
        if out is not None:
            model.save(out / "checkpoints" / f"epoch-{epoch:03d}.pt", extra={**extra, "epoch": epoch})
        logger.info("epoch %d %s", epoch, row)

    try:
        est.fit(train_set, guidelines=ordered, callback=on_epoch)
    except TrainingDiverged as err:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            dump = {"error": str(err), "config_hash": chash, "seed": config.seed, **err.dump}
            (out / "diverged.json").write_text(json.dumps(dump, indent=1, default=str), encoding="utf-8")
            record.write_jsonl(out / "run.jsonl")
        raise
    for row in est.history_[seen[0]:]:
        record.add_step(row)
    checkpoint = None
    if out is not None:
        checkpoint = est.save(out / "model.pt", extra=extra)
        record.write_jsonl(out / "run.jsonl")
    return TrainResult(est, record, checkpoint)


def ablation_config(base: TrainConfig, gecl_vision: bool, gecl_text: bool, dual_decoder: bool) -> TrainConfig:
    data = base.to_dict()
    data.update(gecl_vision=gecl_vision, gecl_text=gecl_text, dual_decoder=dual_decoder)
    return TrainConfig.from_dict(data)

