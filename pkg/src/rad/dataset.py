"""Multimodal samples, EHR quantization/textualization, splits, synthetic data."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .refinement import ConfigurationError

logger = logging.getLogger(__name__)

EHR_PREAMBLE = (
    "Laboratory values within the 4-7 range indicate normal levels, values 0-3 suggest clinically low "
    "levels, and values 8-10 denote elevated levels."
)
EHR_CLAUSE = "The current panel includes {attribute} with the discretized value of {value}"


@dataclass
class EHREntry:
    attribute: str
    value: float | None
    normal_lo: float
    normal_hi: float

    def __post_init__(self):
        if not self.normal_lo < self.normal_hi:
            raise ConfigurationError(
                f"{self.attribute}: normal range [{self.normal_lo}, {self.normal_hi}] is empty"
            )


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x C, unit scaled
    report: str
    ehr: list[EHREntry]
    labels: np.ndarray  # length m, {0, 1}
    boxes: dict[str, list[list[int]]] = field(default_factory=dict)  # disease id -> [x0, y0, x1, y1)

    @property
    def text(self) -> str:
        """Report followed by the textualized EHR panel; the text-encoder input."""
        return f"{self.report} {ehr_to_text(self.ehr)}".strip()


@dataclass
class DatasetManifest:
    diseases: list[tuple[str, str]]  # (id, name) in canonical label order
    samples: list[Sample]
    split: dict[str, str] = field(default_factory=dict)  # sample id -> "train" | "test"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = len(self.diseases)
        for s in self.samples:
            if len(s.labels) != m:
                raise ValueError(f"sample {s.id}: {len(s.labels)} labels but {m} diseases")

    @property
    def disease_ids(self) -> list[str]:
        return [d for d, _ in self.diseases]

    @property
    def disease_names(self) -> list[str]:
        return [n for _, n in self.diseases]

    def subset(self, part: str) -> list[Sample]:
        return [s for s in self.samples if self.split.get(s.id) == part]

    def labels(self, samples: Sequence[Sample] | None = None) -> np.ndarray:
        samples = self.samples if samples is None else samples
        return np.stack([s.labels for s in samples]).astype(np.int64)

    def split_hash(self) -> str:
        payload = json.dumps(sorted(self.split.items())).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        records = []
        for s in self.samples:
            rel = f"images/{s.id}.npy"
            np.save(directory / rel, s.image, allow_pickle=False)
            records.append({
                "id": s.id,
                "image": rel,
                "report": s.report,
                "ehr": [[e.attribute, e.value, e.normal_lo, e.normal_hi] for e in s.ehr],
                "labels": [int(v) for v in s.labels],
                "boxes": s.boxes,
            })
        data = {
            "diseases": [{"id": d, "name": n} for d, n in self.diseases],
            "samples": records,
            "split": self.split,
            "meta": self.meta,
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetManifest":
        directory = Path(directory)
        data = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        samples = []
        for rec in data["samples"]:
            samples.append(Sample(
                id=rec["id"],
                image=np.load(directory / rec["image"], allow_pickle=False),
                report=rec["report"],
                ehr=[EHREntry(a, v, lo, hi) for a, v, lo, hi in rec["ehr"]],
                labels=np.asarray(rec["labels"], dtype=np.int64),
                boxes={k: [list(b) for b in v] for k, v in rec.get("boxes", {}).items()},
            ))
        return cls(
            diseases=[(d["id"], d["name"]) for d in data["diseases"]],
            samples=samples,
            split=data.get("split", {}),
            meta=data.get("meta", {}),
        )


def quantize_ehr(value: float | None, normal_lo: float, normal_hi: float) -> int | None:
    """Map a lab value to the 0-10 scale: 0-3 low, 4-7 normal, 8-10 high.

    Each band is linear in units of the normal-range width ``w``: the low
    band spans ``[lo - w, lo)``, the high band ``(hi, hi + w]``, and values
    beyond are clamped.  Non-finite or missing values return ``None``.
    """
    if not normal_lo < normal_hi:
        raise ConfigurationError(f"normal range [{normal_lo}, {normal_hi}] is empty")
    if value is None or not math.isfinite(value):
        return None
    width = normal_hi - normal_lo
    if value < normal_lo:
        return min(max(math.floor(4 * (value - (normal_lo - width)) / width), 0), 3)
    if value > normal_hi:
        return min(max(8 + math.floor(3 * (value - normal_hi) / width), 8), 10)
    return min(max(4 + math.floor(3 * (value - normal_lo) / width), 4), 7)


def textualize_ehr(levels: Sequence[tuple[str, int | None]]) -> str:
    """Render ``(attribute, quantized level)`` pairs with the panel template."""
    clauses = [EHR_CLAUSE.format(attribute=a, value=v) + "." for a, v in levels if v is not None]
    if not clauses:
        warnings.warn("EHR record has no present values; emitting preamble only", stacklevel=2)
    return " ".join([EHR_PREAMBLE, *clauses])


def ehr_to_text(entries: Sequence[EHREntry]) -> str:
    if not entries:
        return ""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return textualize_ehr([(e.attribute, quantize_ehr(e.value, e.normal_lo, e.normal_hi)) for e in entries])


class EHRTextualizer(TransformerMixin, BaseEstimator):
    """Stateless transformer turning EHR records into panel text."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [ehr_to_text(record) for record in X]


def split(ids: Sequence[str], ratio: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Deterministic shuffled train/test partition (default 4:1)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
    return [ids[i] for i in order[:n_train]], [ids[i] for i in order[n_train:]]


# synthetic generator vocabulary; every entry is a distinct, non-overlapping token sequence
_DISEASE_NAMES = [
    "pneumonia", "pleural effusion", "cardiomegaly", "atelectasis", "pulmonary edema", "pneumothorax",
    "pulmonary fibrosis", "emphysema", "consolidation", "lung nodule", "rib fracture", "mediastinal mass",
]
_FINDING_TOKENS = [
    "opacity", "blunting", "enlargement", "collapse", "haziness", "lucency",
    "scarring", "hyperinflation", "airspace", "granuloma", "callus", "widening",
]
_INDICATORS = [
    ("white blood cell count", 4.0, 11.0), ("c reactive protein", 0.0, 10.0), ("platelet count", 150.0, 400.0),
    ("serum bilirubin", 0.1, 1.2), ("alanine aminotransferase", 7.0, 56.0), ("troponin", 0.0, 0.04),
    ("serum sodium", 135.0, 145.0), ("creatinine", 0.6, 1.3), ("lactate", 0.5, 2.2),
    ("procalcitonin", 0.0, 0.5), ("d dimer", 0.0, 0.5), ("ferritin", 20.0, 250.0),
]
_FILLER = [
    "heart size is within normal limits", "no acute osseous abnormality", "the trachea is midline",
    "portable frontal view of the chest", "lines and tubes are unchanged", "the costophrenic angles are sharp",
]
MOTIF_SIZE = 8


def _disease_vocab(m: int) -> list[tuple[str, str, tuple[str, float, float]]]:
    out = []
    for i in range(m):
        if i < len(_DISEASE_NAMES):
            out.append((_DISEASE_NAMES[i], _FINDING_TOKENS[i], _INDICATORS[i]))
        else:
            out.append((f"condition {i}", f"marker{i}", (f"analyte{i}", 1.0, 2.0)))
    return out


def motif_origin(index: int, image_size: int) -> tuple[int, int]:
    """Top-left pixel of disease ``index``'s planted patch, on a 2-patch lattice."""
    step = MOTIF_SIZE
    per_row = max(image_size // step, 1)
    row, col = divmod(index % (per_row * per_row), per_row)
    return row * step, col * step


def synthetic_guideline(name: str, finding: str, indicator: str) -> str:
    return (
        f"Summary of key diagnostic features for {name}. "
        f"Important lab tests and values: {indicator} is typically elevated in {name}. "
        f"Key radiological findings: {finding} is commonly reported on chest imaging. "
        f"Diagnostic symptoms include cough and dyspnea."
    )


def make_synthetic(
    m: int = 8,
    n: int = 512,
    seed: int = 0,
    strength: float = 0.9,
    prevalence: float = 0.25,
    image_size: int = 28,
    ratio: float = 0.8,
) -> DatasetManifest:
    """Generate samples whose labels are planted in all three modalities.

    For each disease, a bright square at a disease-specific location, a
    finding word in the report, and an abnormal value of a
    disease-specific lab indicator each appear independently in a positive
    case with probability ``strength``; negatives never carry them.
    """
    if m < 2 or n < 20:
        raise ValueError("make_synthetic needs m >= 2 and n >= 20")
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    if image_size % 4 or image_size < MOTIF_SIZE:
        raise ValueError("image_size must be a multiple of 4 and at least the motif size")
    rng = np.random.default_rng(seed)
    vocab = _disease_vocab(m)
    diseases = [(f"d{i}", vocab[i][0]) for i in range(m)]

    labels = (rng.random((n, m)) < prevalence).astype(np.int64)

    def planted() -> np.ndarray:
        # a finding shows up in a positive case with probability `strength`, never in a negative one
        return labels * (rng.random((n, m)) < strength)

    img_sig, rep_sig, ehr_sig = planted(), planted(), planted()
    samples = []
    for i in range(n):
        sid = f"s{i:05d}"
        image = np.clip(rng.normal(0.2, 0.05, size=(image_size, image_size, 1)), 0.0, 1.0)
        boxes: dict[str, list[list[int]]] = {}
        for j in range(m):
            if img_sig[i, j]:
                y0, x0 = motif_origin(j, image_size)
                patch = rng.normal(0.9, 0.05, size=(MOTIF_SIZE, MOTIF_SIZE, 1))
                image[y0:y0 + MOTIF_SIZE, x0:x0 + MOTIF_SIZE] = np.clip(patch, 0.0, 1.0)
                boxes[f"d{j}"] = [[x0, y0, x0 + MOTIF_SIZE, y0 + MOTIF_SIZE]]
        sentences = list(rng.choice(_FILLER, size=2, replace=False))
        sentences += [f"there is {vocab[j][1]} noted" for j in range(m) if rep_sig[i, j]]
        rng.shuffle(sentences)
        report = ". ".join(sentences) + "."
        ehr = []
        for j in rng.permutation(m):
            attr, lo, hi = vocab[j][2]
            width = hi - lo
            if rng.random() < 0.05:
                value = None
            elif ehr_sig[i, j]:
                value = float(hi + width * rng.uniform(0.4, 0.99))
            else:
                value = float(lo + width * rng.uniform(0.0, 1.0))
            ehr.append(EHREntry(attr, value, lo, hi))
        samples.append(Sample(sid, image.astype(np.float32), report, ehr, labels[i], boxes))

    train_ids, test_ids = split([s.id for s in samples], ratio=ratio, seed=seed)
    assignment = {sid: "train" for sid in train_ids}
    assignment.update({sid: "test" for sid in test_ids})
    meta = {"generator": "synthetic", "m": m, "n": n, "seed": seed, "strength": strength,
            "prevalence": prevalence, "image_size": image_size}
    return DatasetManifest(diseases=diseases, samples=samples, split=assignment, meta=meta)


def synthetic_knowledge(manifest: DatasetManifest, distractors: int = 16, seed: int = 0):
    """Corpus records, reference guideline texts, and indicator lists for a synthetic manifest.

    Returns ``(records, guidelines, indicators)``; ``records`` follow the
    corpus JSON-lines contract, the other two map disease id to text or
    indicator list.
    """
    rng = np.random.default_rng(seed)
    vocab = _disease_vocab(len(manifest.diseases))
    records, guidelines, indicators = [], {}, {}
    templates = {
        "Wiki": "{name} is a condition of the chest. Imaging often shows {finding}.",
        "Research": "In a cohort study of {name}, elevated {indicator} predicted diagnosis.",
        "Guideline": "Clinical guideline for {name}: check {indicator}; {finding} supports the diagnosis.",
        "Book": "Textbook chapter on {name}: radiographs demonstrate {finding}; laboratory {indicator} rises.",
    }
    for (did, name), (_, finding, (indicator, _, _)) in zip(manifest.diseases, vocab):
        for source, template in templates.items():
            records.append({"source": source, "title": f"{name} ({source.lower()})",
                            "text": template.format(name=name, finding=finding, indicator=indicator)})
        guidelines[did] = synthetic_guideline(name, finding, indicator)
        indicators[did] = [indicator, finding]
    for i in range(distractors):
        words = rng.choice(["treatment", "dosage", "therapy", "surgery", "follow", "up", "outcome"], size=6)
        records.append({"source": "Book", "title": f"general medicine {i}", "text": " ".join(words) + f" {i}"})
    return records, guidelines, indicators
