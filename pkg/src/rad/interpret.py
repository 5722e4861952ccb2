"""Interpretability: guideline recall over text attention and grounding IoU over image attention."""

from __future__ import annotations

import html
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import TokenizedText
from .refinement import DiseaseGuideline, normalize_indicator

logger = logging.getLogger(__name__)

DEFAULT_THETA_MULT = 2.0
DEFAULT_PERCENTILE = 90.0


@dataclass
class IndicatorMatch:
    phrase: str
    indices: list[int]
    mean_attention: float | None
    attended: bool


@dataclass
class AttentionRegion:
    mask: np.ndarray  # pixel grid, bool
    patch_mask: np.ndarray  # h x w, bool
    threshold: float
    degenerate: bool


def _lower_aligned(text: str) -> str:
    # str.lower can change length for a few code points; keep offsets aligned
    return "".join(c.lower() if len(c.lower()) == 1 else c for c in text)


def find_occurrences(phrase: str, text: str) -> list[tuple[int, int]]:
    """Character spans of every (possibly overlapping) case-insensitive occurrence."""
    needle = _lower_aligned(normalize_indicator(phrase))
    if not needle:
        return []
    hay = _lower_aligned(text)
    spans, start = [], hay.find(needle)
    while start >= 0:
        spans.append((start, start + len(needle)))
        start = hay.find(needle, start + 1)
    return spans


def match_indicator(phrase: str, tokenized: TokenizedText) -> list[int]:
    """Indices of tokens whose character span overlaps any occurrence of ``phrase``."""
    hits = set()
    for a, b in find_occurrences(phrase, tokenized.text):
        for j, (s, e) in enumerate(tokenized.spans):
            if s < b and a < e:
                hits.add(j)
    return sorted(hits)


def default_theta(n_tokens: int, theta_mult: float = DEFAULT_THETA_MULT) -> float:
    return theta_mult / n_tokens if n_tokens else float("inf")


def indicator_matches(guideline: DiseaseGuideline, tokenized: TokenizedText, attention: np.ndarray,
                      theta: float | None = None, theta_mult: float = DEFAULT_THETA_MULT) -> list[IndicatorMatch]:
    if not guideline.verified:
        raise ValueError(f"guideline for {guideline.disease_id!r} is not verified; its indicators are not trusted")
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape != (len(tokenized.tokens),):
        raise ValueError(f"attention row has shape {attention.shape}, expected ({len(tokenized.tokens)},)")
    if theta is None:
        theta = default_theta(len(tokenized.tokens), theta_mult)
    out = []
    for phrase in guideline.indicators:
        idx = match_indicator(phrase, tokenized)
        mean = float(attention[idx].mean()) if idx else None
        out.append(IndicatorMatch(phrase, idx, mean, mean is not None and mean > theta))
    return out


def guideline_recall(guideline: DiseaseGuideline, tokenized: TokenizedText, attention: np.ndarray,
                     theta: float | None = None, theta_mult: float = DEFAULT_THETA_MULT) -> float:
    """Share of the guideline's indicators found in the text that receive above-threshold attention.

    Indicators absent from the text are left out of the denominator; with
    none present the recall is 0.  ``theta`` defaults to
    ``theta_mult / L`` for ``L`` text tokens.
    """
    matches = indicator_matches(guideline, tokenized, attention, theta, theta_mult)
    total = sum(1 for m in matches if m.indices)
    attended = sum(1 for m in matches if m.attended)
    return attended / total if total > 0 else 0.0


def attention_region(attn_map: np.ndarray, percentile: float = DEFAULT_PERCENTILE,
                     image_shape: tuple[int, int] | None = None) -> AttentionRegion:
    """Top-activated patches (above the ``percentile``-th value), upsampled to pixels."""
    attn_map = np.asarray(attn_map, dtype=np.float64)
    if attn_map.ndim != 2:
        raise ValueError("attention map must be h x w")
    if (attn_map < 0).any():
        raise ValueError("attention map must be non-negative")
    h, w = attn_map.shape
    image_shape = image_shape or (h, w)
    threshold = float(np.percentile(attn_map, percentile))
    degenerate = bool(np.ptp(attn_map) == 0)
    if degenerate:
        logger.warning("constant attention map; selecting the whole grid")
        patches = np.ones_like(attn_map, dtype=bool)
    else:
        patches = attn_map > threshold
        if not patches.any():
            patches = attn_map >= threshold
    rows = np.arange(image_shape[0]) * h // image_shape[0]
    cols = np.arange(image_shape[1]) * w // image_shape[1]
    return AttentionRegion(patches[np.ix_(rows, cols)], patches, threshold, degenerate)


def boxes_to_mask(boxes: Sequence[Sequence[int]], shape: tuple[int, int]) -> np.ndarray:
    """Rasterize half-open pixel boxes ``[x0, y0, x1, y1)`` into one boolean mask."""
    mask = np.zeros(shape, dtype=bool)
    for x0, y0, x1, y1 in boxes:
        mask[max(int(y0), 0):max(int(y1), 0), max(int(x0), 0):max(int(x1), 0)] = True
    return mask


def grounding_iou(region: np.ndarray, target: np.ndarray) -> float:
    a, b = np.asarray(region, dtype=bool), np.asarray(target, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("both masks are empty; IoU is undefined")
    return float(np.logical_and(a, b).sum() / union)


def load_boxes(path: str | Path) -> dict[tuple[str, str], list[list[int]]]:
    """Ground-truth boxes from a JSON list (or JSON lines) of {sample_id, disease_id, boxes}."""
    raw = Path(path).read_text(encoding="utf-8").strip()
    rows = json.loads(raw) if raw.startswith("[") else [json.loads(x) for x in raw.splitlines() if x.strip()]
    out: dict[tuple[str, str], list[list[int]]] = {}
    for row in rows:
        out.setdefault((row["sample_id"], row["disease_id"]), []).extend(row["boxes"])
    return out


# -- evaluation over a model's attention ---------------------------------


def interpret_cases(samples, attentions, guidelines: Sequence[DiseaseGuideline], theta_mult: float = DEFAULT_THETA_MULT,
                    percentile: float = DEFAULT_PERCENTILE, boxes=None) -> list[dict]:
    """One record per (sample, positive disease) with its guideline recall and, when boxed, IoU.

    ``attentions`` are :class:`~rad.estimator.SampleAttention` objects
    aligned with ``samples``; ``boxes`` optionally overrides the samples'
    own boxes, keyed by ``(sample_id, disease_id)``.
    """
    samples = list(samples)
    if len(attentions) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(attentions)} attention traces")
    cases = []
    for sample, att in zip(samples, attentions):
        if att is None:
            raise ValueError(f"missing attention trace for sample {sample.id}")
        shape = np.asarray(sample.image).shape[:2]
        for j, g in enumerate(guidelines):
            if not sample.labels[j]:
                continue
            case = {"sample_id": sample.id, "disease_id": g.disease_id,
                    "recall": guideline_recall(g, att.tokenized, att.text_row(j), theta_mult=theta_mult)}
            gt = boxes.get((sample.id, g.disease_id)) if boxes is not None else sample.boxes.get(g.disease_id)
            if gt:
                region = attention_region(att.image_map(j), percentile, shape)
                case["iou"] = grounding_iou(region.mask, boxes_to_mask(gt, shape))
                case["degenerate"] = region.degenerate
            cases.append(case)
    return cases


def _aggregate(cases: list[dict], key: str, disease_ids: Sequence[str]) -> dict:
    vals = [c for c in cases if key in c]
    if not vals:
        return {"per_disease": {}, "avg_d": None, "avg_p": None, "mean": None, "n": 0}
    per_d = {d: float(np.mean([c[key] for c in vals if c["disease_id"] == d]))
             for d in disease_ids if any(c["disease_id"] == d for c in vals)}
    by_patient: dict[str, list[float]] = {}
    for c in vals:
        by_patient.setdefault(c["sample_id"], []).append(c[key])
    return {
        "per_disease": per_d,
        "avg_d": float(np.mean(list(per_d.values()))),
        "avg_p": float(np.mean([np.mean(v) for v in by_patient.values()])),
        "mean": float(np.mean([c[key] for c in vals])),
        "n": len(vals),
    }


def summarize(cases: list[dict], disease_ids: Sequence[str], meta: dict | None = None) -> dict:
    """Per-disease, disease-averaged (Avg-D) and patient-averaged (Avg-P) recall and mIoU."""
    return {"recall": _aggregate(cases, "recall", disease_ids), "iou": _aggregate(cases, "iou", disease_ids),
            "n_cases": len(cases), **({"meta": meta} if meta else {})}


# -- file emission ---------------------------------------------------------


def render_tokens_html(tokenized: TokenizedText, weights: np.ndarray, flagged: set[int]) -> str:
    """Token run where font weight follows attention; indicator tokens are underlined."""
    top = float(weights.max()) if len(weights) else 0.0
    parts = []
    for j, tok in enumerate(tokenized.tokens):
        level = weights[j] / top if top > 0 else 0.0
        weight = 100 + 100 * int(round(8 * level))
        style = f"font-weight:{weight}"
        if j in flagged:
            style += ";text-decoration:underline;color:#b00"
        parts.append(f'<span style="{style}" title="{weights[j]:.4f}">{html.escape(tok)}</span>')
    return " ".join(parts)


def _save_overlay(path: Path, image: np.ndarray, attn_map: np.ndarray, boxes, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    image = np.asarray(image)
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(image[..., 0] if image.shape[-1] == 1 else image, cmap="gray")
    ax.imshow(attn_map, cmap="jet", alpha=0.45, extent=(-0.5, image.shape[1] - 0.5, image.shape[0] - 0.5, -0.5))
    for x0, y0, x1, y1 in boxes or []:
        ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, edgecolor="lime", linewidth=1.5))
    ax.set_title(title, fontsize=8)
    ax.axis("off")
    fig.savefig(path, dpi=80, bbox_inches="tight")
    plt.close(fig)


def emit_overlays(samples, attentions, guidelines: Sequence[DiseaseGuideline], out_dir: str | Path,
                  theta_mult: float = DEFAULT_THETA_MULT, percentile: float = DEFAULT_PERCENTILE,
                  meta: dict | None = None, boxes=None) -> dict:
    """Write heatmap overlays, an HTML token rendering and ``summary.json``; returns the summary."""
    samples = list(samples)
    disease_ids = [g.disease_id for g in guidelines]
    if not samples:
        return summarize([], disease_ids, meta)
    cases = interpret_cases(samples, attentions, guidelines, theta_mult, percentile, boxes)
    out = Path(out_dir)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    rows = []
    for sample, att in zip(samples, attentions):
        for j, g in enumerate(guidelines):
            if not sample.labels[j]:
                continue
            gt = boxes.get((sample.id, g.disease_id)) if boxes is not None else sample.boxes.get(g.disease_id)
            _save_overlay(out / "overlays" / f"{sample.id}_{g.disease_id}.png", sample.image, att.image_map(j), gt,
                          f"{sample.id} / {g.name}")
            flagged = {i for phrase in g.indicators for i in match_indicator(phrase, att.tokenized)}
            rows.append(f"<h3>{html.escape(sample.id)} / {html.escape(g.name)}</h3>"
                        f"<p>{render_tokens_html(att.tokenized, att.text_row(j), flagged)}</p>")
    (out / "tokens.html").write_text("<html><body>\n" + "\n".join(rows) + "\n</body></html>\n", encoding="utf-8")
    summary = summarize(cases, disease_ids, meta)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    with (out / "cases.jsonl").open("w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps(c) + "\n")
    return summary


def dump_traces(attentions, disease_ids: Sequence[str], path: str | Path, layer: int = -1) -> Path:
    """JSON lines, one per (sample, disease): head-averaged weights plus KV position metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for att in attentions:
            meta = att.layout.meta()
            for item in meta:
                if item["kind"] == "image":
                    item["patch"] = list(att.layout.patch(item["pos"]))
                else:
                    span = att.layout.token_span(item["pos"], att.tokenized.spans)
                    item["span"] = list(span) if span else None
                    item["valid"] = bool(att.kv_mask[item["pos"]])
            for j, d in enumerate(disease_ids):
                fh.write(json.dumps({"sample_id": att.sample_id, "disease_id": d, "layer": layer, "head": "mean",
                                     "weights": [float(x) for x in att.weights[j]], "kv_meta": meta}) + "\n")
    return path
