"""scikit-learn style estimator wrapping the RAD network."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .decoder import KVLayout, predict
from .encoders import TokenizedText, Tokenizer
from .gecl import GeclConfig
from .model import RADNetwork, bce_with_logits, total_loss
from .refinement import DiseaseGuideline
from .validation import check_guidelines, check_labels, check_samples

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rad-checkpoint"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class SampleAttention:
    """Head-averaged attention of one sample: one row per disease over the KV sequence."""

    sample_id: str
    weights: np.ndarray  # m x (h*w + l)
    kv_mask: np.ndarray
    layout: KVLayout
    tokenized: TokenizedText

    def image_map(self, disease: int) -> np.ndarray:
        """Attention over patches, renormalized to sum to 1."""
        row = self.weights[disease, : self.layout.n_image]
        return (row / row.sum()).reshape(self.layout.h, self.layout.w)

    def text_row(self, disease: int) -> np.ndarray:
        """Attention over the real text tokens ([CLS] and padding dropped), renormalized."""
        n = len(self.tokenized.tokens)
        start = self.layout.n_image + 1
        row = self.weights[disease, start: start + n]
        total = row.sum()
        return row / total if total > 0 else row


def _trim(ids: torch.Tensor, mask: torch.Tensor):
    """Drop trailing columns that are padding in every row; outputs at valid positions are unchanged."""
    n = max(int(mask.sum(1).max()), 1)
    return ids[:, :n], mask[:, :n]


def _seed_streams(seed: int, n: int = 4) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class RADClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label diagnosis model with guideline-constrained training.

    ``X`` is a sequence of :class:`rad.dataset.Sample`; labels default to
    the samples' own label vectors.  ``fit`` also needs the per-disease
    guidelines in canonical label order.

    ``decoder_mode="mlp"`` swaps the dual decoder for an MLP on pooled
    features; ``gecl_text``/``gecl_vision`` toggle the two GECL branches.
    """

    def __init__(self, dim=64, max_length=128, text_layers=2, decoder_layers=2, heads=4,
                 decoder_mode="dual", query_mode="prototype", query_pool="cls",
                 gecl_text=True, gecl_vision=True, alpha=1e-2, beta=1e-1, ratio=5, tau=0.07,
                 normalize=True, stop_prototype_grad=False, prototype_cache="step",
                 lr=1e-3, weight_decay=1e-4, epochs=20, batch_size=32, threshold=0.5, seed=0,
                 dtype="float32", require_verified=True):
        self.dim = dim
        self.max_length = max_length
        self.text_layers = text_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.decoder_mode = decoder_mode
        self.query_mode = query_mode
        self.query_pool = query_pool
        self.gecl_text = gecl_text
        self.gecl_vision = gecl_vision
        self.alpha = alpha
        self.beta = beta
        self.ratio = ratio
        self.tau = tau
        self.normalize = normalize
        self.stop_prototype_grad = stop_prototype_grad
        self.prototype_cache = prototype_cache
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.threshold = threshold
        self.seed = seed
        self.dtype = dtype
        self.require_verified = require_verified

    # -- configuration -------------------------------------------------
    @property
    def gecl_config(self) -> GeclConfig:
        return GeclConfig(tau=self.tau, alpha=self.alpha, ratio=self.ratio, normalize=self.normalize,
                          enabled_text=self.gecl_text, enabled_vision=self.gecl_vision,
                          stop_prototype_grad=self.stop_prototype_grad)

    @property
    def uses_gecl(self) -> bool:
        return bool(self.beta) and self.gecl_config.active

    @property
    def needs_prototypes(self) -> bool:
        return self.decoder_mode == "dual" or self.uses_gecl

    def _torch_dtype(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        return _DTYPES[self.dtype]

    def _build_network(self, vocab_size: int) -> RADNetwork:
        return RADNetwork(
            vocab_size, self.n_labels_, dim=self.dim, max_length=self.max_length,
            image_size=self.image_shape_[0], in_channels=self.image_shape_[2], text_layers=self.text_layers,
            decoder_layers=self.decoder_layers, heads=self.heads, decoder_mode=self.decoder_mode,
            query_mode=self.query_mode, query_pool=self.query_pool,
        ).to(self._torch_dtype())

    # -- tensors -------------------------------------------------------
    def _images(self, samples: Sequence) -> torch.Tensor:
        return torch.as_tensor(np.stack([np.asarray(s.image) for s in samples]), dtype=self._torch_dtype())

    def _static_inputs(self):
        g = self.tokenizer_.encode([gl.text for gl in self.guidelines_])
        n = self.tokenizer_.encode([gl.name for gl in self.guidelines_])
        return (*_trim(g.ids, g.mask), *_trim(n.ids, n.mask))

    def _forward(self, images, text_ids, text_mask, prototypes=None, trace=False):
        g_ids, g_mask, n_ids, n_mask = self.static_inputs_
        return self.network_(images, text_ids, text_mask, g_ids, g_mask, n_ids, n_mask,
                             prototypes=prototypes, need_prototypes=self.needs_prototypes, trace=trace)

    # -- training ------------------------------------------------------
    def fit(self, X, y=None, guidelines: Sequence[DiseaseGuideline] | None = None,
            callback: Callable[[int, "RADClassifier"], None] | None = None):
        if guidelines is None:
            raise ValueError("fit requires the disease guidelines (guidelines=...)")
        self.guidelines_ = check_guidelines(guidelines, require_verified=self.require_verified)
        self.n_labels_ = len(self.guidelines_)
        samples = check_samples(X, n_labels=self.n_labels_ if y is None else None)
        y = check_labels(np.stack([s.labels for s in samples]) if y is None else y, len(samples), self.n_labels_)
        self.image_shape_ = tuple(np.asarray(samples[0].image).shape)
        if self.image_shape_[0] != self.image_shape_[1]:
            raise ValueError("images must be square")
        if self.prototype_cache not in ("step", "epoch"):
            raise ValueError("prototype_cache must be 'step' or 'epoch'")

        texts = [s.text for s in samples]
        self.tokenizer_ = Tokenizer.build(
            texts + [g.text for g in self.guidelines_] + [g.name for g in self.guidelines_], self.max_length)
        init_rng, shuffle_rng, negative_rng, _ = _seed_streams(self.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(init_rng.integers(2**31)))
            self.network_ = self._build_network(len(self.tokenizer_))
        self.static_inputs_ = self._static_inputs()
        self.history_: list[dict] = []

        enc = self.tokenizer_.encode(texts)
        images = self._images(samples)
        labels = torch.as_tensor(y, dtype=self._torch_dtype())
        opt = torch.optim.AdamW(self.network_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        config = self.gecl_config
        step = 0
        for epoch in range(self.epochs):
            self.network_.train()
            cached = None
            if self.prototype_cache == "epoch" and self.needs_prototypes:
                with torch.no_grad():
                    cached = self.network_.prototypes(*self.static_inputs_[:2])
            order = shuffle_rng.permutation(len(samples))
            for start in range(0, len(order), self.batch_size):
                idx = torch.as_tensor(order[start: start + self.batch_size])
                out = self._forward(images[idx], *_trim(enc.ids[idx], enc.mask[idx]), prototypes=cached)
                yb = labels[idx]
                gecl = self.network_.gecl(out, yb, config, negative_rng) if self.uses_gecl else None
                loss = total_loss(out.logits_guide, out.logits_label, yb, gecl, self.beta)
                with torch.no_grad():
                    record = {
                        "step": step, "epoch": epoch,
                        "bce_guide": float(bce_with_logits(out.logits_guide, yb)),
                        "bce_label": float(bce_with_logits(out.logits_label, yb)) if out.logits_label is not None else None,
                        "gecl": float(gecl) if gecl is not None else None,
                        "total": float(loss),
                    }
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step}",
                                           {"record": record, "recent": self.history_[-10:]})
                opt.zero_grad()
                loss.backward()
                opt.step()
                self.history_.append(record)
                step += 1
            if callback is not None:
                callback(epoch, self)
        self.network_.eval()
        return self

    # -- inference -----------------------------------------------------
    def _batches(self, X, batch_size=None):
        check_is_fitted(self, "network_")
        samples = check_samples(X, image_shape=self.image_shape_)
        bs = batch_size or max(self.batch_size, 64)
        for start in range(0, len(samples), bs):
            yield samples[start: start + bs]

    @torch.no_grad()
    def decision_function(self, X) -> tuple[np.ndarray, np.ndarray | None]:
        """Raw logits of the guideline (or MLP) branch and of the label branch."""
        check_is_fitted(self, "network_")
        self.network_.eval()
        guide, label = [], []
        for batch in self._batches(X):
            enc = self.tokenizer_.encode([s.text for s in batch])
            out = self._forward(self._images(batch), *_trim(enc.ids, enc.mask))
            guide.append(out.logits_guide.double().numpy())
            if out.logits_label is not None:
                label.append(out.logits_label.double().numpy())
        return np.concatenate(guide), (np.concatenate(label) if label else None)

    def predict_proba(self, X) -> np.ndarray:
        guide, label = self.decision_function(X)
        probs, _ = predict(torch.as_tensor(guide), None if label is None else torch.as_tensor(label))
        return probs.numpy()

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        from .metrics import evaluate

        samples = list(X)
        y = np.stack([s.labels for s in samples]) if y is None else y
        return evaluate(self.predict_proba(samples), y, self.threshold).macro["f1"]

    @torch.no_grad()
    def explain(self, X, branch: str = "guide", layer: int = -1) -> list[SampleAttention]:
        """Cross-attention of every disease query for each sample."""
        check_is_fitted(self, "network_")
        self.network_.eval()
        results = []
        _, _, n_ids, n_mask = self.static_inputs_
        for batch in self._batches(X):
            enc = self.tokenizer_.encode([s.text for s in batch])
            out = self._forward(self._images(batch), enc.ids, enc.mask, trace=True)
            attn = self.network_.attention(out, n_ids, n_mask, branch=branch, layer=layer).double().numpy()
            for i, s in enumerate(batch):
                results.append(SampleAttention(s.id, attn[i], out.kv_mask[i].numpy(), out.layout,
                                               enc.tokenized[i]))
        return results

    # -- persistence ---------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        check_is_fitted(self, "network_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": self.get_params(),
            "state_dict": self.network_.state_dict(),
            "vocab": self.tokenizer_.vocab,
            "guidelines": [g.to_dict() for g in self.guidelines_],
            "image_shape": list(self.image_shape_),
            "extra": extra or {},
        }, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RADClassifier":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a RAD checkpoint")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        est = cls(**blob["params"])
        est.guidelines_ = [DiseaseGuideline.from_dict(g) for g in blob["guidelines"]]
        est.n_labels_ = len(est.guidelines_)
        est.image_shape_ = tuple(blob["image_shape"])
        est.tokenizer_ = Tokenizer(dict(blob["vocab"]), est.max_length)
        est.network_ = est._build_network(len(est.tokenizer_))
        est.network_.load_state_dict(blob["state_dict"])
        est.network_.eval()
        est.static_inputs_ = est._static_inputs()
        est.history_ = []
        est.checkpoint_extra_ = blob.get("extra", {})
        return est
