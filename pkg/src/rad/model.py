"""The RAD network: encoders, guideline prototypes, dual decoder or MLP head, and losses."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .decoder import DecoderStack, MLPHead, fuse_kv, probe_attention
from .encoders import GuidelinePrototypes, TextEncoder, VisionEncoder
from .gecl import GeclConfig, gecl_loss


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, softplus form: softplus(z) - y * z."""
    return (F.softplus(logits) - targets * logits).mean()


def total_loss(logits_guide, logits_label, labels, gecl, beta: float) -> torch.Tensor:
    """BCE on each present branch plus ``beta`` times the GECL value."""
    labels = torch.as_tensor(labels).to(logits_guide.dtype)
    loss = bce_with_logits(logits_guide, labels)
    if logits_label is not None:
        loss = loss + bce_with_logits(logits_label, labels)
    if beta and gecl is not None:
        loss = loss + beta * gecl
    return loss


@dataclass
class ModelOutput:
    logits_guide: torch.Tensor  # the MLP logits in "mlp" mode
    logits_label: torch.Tensor | None
    v: torch.Tensor
    t: torch.Tensor
    v_pooled: torch.Tensor
    t_pooled: torch.Tensor
    kv: torch.Tensor
    kv_mask: torch.Tensor
    layout: object
    prototypes: GuidelinePrototypes | None = None
    traces_guide: list = field(default_factory=list)
    traces_label: list = field(default_factory=list)


class RADNetwork(nn.Module):
    def __init__(self, vocab_size: int, n_labels: int, dim: int = 64, max_length: int = 128,
                 image_size: int = 28, in_channels: int = 1, text_layers: int = 2, decoder_layers: int = 2,
                 heads: int = 4, decoder_mode: str = "dual", query_mode: str = "prototype",
                 query_pool: str = "cls"):
        super().__init__()
        if decoder_mode not in ("dual", "mlp"):
            raise ValueError(f"unknown decoder_mode {decoder_mode!r}")
        if query_mode not in ("prototype", "token"):
            raise ValueError(f"unknown query_mode {query_mode!r}")
        if query_pool not in ("cls", "mean"):
            raise ValueError(f"unknown query_pool {query_pool!r}")
        self.decoder_mode = decoder_mode
        self.query_mode = query_mode
        self.query_pool = query_pool
        self.n_labels = n_labels
        self.vision = VisionEncoder(in_channels, dim, image_size)
        self.text = TextEncoder(vocab_size, dim, max_length, text_layers, heads)
        kv_length = self.vision.grid ** 2 + max_length
        if decoder_mode == "dual":
            self.decoder_guide = DecoderStack(dim, kv_length, decoder_layers, heads)
            self.decoder_label = DecoderStack(dim, kv_length, decoder_layers, heads)
        else:
            self.mlp = MLPHead(dim, n_labels)
        self.counters: Counter = Counter()

    def encode_text(self, ids, mask):
        return self.text(ids, mask)

    def prototypes(self, ids, mask) -> GuidelinePrototypes:
        self.counters["prototype_encodings"] += 1
        tokens, pooled = self.text(ids, mask)
        return GuidelinePrototypes(tokens, pooled, mask)

    def _queries(self, protos: GuidelinePrototypes):
        if self.query_mode == "token":
            return protos.tokens, protos.mask
        if self.query_pool == "mean":
            m = protos.mask.to(protos.tokens.dtype).unsqueeze(-1)
            q = (protos.tokens * m).sum(1) / m.sum(1).clamp(min=1)
        else:
            q = protos.pooled
        return q, None

    def forward(self, images, text_ids, text_mask, guide_ids=None, guide_mask=None, name_ids=None,
                name_mask=None, prototypes: GuidelinePrototypes | None = None, need_prototypes: bool = True,
                trace: bool = False) -> ModelOutput:
        v, v_pooled = self.vision(images)
        t, t_pooled = self.encode_text(text_ids, text_mask)
        kv, kv_mask, layout = fuse_kv(v, t, text_mask)
        if prototypes is None and need_prototypes:
            prototypes = self.prototypes(guide_ids, guide_mask)
        out = ModelOutput(None, None, v, t, v_pooled, t_pooled, kv, kv_mask, layout, prototypes)
        if self.decoder_mode == "mlp":
            out.logits_guide = self.mlp(v_pooled, t_pooled)
            return out
        q, qmask = self._queries(prototypes)
        out.logits_guide, out.traces_guide = self.decoder_guide(q, kv, kv_mask, qmask, trace=trace)
        names = GuidelinePrototypes(*self.text(name_ids, name_mask), name_mask)
        q, qmask = self._queries(names)
        out.logits_label, out.traces_label = self.decoder_label(q, kv, kv_mask, qmask, trace=trace)
        return out

    def gecl(self, out: ModelOutput, labels, config: GeclConfig, rng: np.random.Generator | None = None,
             selection=None) -> torch.Tensor:
        self.counters["gecl_calls"] += 1
        return gecl_loss(out.t_pooled, out.v_pooled, out.prototypes.pooled, labels, config, rng, selection)

    def attention(self, out: ModelOutput, name_ids=None, name_mask=None, branch: str = "guide",
                  layer: int = -1) -> torch.Tensor:
        """Head-averaged cross-attention rows, b x m x L.

        The MLP ablation has no decoder; it is probed with parameter-free
        attention from the disease-name embeddings over its fused features.
        """
        if self.decoder_mode == "mlp":
            _, names = self.text(name_ids, name_mask)
            return probe_attention(names, out.kv, out.kv_mask)
        traces = out.traces_guide if branch == "guide" else out.traces_label
        if not traces:
            raise ValueError("forward was run without trace=True")
        return traces[layer].mean(dim=1)
