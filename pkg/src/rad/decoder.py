"""Dual cross-attention diagnostic decoders, the MLP ablation head, and inference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class KVLayout:
    """Position bookkeeping for the fused key/value sequence.

    Image patches come first in row-major order, then the ``l`` text
    positions (position ``h*w`` is the text [CLS]).
    """

    h: int
    w: int
    l: int

    @property
    def n_image(self) -> int:
        return self.h * self.w

    def __len__(self) -> int:
        return self.h * self.w + self.l

    def kind(self, pos: int) -> str:
        if not 0 <= pos < len(self):
            raise IndexError(pos)
        return "image" if pos < self.n_image else "text"

    def patch(self, pos: int) -> tuple[int, int]:
        if self.kind(pos) != "image":
            raise ValueError(f"position {pos} is not an image patch")
        return divmod(pos, self.w)

    def text_position(self, pos: int) -> int:
        if self.kind(pos) != "text":
            raise ValueError(f"position {pos} is not a text token")
        return pos - self.n_image

    def token_span(self, pos: int, spans) -> tuple[int, int] | None:
        """Character span of the text token at KV ``pos``; None for [CLS]/padding."""
        j = self.text_position(pos) - 1
        return spans[j] if 0 <= j < len(spans) else None

    def meta(self) -> list[dict]:
        return [{"pos": p, "kind": self.kind(p)} for p in range(len(self))]


def fuse_kv(v: torch.Tensor, t: torch.Tensor, text_mask: torch.Tensor):
    """Concatenate flattened patches and text tokens; returns (kv, valid mask, layout)."""
    b, h, w, d = v.shape
    if t.shape[-1] != d:
        raise ValueError(f"embedding width mismatch: image {d}, text {t.shape[-1]}")
    kv = torch.cat([v.reshape(b, h * w, d), t], dim=1)
    mask = torch.cat([torch.ones(b, h * w, dtype=torch.bool, device=v.device), text_mask.bool()], dim=1)
    return kv, mask, KVLayout(h, w, t.shape[1])


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dim restricted to ``mask`` (broadcastable, True = keep)."""
    return torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, queries, kv, kv_mask):
        b, nq, d = queries.shape
        dh = d // self.heads

        def split(x):
            return x.reshape(b, x.shape[1], self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(queries)), split(self.k(kv)), split(self.v(kv))
        attn = masked_softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), kv_mask[:, None, None, :])
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out), attn


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, kv, kv_mask):
        a, weights = self.attn(self.norm_q(x), self.norm_kv(kv), kv_mask)
        x = x + a
        x = x + self.ff(self.norm_ff(x))
        return x, weights


class DecoderStack(nn.Module):
    """Cross-attention-only decoder producing one logit per query.

    Queries get no positional encoding and never attend to each other, so
    the output is equivariant to query order.  Keys/values receive a
    learned embedding per KV position.  ``forward`` accepts either m x d
    prototype queries or, in token mode, m x l x d query tokens with an
    m x l mask (each disease then reads out the mean of its tokens).
    """

    def __init__(self, dim: int, kv_length: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.kv_pos = nn.Parameter(torch.randn(kv_length, dim) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 1)

    def forward(self, queries, kv, kv_mask, query_mask=None, trace: bool = False):
        if queries.shape[0] == 0:
            raise ValueError("decoder needs at least one query (m >= 1)")
        b = kv.shape[0]
        token_mode = queries.dim() == 3
        if token_mode:
            m, l, d = queries.shape
            x = queries.reshape(1, m * l, d).expand(b, -1, -1)
        else:
            m = queries.shape[0]
            x = queries.unsqueeze(0).expand(b, -1, -1)
        kv = kv + self.kv_pos[: kv.shape[1]]
        traces = []
        for layer in self.layers:
            x, weights = layer(x, kv, kv_mask)
            if trace:
                traces.append(weights)
        x = self.norm(x)
        if token_mode:
            qm = query_mask.to(x.dtype).reshape(1, m, l, 1)
            x = (x.reshape(b, m, l, -1) * qm).sum(2) / qm.sum(2).clamp(min=1)
            if trace:
                # fold token rows back to one row per disease
                traces = [(t.reshape(b, t.shape[1], m, l, -1) * qm.unsqueeze(1)).sum(3)
                          / qm.unsqueeze(1).sum(3).clamp(min=1) for t in traces]
        logits = self.head(x).squeeze(-1)
        return logits, traces


class MLPHead(nn.Module):
    """Two-layer MLP on concatenated pooled features (the decoder ablation)."""

    def __init__(self, dim: int, n_labels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.net = nn.Sequential(nn.Linear(2 * dim, hidden), nn.GELU(), nn.Linear(hidden, n_labels))

    def forward(self, v_pooled, t_pooled):
        return self.net(torch.cat([v_pooled, t_pooled], dim=-1))


def predict(logits_guide, logits_label=None, threshold: float = 0.5):
    """Average the branch probabilities; a single branch is used as is."""
    branches = [x for x in (logits_guide, logits_label) if x is not None]
    if not branches:
        raise ValueError("at least one branch of logits is required")
    probs = sum(torch.sigmoid(torch.as_tensor(x)) for x in branches) / len(branches)
    return probs, probs >= threshold


def probe_attention(queries: torch.Tensor, kv: torch.Tensor, kv_mask: torch.Tensor) -> torch.Tensor:
    """Parameter-free scaled dot-product attention, b x m x L.

    Gives attention maps for models without a cross-attention decoder.
    """
    q = F.layer_norm(queries, queries.shape[-1:])
    k = F.layer_norm(kv, kv.shape[-1:])
    scores = torch.einsum("md,bld->bml", q, k) / math.sqrt(q.shape[-1])
    return masked_softmax(scores, kv_mask[:, None, :])
