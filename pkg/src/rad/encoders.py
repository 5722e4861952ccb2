"""Desk-scale vision and text encoders plus guideline prototype encoding."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

logger = logging.getLogger(__name__)

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass
class TokenizedText:
    text: str
    tokens: list[str]
    spans: list[tuple[int, int]]  # character span of each kept token in ``text``
    truncated: int = 0


@dataclass
class EncodedText:
    ids: torch.Tensor  # b x l, position 0 is [CLS]
    mask: torch.Tensor  # b x l, True on [CLS] and real tokens
    tokenized: list[TokenizedText]


class Tokenizer:
    """Lowercasing word tokenizer that keeps character offsets.

    Token ``j`` of a text sits at sequence position ``j + 1``; position 0
    is ``[CLS]``.
    """

    def __init__(self, vocab: dict[str, int] | None = None, max_length: int = 128):
        if max_length < 2:
            raise ValueError("max_length must leave room for [CLS] and one token")
        self.max_length = max_length
        self.vocab = vocab if vocab is not None else {PAD: 0, UNK: 1, CLS: 2}
        for special in (PAD, UNK, CLS):
            if special not in self.vocab:
                raise ValueError(f"vocabulary lacks {special}")

    @property
    def pad_id(self) -> int:
        return self.vocab[PAD]

    @property
    def cls_id(self) -> int:
        return self.vocab[CLS]

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, texts: Iterable[str], max_length: int = 128, min_freq: int = 1) -> "Tokenizer":
        counts = Counter(tok for text in texts for tok, _ in cls.scan(text))
        vocab = {PAD: 0, UNK: 1, CLS: 2}
        for tok, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            if c >= min_freq:
                vocab[tok] = len(vocab)
        return cls(vocab, max_length)

    @staticmethod
    def scan(text: str) -> list[tuple[str, tuple[int, int]]]:
        return [(m.group().lower(), m.span()) for m in _TOKEN_RE.finditer(text)]

    def tokenize(self, text: str) -> TokenizedText:
        scanned = self.scan(text)
        keep = scanned[: self.max_length - 1]
        return TokenizedText(text, [t for t, _ in keep], [s for _, s in keep], len(scanned) - len(keep))

    def encode(self, texts: Sequence[str]) -> EncodedText:
        tokenized = [self.tokenize(t) for t in texts]
        ids = torch.full((len(texts), self.max_length), self.pad_id, dtype=torch.long)
        mask = torch.zeros((len(texts), self.max_length), dtype=torch.bool)
        unk = self.vocab[UNK]
        for row, tt in enumerate(tokenized):
            ids[row, 0] = self.cls_id
            ids[row, 1: 1 + len(tt.tokens)] = torch.tensor([self.vocab.get(t, unk) for t in tt.tokens],
                                                           dtype=torch.long)
            mask[row, : 1 + len(tt.tokens)] = True
            if tt.truncated:
                logger.debug("truncated %d tokens", tt.truncated)
        return EncodedText(ids, mask, tokenized)


class VisionEncoder(nn.Module):
    """Four-layer conv stack, two stride-2 stages: S x S image -> S/4 x S/4 x d grid."""

    def __init__(self, in_channels: int = 1, dim: int = 64, image_size: int = 28, width: int = 32):
        super().__init__()
        if image_size % 4 or image_size < 4:
            raise ValueError(f"image_size {image_size} incompatible with the conv stack (needs a multiple of 4)")
        self.grid = image_size // 4
        self.image_size = image_size
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=1, padding=1), nn.GELU(),
        )
        self.proj = nn.Conv2d(2 * width, dim, 1)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``images``: b x H x W x C. Returns V (b x h x w x d) and V' (b x d)."""
        if images.shape[1:3] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[1:3])}")
        x = self.proj(self.body(images.permute(0, 3, 1, 2)))
        v = x.permute(0, 2, 3, 1)
        return v, v.mean(dim=(1, 2))


class TextEncoder(nn.Module):
    """Token + position embeddings followed by pre-norm self-attention layers."""

    def __init__(self, vocab_size: int, dim: int = 64, max_length: int = 128, layers: int = 2, heads: int = 4):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, dim)
        # small init keeps [CLS] from dominating its own output, so pooled guideline queries start distinct
        nn.init.normal_(self.tok.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(max_length, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns T (b x l x d) and the [CLS] row T' (b x d)."""
        x = self.tok(ids) + self.pos[: ids.shape[1]]
        x = self.norm(self.layers(x, src_key_padding_mask=~mask))
        return x, x[:, 0]


@dataclass
class GuidelinePrototypes:
    tokens: torch.Tensor  # m x l x d
    pooled: torch.Tensor  # m x d
    mask: torch.Tensor  # m x l


def encode_guidelines(encoder: TextEncoder, tokenizer: Tokenizer, texts: Sequence[str],
                      names: Sequence[str] | None = None) -> GuidelinePrototypes:
    if not texts:
        raise ValueError("at least one guideline is required")
    for i, text in enumerate(texts):
        if not text or not text.strip():
            label = names[i] if names is not None else str(i)
            raise ValueError(f"guideline text missing for disease {label!r}")
    enc = tokenizer.encode(texts)
    for i, tt in enumerate(enc.tokenized):
        if tt.truncated:
            label = names[i] if names is not None else str(i)
            logger.warning("guideline for %s truncated by %d tokens", label, tt.truncated)
    device = next(encoder.parameters()).device
    tokens, pooled = encoder(enc.ids.to(device), enc.mask.to(device))
    return GuidelinePrototypes(tokens, pooled, enc.mask.to(device))
