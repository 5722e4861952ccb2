"""Guideline-enhanced contrastive loss (GECL)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class GeclConfig:
    tau: float = 0.07
    alpha: float = 1e-2
    ratio: int = 5
    normalize: bool = True
    enabled_text: bool = True
    enabled_vision: bool = True
    stop_prototype_grad: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")

    @property
    def active(self) -> bool:
        return self.enabled_text or (self.enabled_vision and self.alpha != 0)


@dataclass
class PrototypeSelection:
    positives: np.ndarray
    negatives: np.ndarray
    sampled: np.ndarray
    ratio: int

    @property
    def selected(self) -> np.ndarray:
        return np.concatenate([self.positives, self.sampled])


def select_prototypes(labels, ratio: int, rng: np.random.Generator) -> PrototypeSelection:
    """Split prototypes by label and draw ``min(ratio * |P|, |N|)`` negatives uniformly."""
    labels = np.asarray(labels)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels != 1)
    size = min(ratio * len(positives), len(negatives))
    sampled = np.sort(rng.choice(negatives, size=size, replace=False)) if size else negatives[:0]
    return PrototypeSelection(positives, negatives, sampled, ratio)


def selection_mask(labels: np.ndarray, ratio: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean b x m membership of each sample's prototype set S_i."""
    mask = np.zeros(labels.shape, dtype=bool)
    for i, row in enumerate(labels):
        mask[i, select_prototypes(row, ratio, rng).selected] = True
    return mask


def similarity(feature: torch.Tensor, prototype: torch.Tensor, tau: float = 0.07,
               normalize: bool = True) -> torch.Tensor:
    """Scaled dot product (cosine when ``normalize``) of the trailing dimension."""
    if normalize:
        if bool((feature.norm(dim=-1) == 0).any()) or bool((prototype.norm(dim=-1) == 0).any()):
            warnings.warn("zero vector in normalized similarity; its score is defined as 0", stacklevel=2)
        feature = F.normalize(feature, dim=-1)
        prototype = F.normalize(prototype, dim=-1)
    return (feature * prototype).sum(-1) / tau


def supcon_from_logits(phi: torch.Tensor, targets: torch.Tensor, n_pos) -> torch.Tensor:
    """-(1/|S|) * sum_j (y_j / |P| * phi_j - log(1 + exp(phi_j)))."""
    if phi.numel() == 0:
        raise ValueError("empty prototype set; samples without positives must be skipped")
    return -(targets / n_pos * phi - F.softplus(phi)).mean()


def supcon_sigmoid_form(phi: torch.Tensor, targets: torch.Tensor, n_pos) -> torch.Tensor:
    """Same objective written as a weighted sigmoid cross-entropy."""
    w = targets / n_pos
    return -(w * F.logsigmoid(phi) + (1 - w) * F.logsigmoid(-phi)).mean()


def supcon_loss(feature: torch.Tensor, prototypes: torch.Tensor, targets: torch.Tensor, n_pos,
                config: GeclConfig = GeclConfig()) -> torch.Tensor:
    """Contrastive loss of one feature (d) against its prototype set (|S| x d)."""
    if n_pos < 1:
        raise ValueError("supcon_loss needs at least one positive prototype")
    phi = similarity(feature.unsqueeze(0), prototypes, config.tau, config.normalize)
    return supcon_from_logits(phi, targets.to(phi.dtype), n_pos)


def _phi_matrix(features: torch.Tensor, prototypes: torch.Tensor, config: GeclConfig) -> torch.Tensor:
    if config.normalize:
        features = F.normalize(features, dim=-1)
        prototypes = F.normalize(prototypes, dim=-1)
    return features @ prototypes.T / config.tau


def gecl_loss(text_features: torch.Tensor, vision_features: torch.Tensor, prototypes: torch.Tensor,
              labels, config: GeclConfig = GeclConfig(), rng: np.random.Generator | None = None,
              selection: np.ndarray | None = None) -> torch.Tensor:
    """Batch GECL: mean over samples of text + alpha * vision SupCon terms.

    Samples with no positive label contribute exactly zero.  ``selection``
    (b x m booleans) overrides negative sampling, which keeps the loss a
    deterministic function of its inputs for gradient checks.
    """
    labels_np = np.asarray(labels.detach().cpu() if torch.is_tensor(labels) else labels)
    if selection is None:
        rng = rng if rng is not None else np.random.default_rng()
        selection = selection_mask(labels_np, config.ratio, rng)
    if config.stop_prototype_grad:
        prototypes = prototypes.detach()
    dtype, device = text_features.dtype, text_features.device
    y = torch.as_tensor(labels_np, dtype=dtype, device=device)
    sel = torch.as_tensor(selection, dtype=dtype, device=device)
    n_pos = y.sum(1)
    has_pos = (n_pos > 0).to(dtype)
    size = sel.sum(1).clamp(min=1)
    weights = y / n_pos.clamp(min=1).unsqueeze(1)

    def branch(features):
        phi = _phi_matrix(features, prototypes, config)
        per_sample = -(sel * (weights * phi - F.softplus(phi))).sum(1) / size
        return per_sample * has_pos

    total = torch.zeros(len(labels_np), dtype=dtype, device=device)
    if config.enabled_text:
        total = total + branch(text_features)
    if config.enabled_vision and config.alpha != 0:
        total = total + config.alpha * branch(vision_features)
    return total.mean()
