"""Input checks shared by the estimator and the pipeline."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import Sample
from .refinement import DiseaseGuideline


def check_samples(X, n_labels: int | None = None, image_shape: tuple | None = None) -> list[Sample]:
    """Validate a sequence of samples; returns it as a list."""
    if isinstance(X, Sample):
        raise TypeError("expected a sequence of Sample objects, got a single Sample")
    samples = list(X)
    if not samples:
        raise ValueError("no samples given")
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample, got {type(s).__name__}")
        image = np.asarray(s.image)
        if image.ndim != 3:
            raise ValueError(f"sample {s.id}: image must be H x W x C, got shape {image.shape}")
        if image_shape is None:
            image_shape = image.shape
        elif image.shape != tuple(image_shape):
            raise ValueError(f"sample {s.id}: image shape {image.shape} differs from {tuple(image_shape)}")
        if not np.all(np.isfinite(image)):
            raise ValueError(f"sample {s.id}: image has non-finite values")
        if n_labels is not None and len(s.labels) != n_labels:
            raise ValueError(f"sample {s.id}: expected {n_labels} labels, got {len(s.labels)}")
    return samples


def check_labels(y, n_samples: int, n_labels: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[0] != n_samples:
        raise ValueError(f"labels must be an n x m matrix with n={n_samples}, got shape {y.shape}")
    if n_labels is not None and y.shape[1] != n_labels:
        raise ValueError(f"expected {n_labels} label columns, got {y.shape[1]}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def check_guidelines(guidelines: Sequence[DiseaseGuideline], require_verified: bool = True) -> list[DiseaseGuideline]:
    guidelines = list(guidelines)
    if not guidelines:
        raise ValueError("at least one disease guideline is required")
    for g in guidelines:
        if not g.text or not g.text.strip():
            raise ValueError(f"missing guideline text for disease {g.disease_id!r} ({g.name})")
        if require_verified and not g.verified:
            raise ValueError(f"guideline for disease {g.disease_id!r} ({g.name}) is not verified")
    return guidelines


def check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels.reshape(-1, 1)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must both be n x m")
    return scores, labels.astype(np.int64)
