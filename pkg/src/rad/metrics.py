"""Multi-label evaluation: thresholded metrics, ROC-AUC, AP, and sample-wise accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .validation import check_scores


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """num / den with 0 where den == 0; also returns the undefined flags."""
    undefined = den == 0
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=~undefined), undefined


def thresholded_metrics(probabilities, labels, threshold: float = 0.5) -> dict[str, np.ndarray]:
    """Per-label precision, recall, F1 and accuracy from the confusion matrix.

    Precision (recall) is 0 when nothing is predicted (present) positive;
    ``precision_undefined``/``recall_undefined`` flag those labels.
    """
    scores, labels = check_scores(probabilities, labels)
    pred = scores >= threshold
    truth = labels == 1
    tp = (pred & truth).sum(0)
    fp = (pred & ~truth).sum(0)
    fn = (~pred & truth).sum(0)
    tn = (~pred & ~truth).sum(0)
    precision, p_undef = _safe_ratio(tp, tp + fp)
    recall, r_undef = _safe_ratio(tp, tp + fn)
    f1, _ = _safe_ratio(2 * precision * recall, precision + recall)
    return {
        "precision": precision, "recall": recall, "f1": f1,
        "acc": (tp + tn) / len(scores),
        "precision_undefined": p_undef, "recall_undefined": r_undef,
        "correct": tp + tn,
    }


def roc_auc(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-label Mann-Whitney AUC (ties count one half).

    Returns ``(auc, evaluated)``; labels lacking either class get NaN and
    ``evaluated=False``.
    """
    scores, labels = check_scores(scores, labels)
    n_pos = labels.sum(0)
    n_neg = len(labels) - n_pos
    evaluated = (n_pos > 0) & (n_neg > 0)
    auc = np.full(scores.shape[1], np.nan)
    for j in np.flatnonzero(evaluated):
        ranks = rankdata(scores[:, j])
        auc[j] = (ranks[labels[:, j] == 1].sum() - n_pos[j] * (n_pos[j] + 1) / 2) / (n_pos[j] * n_neg[j])
    return auc, evaluated


def average_precision(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-label AP: mean precision at the rank of each positive.

    Scores are ranked descending with ties kept in index order.  Labels
    with no positive get NaN and ``evaluated=False``.
    """
    scores, labels = check_scores(scores, labels)
    evaluated = labels.sum(0) > 0
    ap = np.full(scores.shape[1], np.nan)
    ranks = np.arange(1, len(scores) + 1)
    for j in np.flatnonzero(evaluated):
        order = np.argsort(-scores[:, j], kind="stable")
        hits = labels[order, j]
        precision_at = np.cumsum(hits) / ranks
        ap[j] = precision_at[hits == 1].mean()
    return ap, evaluated


def acc_sample(probabilities, labels, threshold: float = 0.5) -> float:
    """Fraction of samples whose whole thresholded label vector is right."""
    scores, labels = check_scores(probabilities, labels)
    return float(np.all((scores >= threshold) == (labels == 1), axis=1).mean())


@dataclass
class EvalReport:
    per_label: dict[str, list[float]]
    macro: dict[str, float]
    acc_s: float
    skipped: dict[str, int]
    threshold: float
    n_samples: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_label": self.per_label, "macro": self.macro, "acc_s": self.acc_s,
                "skipped": self.skipped, "threshold": self.threshold, "n_samples": self.n_samples,
                "meta": self.meta}

    @property
    def average(self) -> float:
        """Unweighted mean of F1, P, R, AUC, mAP, ACC and ACC-S (the 'Avg' column)."""
        keys = ("f1", "precision", "recall", "auc", "map", "acc")
        return float(np.mean([self.macro[k] for k in keys] + [self.acc_s]))


def evaluate(probabilities, labels, threshold: float = 0.5, label_names=None) -> EvalReport:
    scores, labels = check_scores(probabilities, labels)
    thr = thresholded_metrics(scores, labels, threshold)
    auc, auc_ok = roc_auc(scores, labels)
    ap, ap_ok = average_precision(scores, labels)
    n, m = scores.shape

    def mean_or_nan(x, ok):
        return float(x[ok].mean()) if ok.any() else float("nan")

    macro = {
        "f1": float(thr["f1"].mean()),
        "precision": float(thr["precision"].mean()),
        "recall": float(thr["recall"].mean()),
        # total correct over n*m equals the mean of per-label accuracies, without rounding drift
        "acc": float(thr["correct"].sum() / (n * m)),
        "auc": mean_or_nan(auc, auc_ok),
        "map": mean_or_nan(ap, ap_ok),
    }
    per_label = {k: [float(v) for v in thr[k]] for k in ("f1", "precision", "recall", "acc")}
    per_label["auc"] = [float(v) for v in auc]
    per_label["ap"] = [float(v) for v in ap]
    meta = {"labels": list(label_names)} if label_names is not None else {}
    return EvalReport(
        per_label=per_label, macro=macro, acc_s=acc_sample(scores, labels, threshold),
        skipped={"auc": int((~auc_ok).sum()), "ap": int((~ap_ok).sum()),
                 "precision_undefined": int(thr["precision_undefined"].sum()),
                 "recall_undefined": int(thr["recall_undefined"].sum())},
        threshold=threshold, n_samples=n, meta=meta,
    )
