"""Fifty (guideline, text, attention, theta) cases for guideline recall, with a line-by-line reference."""

from __future__ import annotations

import numpy as np

from rad.encoders import Tokenizer
from rad.refinement import DiseaseGuideline

TOKENIZER = Tokenizer(max_length=64)


def reference_recall(indicators, tokens, attention, theta):
    """Straight transliteration: count present indicators, then those whose mean attention clears theta."""
    total = 0
    attended = 0
    for phrase in indicators:
        words = TOKENIZER.tokenize(phrase).tokens
        positions = []
        for start in range(len(tokens) - len(words) + 1):
            if words and tokens[start:start + len(words)] == words:
                positions.extend(range(start, start + len(words)))
        positions = sorted(set(positions))
        if not positions:
            continue
        total += 1
        mean = sum(attention[p] for p in positions) / len(positions)
        if mean > theta:
            attended += 1
    if total == 0:
        return 0.0
    return attended / total


def guideline(indicators):
    return DiseaseGuideline("d", "disease", "guideline text", list(indicators), verified=True)


# (indicators, text, attention per token, theta, expected recall worked out by hand)
HAND_CASES = [
    (["fever"], "no findings today", [0.3, 0.3, 0.4], 0.1, 0.0),  # nothing present: total = 0
    ([], "fever cough", [0.5, 0.5], 0.1, 0.0),
    (["fever"], "fever", [1.0], 0.5, 1.0),
    (["fever"], "fever", [1.0], 1.0, 0.0),  # strict inequality
    (["fever", "cough"], "fever and cough", [0.5, 0.0, 0.5], 0.4, 1.0),
    (["fever", "cough"], "fever and cough", [0.5, 0.4, 0.1], 0.4, 0.5),
    (["fever", "cough", "rash"], "fever cough rash", [0.6, 0.3, 0.1], 0.2, 2 / 3),
    (["fever", "cough", "rash"], "fever cough", [0.6, 0.4], 0.5, 0.5),  # rash absent
    (["wbc high"], "wbc high platelet low", [0.2, 0.2, 0.3, 0.3], 0.19, 1.0),
    (["wbc high"], "wbc high platelet low", [0.3, 0.05, 0.3, 0.35], 0.2, 0.0),  # mean 0.175
    (["wbc high", "platelet low"], "wbc high platelet low", [0.3, 0.05, 0.3, 0.35], 0.2, 0.5),
    (["Fever"], "FEVER noted", [0.9, 0.1], 0.5, 1.0),  # case-insensitive
    (["fever"], "fever then fever again", [0.1, 0.2, 0.6, 0.1], 0.3, 1.0),  # mean over both: 0.35
    (["fever"], "fever then fever again", [0.1, 0.2, 0.4, 0.3], 0.3, 0.0),  # mean 0.25
    (["opacity", "effusion"], "left opacity right effusion", [0.1, 0.4, 0.1, 0.4], 0.25, 1.0),
    (["opacity", "effusion"], "left opacity right effusion", [0.1, 0.2, 0.3, 0.4], 0.25, 0.5),
    (["opacity", "effusion"], "left opacity right effusion", [0.4, 0.2, 0.3, 0.1], 0.25, 0.0),
    (["a b", "b c"], "a b c", [0.1, 0.1, 0.8], 0.3, 0.5),  # overlapping phrases: a b -> 0.1, b c -> 0.45
    (["cough"], "cough", [1.0], float("inf"), 0.0),
    (["cough"], "cough", [1.0], -1.0, 1.0),
]


def _generated_cases(n: int, seed: int = 11):
    """Deterministic cases over a small vocabulary: (indicators, text, attention, theta)."""
    rng = np.random.default_rng(seed)
    vocab = ["fever", "cough", "wbc", "high", "low", "opacity", "effusion", "chest", "normal", "rash"]
    cases = []
    for i in range(n):
        text = " ".join(rng.choice(vocab, size=rng.integers(1, 10)))
        indicators = []
        for _ in range(rng.integers(1, 5)):
            k = rng.integers(1, 3)
            indicators.append(" ".join(rng.choice(vocab, size=k)))
        n_tok = len(TOKENIZER.tokenize(text).tokens)
        weights = rng.dirichlet(np.ones(n_tok)).round(3)
        theta = None if i % 3 == 0 else float(rng.choice([0.05, 0.1, 0.2, 0.3]))
        cases.append((indicators, text, weights.tolist(), theta))
    return cases


def all_cases():
    """Fifty cases: the hand-worked ones plus generated ones; ``expected`` is None for the latter."""
    cases = [(ind, text, att, theta, want) for ind, text, att, theta, want in HAND_CASES]
    cases += [(ind, text, att, theta, None) for ind, text, att, theta in _generated_cases(50 - len(HAND_CASES))]
    return cases
