"""ROUGE-1/2/L F1, n-gram duplication rate and attention statistics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from . import losses
from .autodiff import no_grad


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: int, n_cand: int, n_ref: int) -> "RougeScore":
        p = overlap / n_cand if n_cand else 0.0
        r = overlap / n_ref if n_ref else 0.0
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)


def ngrams(tokens: Sequence[Hashable], n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def rouge_n(candidate: Sequence[Hashable], reference: Sequence[Hashable], n: int = 1) -> RougeScore:
    """Clipped n-gram overlap precision, recall and F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = Counter(ngrams(candidate, n))
    ref = Counter(ngrams(reference, n))
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> RougeScore:
    """Longest-common-subsequence precision, recall and F1."""
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


def duplication_rate(tokens: Sequence[Hashable], n: int) -> float:
    """Share of n-grams that repeat an earlier one: 1 - unique / total."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = ngrams(tokens, n)
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


@dataclass
class AttentionStats:
    local_variance: np.ndarray  # per step, median-centred
    gate_mean: np.ndarray  # per step
    accumulated: np.ndarray  # A_i per source position
    gap: np.ndarray  # g_i = A_i - max_t a^r_ti


def attention_stats(refined, gates=None) -> AttentionStats:
    """Statistics of one example's (T, D) refined attention, via the loss definitions."""
    refined = np.asarray(refined, dtype=np.float64)
    with no_grad():
        trace = losses.DecodeTrace(refined)
        var = losses.local_variance_per_step(trace).data[0]
        acc, gap = (x.data[0] for x in losses.accumulated_gap(trace))
    gate_mean = np.ones(refined.shape[0]) if gates is None else np.asarray(gates).mean(axis=-1)
    return AttentionStats(var, gate_mean, acc, gap)
