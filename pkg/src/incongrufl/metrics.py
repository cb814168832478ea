"""Multilabel classification metrics and BLEU-4."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

BLEU_SMOOTHING = "add-epsilon(1e-9)"
AVERAGING = "macro"


class MetricUndefinedError(ValueError):
    pass


@dataclass
class MetricsReport:
    auc_macro: float
    f1_macro: float
    precision_macro: float
    recall_macro: float
    per_class_accuracy: list[float]
    n_eval: int
    auc_excluded: list[int] = field(default_factory=list)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_macro(scores: np.ndarray, labels: np.ndarray, return_excluded: bool = False):
    """Mean per-class AUC over classes that have both positives and negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    aucs, excluded = [], []
    for c in range(labels.shape[1]):
        col = labels[:, c]
        if col.min() == col.max():
            excluded.append(c)
            continue
        aucs.append(auc_binary(scores[:, c], col))
    if not aucs:
        raise MetricUndefinedError("every class is degenerate in the evaluation set")
    value = float(np.mean(aucs))
    return (value, excluded) if return_excluded else value


def _predictions(scores, threshold, from_logits):
    probs = sigmoid(scores) if from_logits else np.asarray(scores, dtype=np.float64)
    return probs >= threshold


def thresholded_prf(scores, labels, threshold: float = 0.5,
                    from_logits: bool = True) -> tuple[float, float, float]:
    """Macro precision, recall and F1; any 0/0 ratio counts as 0."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = _predictions(scores, threshold, from_logits)
    y = np.asarray(labels).astype(bool)
    tp = (pred & y).sum(axis=0).astype(np.float64)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        rec = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    return float(prec.mean()), float(rec.mean()), float(f1.mean())


def per_class_accuracy(scores, labels, threshold: float = 0.5,
                       from_logits: bool = True) -> np.ndarray:
    pred = _predictions(scores, threshold, from_logits)
    return (pred == np.asarray(labels).astype(bool)).mean(axis=0)


def evaluate(logits: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    auc, excluded = roc_auc_macro(logits, labels, return_excluded=True)
    p, r, f1 = thresholded_prf(logits, labels, threshold)
    acc = per_class_accuracy(logits, labels, threshold)
    return MetricsReport(auc, f1, p, r, [float(a) for a in acc], int(len(labels)), excluded)


# BLEU ------------------------------------------------------------------------

def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _clipped(candidate, references, n):
    cand = _ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in _ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    return sum(min(c, max_ref[g]) for g, c in cand.items()), sum(cand.values())


def _closest_ref_len(c_len: int, references) -> int:
    return min((abs(len(r) - c_len), len(r)) for r in references)[1]


def _combine(matches, totals, c_len, r_len, eps):
    logp = 0.0
    for m, t in zip(matches, totals):
        p = m / t if t > 0 else 0.0
        logp += math.log(p if p > 0 else eps) / 4
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(logp)


def bleu4(candidate: Sequence, references: Sequence[Sequence], eps: float = 1e-9) -> float:
    """Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions times brevity penalty.

    Zero precisions are replaced by ``eps``; pass ``eps=0`` to disable smoothing.
    """
    if not references:
        raise ValueError("need at least one reference")
    if len(candidate) == 0:
        return 0.0
    matches, totals = zip(*(_clipped(candidate, references, n) for n in range(1, 5)))
    if eps == 0 and 0 in matches:
        return 0.0
    return _combine(matches, totals, len(candidate), _closest_ref_len(len(candidate), references), eps)


def corpus_bleu4(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
                 eps: float = 1e-9) -> float:
    """Corpus BLEU-4 with n-gram counts pooled over all sentence pairs."""
    matches = [0] * 4
    totals = [0] * 4
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        for n in range(1, 5):
            m, t = _clipped(cand, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
    if c_len == 0:
        return 0.0
    if eps == 0 and 0 in matches:
        return 0.0
    return _combine(matches, totals, c_len, r_len, eps)
