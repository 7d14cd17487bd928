"""Ranking, calibration and clustering metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .diffcore.ops import ce_value
from .errors import ContractError, DimensionError

MAX_CLUSTERS = 16


class UndefinedMetricError(ContractError):
    pass


def auc(scores, labels):
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"auc: scores {scores.shape} vs labels {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(probs, labels):
    """Mean binary cross-entropy; shares its definition with the training loss."""
    return ce_value(np.asarray(probs, dtype=np.float64).ravel(), np.asarray(labels, dtype=np.float64).ravel())


def contingency(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"partitions differ in length: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, truth):
    """Normalized mutual information, arithmetic-mean normalization; 0 if either side is constant."""
    table = contingency(assignments, truth)
    n = table.sum()
    if n == 0:
        raise ContractError("nmi of empty partitions")
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return float(min(1.0, max(0.0, mi / ((ha + hb) / 2.0))))


def cluster_accuracy(assignments, truth):
    """Best fraction correct over injective cluster -> truth-label mappings."""
    table = contingency(assignments, truth)
    if table.shape[0] > MAX_CLUSTERS:
        raise ContractError(f"cluster_accuracy supports at most {MAX_CLUSTERS} clusters, got {table.shape[0]}")
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / table.sum())


def usage_entropy(assignments, m):
    """Entropy (nats) of the codebook usage histogram."""
    counts = np.bincount(np.asarray(assignments, dtype=np.int64), minlength=m)
    return _entropy(counts) if counts.sum() else 0.0


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    n: int
    nmi: float | None = None
    cluster_accuracy: float | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metrics_report(probs, labels, assignments=None, truth=None):
    rep = MetricsReport(auc(probs, labels), logloss(probs, labels), int(len(labels)))
    if assignments is not None and truth is not None:
        rep.nmi = nmi(assignments, truth)
        if len(np.unique(assignments)) <= MAX_CLUSTERS:
            rep.cluster_accuracy = cluster_accuracy(assignments, truth)
    return rep
