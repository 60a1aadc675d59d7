"""Ranking metrics: average precision, ROC AUC and d-prime.

Per-class values are averaged over the classes that have both positive
and negative examples; classes lacking either are listed as skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class EvaluationError(ValueError):
    pass


def _as_vectors(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def average_precision(scores, labels) -> float:
    """Mean of precision@rank over the ranks of the positives.

    Scores are sorted descending; equal scores keep their original order.
    Returns NaN when there are no positives.
    """
    s, y = _as_vectors(scores, labels)
    if not y.any():
        return math.nan
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def _average_ranks(s):
    # 1-based ranks, ties get the mean of the ranks they span
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half.  Returns NaN if either class is absent.
    """
    s, y = _as_vectors(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    r = _average_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# Acklam's rational approximation of the normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Standard normal quantile.

    Acklam's piecewise rational approximation (relative error below
    1.2e-9) followed by one Halley step against ``math.erfc``, which
    brings the result to near machine precision.
    """
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValueError(f"probability must be in [0, 1], got {p}")
    if p > 0.5:
        # 1 - p is exact here and the lower tail avoids cancellation in erfc
        return -norm_ppf(1.0 - p)
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def d_prime(auc_value: float) -> float:
    """``sqrt(2) * Phi^-1(auc)``; +/-inf at AUC 1 and 0."""
    return math.sqrt(2.0) * norm_ppf(auc_value)


@dataclass
class ClassMetrics:
    ap: float
    auc: float
    d_prime: float


@dataclass
class MetricsReport:
    per_class: list  # ClassMetrics or None for skipped classes
    mAP: float
    AUC: float
    d_prime: float
    skipped_classes: list = field(default_factory=list)
    infinite_d_prime: list = field(default_factory=list)

    @property
    def num_classes(self):
        return len(self.per_class)

    def to_keyvalue(self) -> str:
        lines = [
            f"num_classes={self.num_classes}",
            f"macro.mAP={self.mAP!r}",
            f"macro.AUC={self.AUC!r}",
            f"macro.d_prime={self.d_prime!r}",
            "skipped=" + ",".join(str(k) for k in self.skipped_classes),
            "infinite_d_prime=" + ",".join(str(k) for k in self.infinite_d_prime),
        ]
        for k, m in enumerate(self.per_class):
            if m is None:
                continue
            lines += [f"class.{k}.AP={m.ap!r}", f"class.{k}.AUC={m.auc!r}",
                      f"class.{k}.d_prime={m.d_prime!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_keyvalue(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())

        def ints(s):
            return [int(t) for t in s.split(",") if t]

        K = int(kv["num_classes"])
        per_class = []
        for k in range(K):
            if f"class.{k}.AP" in kv:
                per_class.append(ClassMetrics(float(kv[f"class.{k}.AP"]),
                                              float(kv[f"class.{k}.AUC"]),
                                              float(kv[f"class.{k}.d_prime"])))
            else:
                per_class.append(None)
        return cls(per_class, float(kv["macro.mAP"]), float(kv["macro.AUC"]),
                   float(kv["macro.d_prime"]), ints(kv["skipped"]), ints(kv["infinite_d_prime"]))

    def to_table(self, class_names: Optional[list] = None) -> str:
        rows = [f"{'class':>12}  {'AP':>7}  {'AUC':>7}  {'d-prime':>8}"]
        for k, m in enumerate(self.per_class):
            name = class_names[k] if class_names else str(k)
            if m is None:
                rows.append(f"{name:>12}  {'skipped':>7}")
            else:
                rows.append(f"{name:>12}  {m.ap:7.4f}  {m.auc:7.4f}  {m.d_prime:8.4f}")
        rows.append(f"{'macro':>12}  {self.mAP:7.4f}  {self.AUC:7.4f}  {self.d_prime:8.4f}")
        if self.skipped_classes:
            rows.append(f"skipped classes: {self.skipped_classes}")
        return "\n".join(rows)


def evaluate(scores, labels) -> MetricsReport:
    """Per-class and macro metrics for an (N, K) score table.

    The macro d-prime is computed from the macro AUC, the convention under
    which published AUC and d-prime columns agree.
    """
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.ndim != 2 or S.shape != Y.shape:
        raise EvaluationError(f"scores {S.shape} and labels {Y.shape} must be equal 2-D shapes")
    if S.shape[0] == 0:
        raise EvaluationError("empty score table")
    if not np.isin(Y, (0, 1)).all():
        raise EvaluationError("labels must be binary")
    Y = Y.astype(bool)
    per_class, skipped, infinite = [], [], []
    for k in range(S.shape[1]):
        y = Y[:, k]
        if y.all() or not y.any():
            per_class.append(None)
            skipped.append(k)
            continue
        a = auc(S[:, k], y)
        d = d_prime(a)
        if math.isinf(d):
            infinite.append(k)
        per_class.append(ClassMetrics(average_precision(S[:, k], y), a, d))
    kept = [m for m in per_class if m is not None]
    if not kept:
        raise EvaluationError("every class lacks positives or negatives")
    mAP = float(np.mean([m.ap for m in kept]))
    AUC = float(np.mean([m.auc for m in kept]))
    return MetricsReport(per_class, mAP, AUC, d_prime(AUC), skipped, infinite)
