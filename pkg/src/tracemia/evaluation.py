"""Attack-quality metrics, hypothesis tests, document aggregation and PCA export.

Every metric treats a higher score as more member-like and predicts
"member" when ``score >= threshold``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .dataset import MEMBER, NON_MEMBER, atomic_write_text
from .errors import (
    DegenerateLabels,
    InsufficientSamples,
    InsufficientVectors,
    MixedLabelsWithinDocument,
    ZeroVariance,
)
from .stats import t_two_sided_p


@dataclass(frozen=True)
class LabeledEntry:
    sequence_id: str
    score: float
    label: str
    document_id: str = ""


class LabeledScores:
    def __init__(self, entries: Iterable[LabeledEntry]):
        self.entries = list(entries)
        for e in self.entries:
            if e.label not in (MEMBER, NON_MEMBER):
                raise ValueError(f"entry {e.sequence_id!r} has label {e.label!r}")
            if not math.isfinite(e.score):
                raise ValueError(f"entry {e.sequence_id!r} has non-finite score")

    @classmethod
    def from_arrays(cls, member_scores: Sequence[float], non_member_scores: Sequence[float]) -> "LabeledScores":
        entries = [LabeledEntry(f"m{i}", float(s), MEMBER) for i, s in enumerate(member_scores)]
        entries += [LabeledEntry(f"n{i}", float(s), NON_MEMBER) for i, s in enumerate(non_member_scores)]
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def member_scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label == MEMBER], dtype=float)

    @property
    def non_member_scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label == NON_MEMBER], dtype=float)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        pos, neg = self.member_scores, self.non_member_scores
        if len(pos) == 0 or len(neg) == 0:
            raise DegenerateLabels(f"need both labels, got {len(pos)} members and {len(neg)} non-members")
        return pos, neg


def _rates(pos: np.ndarray, neg: np.ndarray, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """TPR and FPR of the rule ``score >= t`` for each threshold."""
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")
    return tp / len(pos), fp / len(neg)


def roc_points(scores: LabeledScores) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` from the strictest threshold (+inf) down to the loosest."""
    pos, neg = scores.split()
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([pos, neg]))[::-1]])
    tpr, fpr = _rates(pos, neg, thresholds)
    return [(float(f), float(t), float(th)) for f, t, th in zip(fpr, tpr, thresholds)]


def auc_trapezoid(scores: LabeledScores) -> float:
    pts = roc_points(scores)
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(1, len(values) + 1)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=ranks)
    return (sums / counts)[inverse]


def auc(scores: LabeledScores) -> float:
    """Mann-Whitney statistic: P(member > non-member) + 0.5 P(tie)."""
    pos, neg = scores.split()
    ranks = _average_ranks(np.concatenate([pos, neg]))
    n1, n0 = len(pos), len(neg)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def _candidate_thresholds(values: np.ndarray) -> np.ndarray:
    distinct = np.unique(values)
    mids = (distinct[1:] + distinct[:-1]) / 2.0
    return np.unique(np.concatenate([[distinct[0] - 1.0], distinct, mids, [distinct[-1] + 1.0]]))


def balanced_accuracy(scores: LabeledScores) -> tuple[float, float]:
    """Best ``(TPR + TNR) / 2`` over thresholds, and the smallest threshold attaining it.

    The threshold is tuned on the same data it is scored on, so this is an
    optimistic figure.
    """
    pos, neg = scores.split()
    thresholds = _candidate_thresholds(np.concatenate([pos, neg]))
    tpr, fpr = _rates(pos, neg, thresholds)
    acc = (tpr + (1.0 - fpr)) / 2.0
    best = acc.max()
    # thresholds are ascending, so argmax over the tolerance mask gives the smallest
    i = int(np.argmax(acc >= best - 1e-12))
    return float(acc[i]), float(thresholds[i])


def tpr_at_fpr(scores: LabeledScores, fpr_budget: float = 0.05) -> float:
    """Highest empirical TPR among thresholds whose empirical FPR is within budget."""
    if not 0.0 <= fpr_budget <= 1.0:
        raise ValueError("fpr_budget must lie in [0, 1]")
    pts = roc_points(scores)
    return max(t for f, t, _ in pts if f <= fpr_budget + 1e-12)


def welch_t_test(member_scores: Sequence[float], non_member_scores: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch t-test; returns ``(t, p_value)``."""
    a = np.asarray(member_scores, dtype=float)
    b = np.asarray(non_member_scores, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples(f"need >= 2 scores per group, got {len(a)} and {len(b)}")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0.0:
        raise ZeroVariance("both groups have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    # shares of the variance keep the squares away from underflow
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra * ra / (len(a) - 1) + rb * rb / (len(b) - 1))
    return t, t_two_sided_p(t, df)


def effect_size(member_scores: Sequence[float], non_member_scores: Sequence[float]) -> float:
    """Cohen's d with the pooled standard deviation."""
    a = np.asarray(member_scores, dtype=float)
    b = np.asarray(non_member_scores, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples(f"need >= 2 scores per group, got {len(a)} and {len(b)}")
    pooled = ((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2)
    if pooled == 0.0:
        raise ZeroVariance("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def aggregate_documents(scores: LabeledScores) -> LabeledScores:
    """One entry per document: the mean of its sequences' scores."""
    groups: OrderedDict[str, list[LabeledEntry]] = OrderedDict()
    for e in scores.entries:
        if not e.document_id:
            raise ValueError(f"entry {e.sequence_id!r} has no document_id")
        groups.setdefault(e.document_id, []).append(e)
    out = []
    for doc, entries in groups.items():
        labels = {e.label for e in entries}
        if len(labels) > 1:
            raise MixedLabelsWithinDocument(f"document {doc!r} mixes labels")
        out.append(LabeledEntry(doc, math.fsum(e.score for e in entries) / len(entries),
                                labels.pop(), doc))
    return LabeledScores(out)


@dataclass
class PCAResult:
    points: np.ndarray  # (n, components)
    explained_variance_ratio: np.ndarray
    components: np.ndarray  # (components, dim), rows are unit loadings
    mean: np.ndarray


def pca_project(vectors: Sequence[np.ndarray], components: int = 2) -> PCAResult:
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientVectors("PCA needs at least two vectors")
    n, dim = X.shape
    if not 1 <= components <= min(dim, n - 1):
        raise ValueError(f"components must lie in [1, {min(dim, n - 1)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    total = eigvals.sum()
    W = eigvecs[:, :components].T.copy()
    for row in W:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratios = eigvals[:components] / total if total > 0 else np.zeros(components)
    return PCAResult(Xc @ W.T, ratios, W, mean)


@dataclass
class MetricsReport:
    balanced_acc: float
    auc: float
    tpr_at_fpr: float
    fpr_budget: float
    p_value: float | None
    effect_size: float | None
    n_member: int
    n_non_member: int
    best_threshold: float
    t_statistic: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(scores: LabeledScores, fpr_budget: float = 0.05) -> MetricsReport:
    pos, neg = scores.split()
    acc, threshold = balanced_accuracy(scores)
    try:
        t, p = welch_t_test(pos, neg)
    except (InsufficientSamples, ZeroVariance):
        t = p = None
    try:
        d = effect_size(pos, neg)
    except (InsufficientSamples, ZeroVariance):
        d = None
    return MetricsReport(
        balanced_acc=acc,
        auc=auc(scores),
        tpr_at_fpr=tpr_at_fpr(scores, fpr_budget),
        fpr_budget=fpr_budget,
        p_value=p,
        effect_size=d,
        n_member=len(pos),
        n_non_member=len(neg),
        best_threshold=threshold,
        t_statistic=t,
    )


def write_metrics(report: MetricsReport, path: str | os.PathLike, **extra) -> None:
    payload = {**extra, **report.to_json()}
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_roc_csv(scores: LabeledScores, path: str | os.PathLike) -> None:
    rows = [(repr(th), repr(f), repr(t)) for f, t, th in roc_points(scores)]
    atomic_write_text(path, _csv_text(("threshold", "fpr", "tpr"), rows))


PCA_GROUPS = ("recall_anchor", "inference_anchor", MEMBER, NON_MEMBER)


def write_pca_csv(ids: Sequence[str], groups: Sequence[str], vectors: Sequence[np.ndarray],
                  path: str | os.PathLike) -> PCAResult:
    for g in groups:
        if g not in PCA_GROUPS:
            raise ValueError(f"unknown PCA group {g!r}")
    result = pca_project(vectors, 2)
    rows = [(i, g, repr(float(p[0])), repr(float(p[1]))) for i, g, p in zip(ids, groups, result.points)]
    atomic_write_text(path, _csv_text(("id", "group", "pc1", "pc2"), rows))
    return result
