"""Binary classification metrics and multi-seed report aggregation.

AUROC uses the rank-sum statistic with midranks for ties, so it is exactly
the probability that a random positive outscores a random negative (ties
count half) and is invariant under strictly monotone score transforms.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

CSV_FIELDS = ("seed", "n", "accuracy", "f1", "auroc",
              "tp", "fp", "tn", "fn")


@dataclass
class EvalReport:
    accuracy: float
    f1: float
    auroc: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    seed: int | None = None

    def to_text(self) -> str:
        lines = [
            f"accuracy: {self.accuracy:.4f}",
            f"f1: {self.f1:.4f}",
            f"auroc: {self.auroc:.4f}",
            f"counts: tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn}",
            f"n: {self.n}",
        ]
        if self.seed is not None:
            lines.append(f"seed: {self.seed}")
        return "\n".join(lines) + "\n"

    def csv_row(self) -> list:
        return [self.seed, self.n, self.accuracy, self.f1, self.auroc,
                self.tp, self.fp, self.tn, self.fn]


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs both classes present")
    ranks = midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(scores, labels, seed: int | None = None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ContractError("empty score list")
    if scores.shape != labels.shape:
        raise ContractError(
            f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be binary 0/1")
    labels = labels.astype(np.int64)
    preds = (scores >= 0.5).astype(np.int64)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    accuracy = (tp + tn) / len(labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return EvalReport(accuracy=accuracy, f1=f1,
                      auroc=auroc(scores, labels),
                      tp=tp, fp=fp, tn=tn, fn=fn, n=len(labels), seed=seed)


def subject_fold(subject: str, n_folds: int = 5) -> int:
    """Stable hash fold for subject-disjoint splits."""
    return zlib.crc32(str(subject).encode("utf-8")) % n_folds


def mean_std_reports(reports) -> dict:
    """Mean and std of each metric over several runs (e.g. seeds)."""
    reports = list(reports)
    if not reports:
        raise ContractError("no reports to aggregate")
    out = {}
    for name in ("accuracy", "f1", "auroc"):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(vals.mean()), float(vals.std()))
    out["n_runs"] = len(reports)
    return out
