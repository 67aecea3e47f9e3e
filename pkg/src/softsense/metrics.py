"""Per-task AUROC and recall, with absent values for single-class splits."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

ABSENT = "--"


def auroc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUROC with midranks: P(s+ > s-) + 0.5 P(s+ == s-).

    Returns None when either class is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def recall(scores, labels, threshold: float = 0.5) -> Optional[float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    return float(np.sum(scores[labels] >= threshold) / n_pos)


def roc_points(scores, labels):
    """ROC vertices ``(fpr, tpr)`` from the highest threshold down, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    n_pos, n_neg = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, s[last_of_run]]
    return fpr, tpr, thresholds


@dataclass
class TaskMetrics:
    auroc: list  # per task, None when undefined
    recall: list
    pos: list
    neg: list
    auroc_std: list = field(default_factory=list)
    recall_std: list = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.auroc)

    def mean_auroc(self) -> Optional[float]:
        vals = [a for a in self.auroc if a is not None]
        return float(np.mean(vals)) if vals else None

    def mean_recall(self) -> Optional[float]:
        vals = [r for r in self.recall if r is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskMetrics":
        return cls(**d)


def task_metrics(scores, labels, mask=None, threshold: float = 0.5) -> TaskMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.ones_like(scores) if mask is None else np.asarray(mask)
    out = TaskMetrics([], [], [], [])
    for j in range(scores.shape[1]):
        keep = mask[:, j] > 0
        s, y = scores[keep, j], labels[keep, j] > 0.5
        out.auroc.append(auroc(s, y))
        out.recall.append(recall(s, y, threshold))
        out.pos.append(int(y.sum()))
        out.neg.append(int((~y).sum()))
    return out


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def metrics_report(per_seed: list) -> TaskMetrics:
    """Across-seed mean and population std per task; absent values are skipped."""
    if not per_seed:
        raise ValueError("metrics_report needs at least one seed")
    M = per_seed[0].num_tasks
    out = TaskMetrics([], [], [], [], [], [])
    for j in range(M):
        a_mean, a_std = _mean_std([m.auroc[j] for m in per_seed])
        r_mean, r_std = _mean_std([m.recall[j] for m in per_seed])
        out.auroc.append(a_mean)
        out.auroc_std.append(a_std)
        out.recall.append(r_mean)
        out.recall_std.append(r_std)
        out.pos.append(per_seed[0].pos[j])
        out.neg.append(per_seed[0].neg[j])
    return out


def _fmt(v, std=None):
    if v is None:
        return ABSENT
    if std is None:
        return repr(float(v))
    return f"{v:.3f}±{std:.3f}"


def format_table(m: TaskMetrics) -> str:
    """Aligned plain-text table, one row per task; absent values print as ``--``."""
    with_std = bool(m.auroc_std)
    header = ["task", "auroc", "recall", "pos", "neg"]
    rows = []
    for j in range(m.num_tasks):
        a_std = m.auroc_std[j] if with_std else None
        r_std = m.recall_std[j] if with_std else None
        rows.append(
            [
                f"Task-{j + 1}",
                _fmt(m.auroc[j], a_std),
                _fmt(m.recall[j], r_std),
                str(m.pos[j]),
                str(m.neg[j]),
            ]
        )
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
    return "\n".join(lines)


def write_metrics_csv(m: TaskMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "auroc", "recall", "pos", "neg"])
        for j in range(m.num_tasks):
            w.writerow([j + 1, _fmt(m.auroc[j]), _fmt(m.recall[j]), m.pos[j], m.neg[j]])


def read_metrics_csv(path) -> TaskMetrics:
    out = TaskMetrics([], [], [], [])
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.auroc.append(None if row["auroc"] == ABSENT else float(row["auroc"]))
            out.recall.append(None if row["recall"] == ABSENT else float(row["recall"]))
            out.pos.append(int(row["pos"]))
            out.neg.append(int(row["neg"]))
    return out
