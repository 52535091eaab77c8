"""Confusion-matrix quality metrics, slip-through, ROC-AUC, and report tables.

Undefined ratios (zero denominators) surface as NaN rather than silently
becoming 0, so degenerate runs stay visible in reports. AUC uses the
rank-statistic formulation with ties counting one half, which is exact and
matches the brute-force pairwise definition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class Quality:
    precision: float
    recall: float
    f1: float
    slip_through: float


def confusion(scores: np.ndarray, labels: np.ndarray,
              threshold: float) -> ConfusionMatrix:
    """Tally predictions at a fixed threshold: defective iff score >= t."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(
            f"scores and labels differ in length: {scores.shape} vs {labels.shape}"
        )
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def quality(cm: ConfusionMatrix) -> Quality:
    """Precision, recall, F1, and slip-through (= 1 - recall, exactly).

    Ratios with empty denominators are NaN, never 0.
    """
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp > 0 else math.nan
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn > 0 else math.nan
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        f1 = math.nan
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return Quality(precision=precision, recall=recall, f1=f1,
                   slip_through=1.0 - recall)


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic; tied scores
    contribute one half per positive-negative pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC requires both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class EvalReport:
    """All quality and efficiency numbers for one evaluated run."""

    cm: ConfusionMatrix
    precision: float
    recall: float
    f1: float
    auc: float
    slip_through: float
    threshold: float
    compression: float | None = None
    time_improvement: float | None = None

    def to_dict(self) -> dict:
        def clean(x):
            return None if (x is None or (isinstance(x, float) and math.isnan(x))) else x

        return {
            "confusion_matrix": self.cm.to_dict(),
            "precision": clean(self.precision),
            "recall": clean(self.recall),
            "f1": clean(self.f1),
            "auc": clean(self.auc),
            "slip_through": clean(self.slip_through),
            "threshold": self.threshold,
            "compression": clean(self.compression),
            "time_improvement": clean(self.time_improvement),
        }


def evaluate_scores(scores: np.ndarray, labels: np.ndarray,
                    threshold: float = 0.2) -> EvalReport:
    """Confusion matrix plus all derived metrics at one threshold."""
    cm = confusion(scores, labels, threshold)
    q = quality(cm)
    return EvalReport(cm=cm, precision=q.precision, recall=q.recall, f1=q.f1,
                      auc=auc(scores, labels), slip_through=q.slip_through,
                      threshold=threshold)


def report(run: EvalReport, baseline: EvalReport | None = None,
           run_params=None, baseline_params=None,
           run_seconds: float | None = None,
           baseline_seconds: float | None = None) -> EvalReport:
    """Attach the comparison columns (compression, training-time improvement)
    to a run's report when a baseline run is supplied."""
    if baseline is None:
        return run
    if run_params is None or baseline_params is None:
        raise ValueError("comparison columns need both models' parameter reports")
    compression = baseline_params.n_c_f / run_params.n_c_f
    improvement = None
    if run_seconds is not None and baseline_seconds is not None:
        improvement = (baseline_seconds - run_seconds) / baseline_seconds * 100.0
    return EvalReport(cm=run.cm, precision=run.precision, recall=run.recall,
                      f1=run.f1, auc=run.auc, slip_through=run.slip_through,
                      threshold=run.threshold, compression=compression,
                      time_improvement=improvement)


def mean_std_format(values: list[float]) -> str:
    """Render a multi-seed metric as "mean ± one standard deviation"."""
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return "n/a"
    return f"{arr.mean():.3f} ± {arr.std():.3f}"


_TABLE_COLUMNS = ["ranks", "precision", "recall", "f1", "compression",
                  "training time improvement"]


def format_table(rows: list[dict]) -> str:
    """Aligned plain-text table, one row per rank configuration plus the
    dense baseline; column order: ranks, precision, recall, F1, compression,
    training-time improvement."""
    header = _TABLE_COLUMNS
    cells = [[str(r.get(c, "-")) for c in header] for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    def line(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


def report_to_json(rep: EvalReport) -> str:
    return json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
