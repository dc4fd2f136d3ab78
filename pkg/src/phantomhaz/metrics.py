"""Horizon classification metrics from survival scores, with bootstrap SDs.

AUROC uses the rank statistic with the tie-pair convention (tied score pairs
count one half). AUPRC integrates the precision-recall curve stepwise over
distinct score thresholds, without interpolation; with constant scores it
therefore equals the prevalence. Episodes censored before the horizon carry
no label and are excluded upstream, with the exclusion count surfaced in the
report so the denominator is visible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "UndefinedMetricError",
    "auroc",
    "auprc",
    "bootstrap_sd",
    "MetricReport",
    "evaluate_horizon",
]


class UndefinedMetricError(ValueError):
    """Metric undefined (single-class input)."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-d arrays")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise UndefinedMetricError("both classes must be present")
    return scores, labels.astype(bool), n_pos


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count half."""
    scores, labels, n_pos = _check(scores, labels)
    n_neg = len(labels) - n_pos
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # midranks: average rank within each tie group (1-based)
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Average precision: stepwise sum of precision at each recall increment."""
    scores, labels, n_pos = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # walk distinct thresholds in descending order
    out = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i : j + 1].sum())
        seen += j - i + 1
        recall = tp / n_pos
        precision = tp / seen
        out += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return out


def bootstrap_sd(scores, labels, metric, n_boot: int = 200, seed: int = 0):
    """SD of a metric over bootstrap resamples; single-class resamples skipped.

    Returns (sd, n_skipped). Deterministic given the seed.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n = len(scores)
    if n < 2:
        raise ValueError("need at least two observations")
    rng = np.random.default_rng(seed)
    values = []
    skipped = 0
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric(scores[idx], labels[idx]))
        except UndefinedMetricError:
            skipped += 1
    if len(values) < 2:
        raise UndefinedMetricError("too few valid bootstrap resamples")
    return float(np.std(values, ddof=1)), skipped


@dataclass(frozen=True)
class MetricReport:
    metric: str
    horizon: float
    value: float
    bootstrap_sd: float
    n: int
    n_excluded: int
    n_boot_skipped: int = 0

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "horizon": self.horizon,
            "value": self.value,
            "bootstrap_sd": self.bootstrap_sd,
            "n": self.n,
            "n_excluded": self.n_excluded,
            "n_boot_skipped": self.n_boot_skipped,
        }


def evaluate_horizon(
    scores, labels, horizon: float, n_excluded: int = 0, n_boot: int = 200, seed: int = 0
) -> list[MetricReport]:
    """AUROC and AUPRC reports with bootstrap SDs for one horizon."""
    out = []
    for name, fn in (("auroc", auroc), ("auprc", auprc)):
        sd, skipped = bootstrap_sd(scores, labels, fn, n_boot=n_boot, seed=seed)
        out.append(
            MetricReport(
                metric=name,
                horizon=horizon,
                value=fn(scores, labels),
                bootstrap_sd=sd,
                n=len(scores),
                n_excluded=n_excluded,
                n_boot_skipped=skipped,
            )
        )
    return out
