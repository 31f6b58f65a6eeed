"""Overlap metrics and summary reports."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import DimensionError, as_mask

__all__ = [
    "jaccard",
    "dice",
    "Overlap",
    "overlap",
    "dice_from_jaccard",
    "jaccard_from_dice",
    "Summary",
    "report",
    "write_scores_csv",
    "write_trace_csv",
    "write_report_csv",
]


@dataclass(frozen=True)
class Overlap:
    jaccard: float
    dice: float
    degenerate: bool


def _counts(a, b):
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def overlap(a, b):
    """Jaccard and Dice of two masks; two empty masks score 1 and are flagged."""
    inter, na, nb = _counts(a, b)
    if na + nb == 0:
        return Overlap(1.0, 1.0, True)
    j = inter / (na + nb - inter)
    # Dice goes through the Jaccard identity so the two agree bit for bit
    return Overlap(j, dice_from_jaccard(j), False)


def jaccard(a, b):
    """``|a & b| / |a | b|``; 1.0 when both masks are empty."""
    return overlap(a, b).jaccard


def dice(a, b):
    """``2 |a & b| / (|a| + |b|)``; 1.0 when both masks are empty."""
    return overlap(a, b).dice


def dice_from_jaccard(j):
    j = float(j)
    if not 0.0 <= j <= 1.0:
        raise ValueError(f"Jaccard score must lie in [0, 1], got {j}")
    return 2.0 * j / (1.0 + j)


def jaccard_from_dice(s):
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"Dice score must lie in [0, 1], got {s}")
    return s / (2.0 - s)


def _stats(x):
    x = np.asarray(x, dtype=np.float64)
    std = float(x.std(ddof=1)) if len(x) > 1 else 0.0
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return dict(n=len(x), mean=float(x.mean()), std=std, median=float(med), q1=float(q1), q3=float(q3))


@dataclass
class Summary:
    """Overall and per-category score statistics (sample standard deviation)."""

    n: int
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    categories: dict = field(default_factory=dict)
    n_degenerate: int = 0


def report(results):
    """Summarize ``(id, score, category)`` or ``(id, score, category, degenerate)`` rows.

    Rows flagged degenerate are left out of the statistics and counted in
    ``n_degenerate``.
    """
    rows = list(results)
    if not rows:
        raise ValueError("report needs at least one result")
    kept = [r for r in rows if not (len(r) > 3 and r[3])]
    if not kept:
        raise ValueError("every result is degenerate")
    overall = _stats([r[1] for r in kept])
    cats = {}
    for r in kept:
        cats.setdefault(r[2], []).append(r[1])
    categories = {c: _stats(v) for c, v in sorted(cats.items())}
    return Summary(**overall, categories=categories, n_degenerate=len(rows) - len(kept))


def write_scores_csv(path, rows):
    """Per-example rows ``(id, category, jaccard, dice)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "category", "jaccard", "dice"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "mean_jaccard"])
        for i, s in enumerate(trace):
            w.writerow([i, repr(float(s))])


def write_report_csv(path, summary):
    """One ``all`` row then one row per category."""
    cols = ["n", "mean", "std", "median", "q1", "q3"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group"] + cols)
        w.writerow(["all"] + [getattr(summary, c) for c in cols])
        for cat, st in summary.categories.items():
            w.writerow([cat] + [st[c] for c in cols])
