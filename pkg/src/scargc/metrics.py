"""Surface-based evaluation of vertex labellings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .mesh import VertexLabels

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "dice_scar", "gdice")


def _arr(labels) -> np.ndarray:
    return np.asarray(labels.labels if isinstance(labels, VertexLabels) else labels).astype(np.int64)


def _pair(pred, gt):
    a, b = _arr(pred), _arr(gt)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt, c: int = 1) -> float:
    """``2|A & B| / (|A| + |B|)`` over class-``c`` vertices; 1.0 when both sets are empty."""
    a, b = _pair(pred, gt)
    A, B = a == c, b == c
    denom = A.sum() + B.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.count_nonzero(A & B) / denom)


def generalized_dice(pred, gt, labels=(0, 1)) -> float:
    a, b = _pair(pred, gt)
    if not (np.isin(a, labels).all() and np.isin(b, labels).all()):
        raise ValueError(f"labels outside {labels}")
    num = sum(np.count_nonzero((a == k) & (b == k)) for k in labels)
    den = sum(np.count_nonzero(a == k) + np.count_nonzero(b == k) for k in labels)
    return float(2 * num / den) if den else 1.0


@dataclass(frozen=True)
class EvalReport:
    """Per-case scores. A ratio with an empty denominator is ``None``."""
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    dice_scar: float
    gdice: float

    def to_dict(self):
        return asdict(self)


def _ratio(num, den):
    return None if den == 0 else num / den


def confusion_stats(pred, gt) -> EvalReport:
    a, b = _pair(pred, gt)
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ValueError("binary labels required")
    tp = int(np.count_nonzero((a == 1) & (b == 1)))
    tn = int(np.count_nonzero((a == 0) & (b == 0)))
    fp = int(np.count_nonzero((a == 1) & (b == 0)))
    fn = int(np.count_nonzero((a == 0) & (b == 1)))
    return EvalReport(tp, tn, fp, fn,
                      accuracy=_ratio(tp + tn, tp + tn + fp + fn),
                      sensitivity=_ratio(tp, tp + fn),
                      specificity=_ratio(tn, tn + fp),
                      dice_scar=dice(a, b, 1),
                      gdice=generalized_dice(a, b))


def correlation(x, y) -> tuple[float, float, float]:
    """(Pearson r, Spearman rho with average ranks for ties, R^2 of the least-squares line y ~ x)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 pairs")
    if x.std() == 0 or y.std() == 0:
        raise ValueError("zero variance series")

    def pearson(u, v):
        du, dv = u - u.mean(), v - v.mean()
        return float((du * dv).sum() / math.sqrt((du * du).sum() * (dv * dv).sum()))

    r = pearson(x, y)
    rho = pearson(rankdata(x), rankdata(y))
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = float(1.0 - (resid ** 2).sum() / ((y - y.mean()) ** 2).sum())
    return r, rho, r2


def summarize(reports) -> dict:
    """Mean and sample SD of each metric across cases, skipping undefined entries."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            out[name] = {"mean": None, "sd": None, "n": 0}
            continue
        v = np.array(vals, dtype=np.float64)
        out[name] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": len(v)}
    return out


def _fmt(stat) -> str:
    if stat["mean"] is None:
        return "undefined"
    return f"{stat['mean']:.3f} +- {stat['sd']:.3f}"


def format_table(summary_by_method: dict) -> str:
    """One row per method, one column per metric (mean +- SD)."""
    width = max([len("method")] + [len(m) for m in summary_by_method])
    rows = ["\t".join(["method".ljust(width), *METRIC_NAMES])]
    for method, summ in summary_by_method.items():
        rows.append("\t".join([method.ljust(width), *(_fmt(summ[n]) for n in METRIC_NAMES)]))
    return "\n".join(rows) + "\n"


def write_records(path, records) -> None:
    """Line-oriented records: ``key=value`` pairs separated by tabs, one record per line."""
    lines = []
    for rec in records:
        lines.append("\t".join(f"{k}={'NA' if v is None else v}" for k, v in rec.items()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
