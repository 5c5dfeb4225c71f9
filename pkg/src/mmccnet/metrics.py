"""Confusion-based metrics, Hausdorff distance, ROC-AUC and run statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRIC_KEYS = ("accuracy", "precision", "recall", "dice", "iou")

# two-sided 95% critical values of Student's t, df = 1..30
T_TABLE_975 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)
# beyond the table the next lower tabulated df is used (conservative)
_T_TAIL = ((40, 2.021), (60, 2.000), (120, 1.980))
_Z_975 = 1.960


def t_critical(df: int) -> float:
    if df < 1:
        raise ValueError("degrees of freedom must be at least 1")
    if df <= len(T_TABLE_975):
        return T_TABLE_975[df - 1]
    value = T_TABLE_975[-1]
    for edge, t in _T_TAIL:
        if df >= edge:
            value = t
    return _Z_975 if df > 1000 else value


def _array(x) -> np.ndarray:
    return np.asarray(x.data if hasattr(x, "node") else x)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(pred_prob, mask, threshold: float = 0.5) -> ConfusionCounts:
    """Pixel counts after binarizing ``pred_prob >= threshold``."""
    p = _array(pred_prob)
    m = _array(mask)
    if p.shape != m.shape:
        raise ValueError(f"prediction shape {p.shape} does not match mask shape {m.shape}")
    pos = p >= threshold
    truth = m >= 0.5
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    # 0/0 means both sets involved are empty, which is a perfect score
    return 1.0 if den == 0 else num / den


def basic_metrics(c: ConfusionCounts) -> dict[str, float]:
    if c.total == 0:
        raise ValueError("confusion counts cover no pixels")
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": _ratio(c.tp, c.tp + c.fp),
        "recall": _ratio(c.tp, c.tp + c.fn),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
    }


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


# -- Hausdorff ------------------------------------------------------------------


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 8-neighbour outside the mask (or image)."""
    m = _array(mask).astype(bool)
    m2 = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    padded = np.pad(m2, 1, constant_values=False)
    interior = np.ones_like(m2)
    h, w = m2.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            interior &= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return m2 & ~interior


def _directed(a: np.ndarray, b: np.ndarray) -> int:
    """``max_a min_b |a - b|^2`` on integer coordinates, chunked to bound memory."""
    best = 0
    for start in range(0, len(a), 1024):
        chunk = a[start : start + 1024]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        best = max(best, int(d2.min(axis=1).max()))
    return best


def hausdorff_distance(mask_a, mask_b) -> float:
    """Symmetric Hausdorff distance in pixels between the masks' boundaries.

    Both empty gives 0; exactly one empty gives the image diagonal ``hypot(H, W)``.
    """
    a = _array(mask_a)
    b = _array(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    pa = np.argwhere(boundary(a)).astype(np.int64)
    pb = np.argwhere(boundary(b)).astype(np.int64)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        h, w = a.shape[-2:]
        return math.hypot(h, w)
    return float(np.sqrt(max(_directed(pa, pb), _directed(pb, pa))))


# -- ROC-AUC ------------------------------------------------------------------


class UndefinedMetricError(ValueError):
    pass


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    # group boundaries of tied runs
    edges = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [len(values)]))
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1..end
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc(pred_probs, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    s = _array(pred_probs).astype(np.float64).reshape(-1)
    y = _array(labels).reshape(-1) >= 0.5
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = _average_ranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# -- run-level statistics -------------------------------------------------------


@dataclass(frozen=True)
class RunStatistics:
    values: tuple[float, ...]
    mean: float
    sd: float
    ci_low: float
    ci_high: float

    @property
    def n(self) -> int:
        return len(self.values)

    def format_cell(self, scale: float = 100.0, digits: int = 2) -> str:
        """``mean ± SD, (low, high)`` with the given scale."""
        f = f"{{:.{digits}f}}"
        return (
            f"{f.format(self.mean * scale)} ± {f.format(self.sd * scale)}, "
            f"({f.format(self.ci_low * scale)}, {f.format(self.ci_high * scale)})"
        )


def confidence_interval(values) -> RunStatistics:
    """Mean, sample SD and two-sided 95% t-interval."""
    v = tuple(float(x) for x in values)
    n = len(v)
    if n < 2:
        raise ValueError("a confidence interval needs at least two values")
    arr = np.array(v)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1))
    if sd == 0.0:
        return RunStatistics(v, mean, 0.0, mean, mean)
    margin = t_critical(n - 1) * sd / math.sqrt(n)
    return RunStatistics(v, mean, sd, mean - margin, mean + margin)


def aggregate_runs(per_run_metrics) -> dict[str, RunStatistics]:
    runs = list(per_run_metrics)
    if not runs:
        raise ValueError("no runs to aggregate")
    keys = list(runs[0])
    for k, r in enumerate(runs[1:], start=1):
        if set(r) != set(keys):
            raise ValueError(f"run {k} has metric keys {sorted(r)}, expected {sorted(keys)}")
    ordered = [k for k in METRIC_KEYS if k in keys] + sorted(k for k in keys if k not in METRIC_KEYS)
    if len(runs) == 1:
        out = {}
        for k in ordered:
            x = float(runs[0][k])
            out[k] = RunStatistics((x,), x, 0.0, x, x)
        return out
    return {k: confidence_interval([r[k] for r in runs]) for k in ordered}


def image_metrics(prob, mask, threshold: float = 0.5) -> dict[str, float]:
    """Per-image metrics: the five ratio metrics plus ``hdd`` and ``auc``.

    ``auc`` is NaN when the ground truth holds a single class.
    """
    p = _array(prob).reshape(_array(prob).shape[-2:])
    m = _array(mask).reshape(p.shape)
    out = basic_metrics(confusion_counts(p, m, threshold))
    out["hdd"] = hausdorff_distance(p >= threshold, m)
    try:
        out["auc"] = roc_auc(p, m)
    except UndefinedMetricError:
        out["auc"] = float("nan")
    return out
