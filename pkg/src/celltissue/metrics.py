"""Distance-matched detection F1, multi-run aggregation and significance testing."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import _kernels

DEFAULT_MATCH_RADIUS_PX = 15.0


class MetricError(ValueError):
    pass


@dataclass
class MatchCounts:
    """Per-class TP/FP/FN.  ``classes`` fixes which classes are reported even if absent."""

    tp: dict = field(default_factory=lambda: defaultdict(int))
    fp: dict = field(default_factory=lambda: defaultdict(int))
    fn: dict = field(default_factory=lambda: defaultdict(int))
    classes: tuple = ()

    def all_classes(self) -> list[int]:
        return sorted(set(self.classes) | set(self.tp) | set(self.fp) | set(self.fn))

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        out = MatchCounts(classes=tuple(sorted(set(self.classes) | set(other.classes))))
        for name in ("tp", "fp", "fn"):
            acc = getattr(out, name)
            for src in (getattr(self, name), getattr(other, name)):
                for k, v in src.items():
                    acc[k] += v
        return out

    def to_dict(self) -> dict:
        return {str(c): {"tp": self.tp.get(c, 0), "fp": self.fp.get(c, 0), "fn": self.fn.get(c, 0)}
                for c in self.all_classes()}


def _priority_order(dets: Sequence) -> list[int]:
    # descending confidence, then row-major (y, x)
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].y, dets[i].x))


def match_detections(dets: Sequence, gts: Sequence, radius_px: float = DEFAULT_MATCH_RADIUS_PX,
                     classes: Iterable[int] = (1, 2)) -> MatchCounts:
    """Count TP/FP/FN with greedy confidence-ordered matching.

    Each detection, strongest first, lands on its nearest GT within
    ``radius_px`` that no earlier detection has claimed as a true positive
    (distance ties go to the lower GT index).  Equal classes give a TP and
    consume the GT; a class mismatch or no GT in range gives an FP of the
    detection's class.  GTs never consumed are FNs of their own class.
    """
    if radius_px < 0:
        raise MetricError("radius must be non-negative")
    counts = MatchCounts(classes=tuple(classes))
    order = _priority_order(dets)
    det_x = np.array([dets[i].x for i in order], dtype=float)
    det_y = np.array([dets[i].y for i in order], dtype=float)
    det_c = np.array([dets[i].class_id for i in order], dtype=np.int64)
    gt_x = np.array([g.x for g in gts], dtype=float)
    gt_y = np.array([g.y for g in gts], dtype=float)
    gt_c = np.array([g.class_id for g in gts], dtype=np.int64)
    target, is_tp = _kernels.greedy_match(det_x, det_y, det_c, gt_x, gt_y, gt_c, float(radius_px))
    consumed = np.zeros(len(gts), dtype=bool)
    for k in range(len(order)):
        c = int(det_c[k])
        if is_tp[k]:
            counts.tp[c] += 1
            consumed[target[k]] = True
        else:
            counts.fp[c] += 1
    for j, g in enumerate(gts):
        if not consumed[j]:
            counts.fn[int(g.class_id)] += 1
    return counts


@dataclass
class F1Report:
    per_class: dict
    mean_f1: float
    counts: MatchCounts | None = None
    per_organ: dict | None = None
    runs: dict | None = None

    def to_dict(self) -> dict:
        out = {"per_class_f1": {str(k): v for k, v in self.per_class.items()}, "mean_f1": self.mean_f1}
        if self.counts is not None:
            out["counts"] = self.counts.to_dict()
        if self.per_organ is not None:
            out["per_organ"] = self.per_organ
        if self.runs is not None:
            out["runs"] = self.runs
        return out


def class_f1(tp: int, fp: int, fn: int) -> float | None:
    """``2TP / (2TP + FP + FN)``; ``None`` when the class never occurs."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2 * tp / denom


def f1_from_counts(counts: MatchCounts) -> F1Report:
    per_class = {}
    for c in counts.all_classes():
        f1 = class_f1(counts.tp.get(c, 0), counts.fp.get(c, 0), counts.fn.get(c, 0))
        if f1 is not None:
            per_class[c] = f1
    if not per_class:
        raise MetricError("no evaluable class")
    return F1Report(per_class, float(np.mean(list(per_class.values()))), counts)


def sum_counts(items: Iterable[MatchCounts]) -> MatchCounts:
    total = MatchCounts()
    for c in items:
        total = total + c
    return total


def aggregate_runs(scores: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t confidence half-width over repeated runs."""
    x = np.asarray(scores, dtype=float)
    if x.size < 2:
        raise MetricError("need at least two runs")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    q = stats.t.ppf(0.5 + confidence / 2, df=x.size - 1)
    return mean, float(q * sd / math.sqrt(x.size))


def format_mean_ci(mean: float, half_width: float, scale: float = 100.0) -> str:
    """``64.44±1.82`` style, scores given as fractions by default."""
    return f"{mean * scale:.2f}±{half_width * scale:.2f}"


def per_organ_report(items: Iterable[tuple[str, MatchCounts]]) -> dict[str, F1Report]:
    """Micro-average within each organ: counts are summed before computing F1."""
    grouped: dict[str, MatchCounts] = {}
    for organ, counts in items:
        grouped[organ] = grouped[organ] + counts if organ in grouped else counts
    return {organ: f1_from_counts(c) for organ, c in sorted(grouped.items())}


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise MetricError("each sample needs at least two runs")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        return (0.0 if diff == 0 else math.copysign(math.inf, diff)), float(a.size + b.size - 2)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(t), float(df)


def significance_test(runs_a: Sequence[float], runs_b: Sequence[float]) -> float:
    """Two-sided Welch t-test p-value."""
    t, df = welch_t(runs_a, runs_b)
    if math.isinf(t):
        return 0.0
    return float(min(1.0, 2 * stats.t.sf(abs(t), df)))


def evaluate_patches(patches: Iterable[tuple[Sequence, Sequence]], radius_px: float = DEFAULT_MATCH_RADIUS_PX,
                     classes: Iterable[int] = (1, 2)) -> F1Report:
    """Micro-averaged report over ``(detections, ground_truth)`` pairs."""
    classes = tuple(classes)
    total = sum_counts(match_detections(d, g, radius_px, classes) for d, g in patches)
    if not total.classes:
        total.classes = classes
    return f1_from_counts(total)


def counts_from_mapping(data: Mapping) -> MatchCounts:
    out = MatchCounts(classes=tuple(int(k) for k in data))
    for k, v in data.items():
        out.tp[int(k)] = int(v["tp"])
        out.fp[int(k)] = int(v["fp"])
        out.fn[int(k)] = int(v["fn"])
    return out
