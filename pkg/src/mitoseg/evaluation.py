"""Centroid matching, micro F1 and balanced accuracy with threshold sweep."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

HIT_RADIUS_UM = 7.5


class SingleClass(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float = 1.0
    case_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    case_id: str = ""


@dataclass
class F1Report:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    zero_denominator: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    threshold: float
    single_class: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _xy(p) -> tuple[float, float]:
    if isinstance(p, Detection):
        return p.x, p.y
    return float(p[0]), float(p[1])


def match_detections(preds: Sequence, gts: Sequence, spacing_um: float,
                     radius_um: float = HIT_RADIUS_UM, case_id: str = "") -> MatchResult:
    """Maximum-cardinality one-to-one matching within ``radius_um`` (inclusive).

    Among maximum matchings the one with the smallest summed distance is
    reported.
    """
    if spacing_um <= 0:
        raise ValueError("spacing must be > 0")
    P = np.array([_xy(p) for p in preds], dtype=np.float64).reshape(-1, 2)
    G = np.array([_xy(g) for g in gts], dtype=np.float64).reshape(-1, 2)
    if len(P) == 0 or len(G) == 0:
        return MatchResult(0, len(P), len(G), [], case_id)
    dist = np.linalg.norm(P[:, None] - G[None], axis=2) * spacing_um
    ok = dist <= radius_um
    # infeasible pairs cost more than any feasible matching in total
    big = radius_um * (min(len(P), len(G)) + 1) + 1.0
    cost = np.where(ok, dist, big)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c), float(dist[r, c])) for r, c in zip(rows, cols) if ok[r, c]]
    tp = len(pairs)
    return MatchResult(tp, len(P) - tp, len(G) - tp, pairs, case_id)


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_from_counts(tp: int, fp: int, fn: int) -> F1Report:
    flag = False
    if tp + fp == 0 or tp + fn == 0:
        flag = True
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = f1_from_pr(precision, recall)
    if precision + recall == 0:
        flag = True
    return F1Report(tp, fp, fn, precision, recall, f1, flag)


def micro_f1(results: Sequence[MatchResult]) -> F1Report:
    """Pool TP/FP/FN over cases, then compute precision, recall and F1."""
    if not results:
        raise ValueError("need at least one match result")
    return f1_from_counts(sum(r.tp for r in results), sum(r.fp for r in results), sum(r.fn for r in results))


def ba_from_rates(sensitivity: float, specificity: float) -> float:
    return 0.5 * (sensitivity + specificity)


def balanced_accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float) -> ClsReport:
    """Positive (atypical, label 1) when ``score >= threshold``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    single = (tp + fn == 0) or (tn + fp == 0)
    return ClsReport(tp, fp, tn, fn, sens, spec, ba_from_rates(sens, spec), float(threshold), single)


def threshold_candidates(scores: Sequence[float]) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2
    # adjacent floats: the midpoint rounds onto the lower score, so split at the upper one
    mids = np.where(mids > u[:-1], mids, u[1:])
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def threshold_sweep(scores: Sequence[float], labels: Sequence[int]):
    """Best-BA threshold among {0, 1} and midpoints of adjacent unique scores.

    Returns ``(best_threshold, best_ba, curve)`` where ``curve`` is a list of
    ``(threshold, ba)`` in ascending threshold order. Ties go to the lowest
    threshold.
    """
    y = np.asarray(labels).astype(int)
    if len(np.unique(y)) < 2:
        raise SingleClass("threshold sweep needs both classes")
    curve = [(float(t), balanced_accuracy(scores, y, t).balanced_accuracy) for t in threshold_candidates(scores)]
    best_t, best_ba = curve[0]
    for t, ba in curve[1:]:
        if ba > best_ba:
            best_t, best_ba = t, ba
    return best_t, best_ba, curve


def detection_report(results: Sequence[MatchResult], domains: dict[str, int] | None = None) -> dict:
    """EvalReport JSON: per-case counts, pooled metrics and a per-domain breakdown."""
    per_case = []
    for r in results:
        rep = f1_from_counts(r.tp, r.fp, r.fn)
        per_case.append({"case_id": r.case_id, **rep.to_dict()})
    out = {"per_case": per_case, "pooled": micro_f1(results).to_dict() if results else None}
    if domains is not None:
        by_dom: dict[int, list[MatchResult]] = {}
        for r in results:
            by_dom.setdefault(domains.get(r.case_id, -1), []).append(r)
        out["per_domain"] = {str(d): micro_f1(rs).to_dict() for d, rs in sorted(by_dom.items())}
    return out


def pr_curve(dets_by_case: Sequence[Sequence[Detection]], gts_by_case: Sequence[Sequence], spacing_um: float,
             radius_um: float = HIT_RADIUS_UM) -> list[tuple[float, float, float]]:
    """``(score_threshold, precision, recall)`` keeping detections with ``score >= t``.

    Thresholds are the distinct detection scores, descending; each point
    rematches from scratch so it agrees with :func:`match_detections`.
    """
    if len(dets_by_case) != len(gts_by_case):
        raise ValueError("one detection list per ground-truth list")
    scores = sorted({d.score for dets in dets_by_case for d in dets}, reverse=True)
    curve = []
    for t in scores:
        results = [match_detections([d for d in dets if d.score >= t], gts, spacing_um, radius_um)
                   for dets, gts in zip(dets_by_case, gts_by_case)]
        rep = micro_f1(results)
        curve.append((float(t), rep.precision, rep.recall))
    return curve
