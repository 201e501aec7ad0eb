"""Ranking, classification and clustering metrics plus behavioural analyses."""

from __future__ import annotations

import bisect
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .taxonomy import GoalTaxonomy


@dataclass(frozen=True)
class RankMetricsReport:
    mrr_at_10: float
    hr_at_1: float
    hr_at_5: float
    hr_at_10: float
    ndcg_at_5: float
    ndcg_at_10: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ndcg(hits: list[bool], n_truth: int, k: int) -> float:
    dcg = sum(1.0 / math.log2(i + 2) for i, h in enumerate(hits[:k]) if h)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, n_truth)))
    return dcg / idcg


def rank_metrics(ranking, truth) -> RankMetricsReport:
    truth = set(truth)
    if not truth:
        raise ValueError("rank_metrics needs a nonempty truth set")
    ranking = list(ranking)
    if len(set(ranking)) != len(ranking):
        raise ValueError("ranking contains duplicates")
    hits = [r in truth for r in ranking[:10]]
    first = next((i + 1 for i, h in enumerate(hits) if h), None)
    return RankMetricsReport(
        mrr_at_10=1.0 / first if first else 0.0,
        hr_at_1=float(any(hits[:1])),
        hr_at_5=float(any(hits[:5])),
        hr_at_10=float(any(hits[:10])),
        ndcg_at_5=_ndcg(hits, len(truth), 5),
        ndcg_at_10=_ndcg(hits, len(truth), 10),
    )


def mean_rank_metrics(reports) -> RankMetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    keys = RankMetricsReport.__dataclass_fields__
    return RankMetricsReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


@dataclass(frozen=True)
class ClsMetricsReport:
    f1: float
    precision: float
    recall: float
    accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def classification_metrics(predictions, labels) -> ClsMetricsReport:
    pred = np.asarray(predictions, dtype=bool)
    lab = np.asarray(labels, dtype=bool)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {lab.shape}")
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    acc = float(np.mean(pred == lab)) if pred.size else 0.0
    return ClsMetricsReport(f1, p, r, acc)


def multiclass_f1(pred, truth) -> dict:
    """Micro F1 (equal to accuracy for single-label data) and macro F1."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    classes = sorted(set(pred.tolist()) | set(truth.tolist()))
    per_class = []
    for c in classes:
        per_class.append(classification_metrics(pred == c, truth == c).f1)
    return {"micro_f1": float(np.mean(pred == truth)), "macro_f1": float(np.mean(per_class))}


# -- clustering agreement -----------------------------------------------------

@dataclass(frozen=True)
class ClusterMetricsReport:
    nmi: float
    ami: float

    def to_dict(self) -> dict:
        return asdict(self)


def contingency(a, b) -> np.ndarray:
    _, ai = np.unique(np.asarray(a), return_inverse=True)
    _, bi = np.unique(np.asarray(b), return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def mutual_information(table) -> float:
    table = np.asarray(table, dtype=float)
    n = table.sum()
    a = table.sum(axis=1, keepdims=True)
    b = table.sum(axis=0, keepdims=True)
    nz = table > 0
    return float(np.sum(table[nz] / n * np.log(table[nz] * n / (a @ b)[nz])))


def expected_mutual_information(table) -> float:
    """E[MI] of two partitions with the given marginals under random relabelling."""
    table = np.asarray(table)
    n = int(table.sum())
    a = table.sum(axis=1).astype(int)
    b = table.sum(axis=0).astype(int)
    total = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1)
            term = nij / n * np.log(n * nij / (ai * bj))
            logw = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                    - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                    - gammaln(n - ai - bj + nij + 1))
            total += float(np.sum(term * np.exp(logw)))
    return total


def clustering_agreement(pred, true) -> ClusterMetricsReport:
    """NMI with arithmetic-mean normalisation and permutation-model AMI."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("label vectors differ in length")
    if pred.size < 2:
        raise ValueError("clustering agreement needs at least two elements")
    table = contingency(true, pred)
    h_true = _entropy(table.sum(axis=1))
    h_pred = _entropy(table.sum(axis=0))
    if h_true == 0.0 and h_pred == 0.0:
        return ClusterMetricsReport(1.0, 1.0)
    mi = mutual_information(table)
    mean_h = (h_true + h_pred) / 2.0
    nmi = mi / mean_h
    emi = expected_mutual_information(table)
    denom = mean_h - emi
    ami = (mi - emi) / denom if abs(denom) > 1e-15 else 1.0
    return ClusterMetricsReport(float(min(max(nmi, 0.0), 1.0)), float(ami))


# -- goal confusion ------------------------------------------------------------

@dataclass
class ConfusionReport:
    order: list[int]
    matrix: np.ndarray
    within_category_rate: float
    n_errors: int
    n_within: int

    def to_dict(self) -> dict:
        return {"order": self.order, "matrix": self.matrix.tolist(),
                "within_category_rate": self.within_category_rate,
                "n_errors": self.n_errors, "n_within_category_errors": self.n_within}


def category_block_order(t: GoalTaxonomy) -> list[int]:
    order = [t.root]
    for c in t.categories:
        order.append(c)
        order.extend(t.children(c))
    return order


def goal_confusion_matrix(pred, true, t: GoalTaxonomy) -> ConfusionReport:
    pred = [int(x) for x in pred]
    true = [int(x) for x in true]
    known = t.by_id
    bad = sorted({g for g in pred + true if g not in known})
    if bad:
        raise ValueError(f"unknown goal ids: {bad}")
    order = category_block_order(t)
    pos = {g: i for i, g in enumerate(order)}
    counts = np.zeros((len(order), len(order)))
    for p, g in zip(pred, true):
        counts[pos[g], pos[p]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    errors = [(p, g) for p, g in zip(pred, true) if p != g]
    within = sum(1 for p, g in errors if t.category_of(p) == t.category_of(g))
    rate = within / len(errors) if errors else 1.0
    return ConfusionReport(order, matrix, rate, len(errors), within)


# -- revisitation durations ---------------------------------------------------

MINUTE, HOUR, DAY, WEEK = 60, 3600, 86400, 7 * 86400
BUCKET_BOUNDS = (MINUTE, 10 * MINUTE, 30 * MINUTE, HOUR, 4 * HOUR, 7 * HOUR, 12 * HOUR,
                 DAY, 3 * DAY, WEEK, 2 * WEEK, 4 * WEEK, 8 * WEEK)
N_BUCKETS = len(BUCKET_BOUNDS) + 1
SCALES = {"hours": range(1, 7), "days": range(7, 11), "weeks": range(11, 15)}


def duration_bucket(seconds: float) -> int:
    """1-based bucket; bucket i covers [bound[i-2], bound[i-1])."""
    if seconds <= 0:
        raise ValueError(f"revisit duration must be positive, got {seconds}")
    return 1 + bisect.bisect_right(BUCKET_BOUNDS, seconds)


def duration_scale(bucket: int) -> str:
    return next(name for name, r in SCALES.items() if bucket in r)


def revisit_duration_buckets(events, category_of_page, top_k: int = 5) -> dict:
    """Histogram revisit gaps per category and rank categories per duration scale.

    ``events`` holds (page_id, t_prev, t_next); ``category_of_page`` maps a
    page id to its goal category label.
    """
    hist: dict = defaultdict(lambda: [0] * N_BUCKETS)
    for page, t_prev, t_next in events:
        b = duration_bucket(t_next - t_prev)
        hist[category_of_page(page)][b - 1] += 1
    scale_share = {}
    for cat, h in hist.items():
        total = sum(h)
        scale_share[cat] = {s: sum(h[b - 1] for b in r) / total for s, r in SCALES.items()}
    top = {s: [c for c, _ in sorted(scale_share.items(), key=lambda kv: (-kv[1][s], str(kv[0])))][:top_k]
           for s in SCALES}
    return {"bounds_seconds": list(BUCKET_BOUNDS),
            "histogram": {c: list(h) for c, h in sorted(hist.items(), key=lambda kv: str(kv[0]))},
            "scale_share": {c: scale_share[c] for c in sorted(scale_share, key=str)},
            "top_by_scale": top}


def extract_revisit_events(user_sessions) -> list[tuple[str, float, float]]:
    """Consecutive cross-session visits of the same page by one user.

    ``user_sessions`` is a time-ordered list of sessions, each a list of
    (page_id, ts). A page seen again within its own session is ignored.
    """
    last_seen: dict[str, tuple[int, float]] = {}
    events = []
    for s_idx, session in enumerate(user_sessions):
        for page, ts in session:
            prev = last_seen.get(page)
            if prev is not None and prev[0] != s_idx:
                events.append((page, prev[1], ts))
            last_seen[page] = (s_idx, ts)
    return events


def single_goal_session_rate(sessions) -> dict:
    """Per category: sessions whose visits all map to it / sessions containing it."""
    containing: Counter = Counter()
    only: Counter = Counter()
    for cats in sessions:
        present = set(cats)
        for c in present:
            containing[c] += 1
        if len(present) == 1:
            only[next(iter(present))] += 1
    return {c: only[c] / containing[c] for c in sorted(containing, key=str)}


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(to_jsonable(report), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if hasattr(x, "to_dict"):
        return to_jsonable(x.to_dict())
    return x
