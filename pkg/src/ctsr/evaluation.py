"""Ranking metrics (Prec@k, AP@k, NDCG@k), batch evaluation and Welch's t-test."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DEFAULT_K_GRID = (10,)


class SignificanceTestError(ValueError):
    pass


def _check_k(k):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def _top(relevance, k) -> list:
    rel = [bool(r) for r in list(relevance)[:k]]
    return rel + [False] * (k - len(rel))


def precision_at_k(relevance: Sequence[bool], k: int) -> float:
    _check_k(k)
    return sum(_top(relevance, k)) / k


def average_precision_at_k(relevance: Sequence[bool], k: int) -> float:
    """Mean of the prefix precisions at the relevant ranks within the top ``k``."""
    _check_k(k)
    hits, total = 0, 0.0
    for i, r in enumerate(_top(relevance, k), start=1):
        if r:
            hits += 1
            total += hits / i
    return total / max(1, hits)


def ndcg_at_k(relevance: Sequence[bool], k: int, total_relevant: int) -> float:
    """Binary-gain NDCG; the ideal ranking puts ``min(k, total_relevant)`` hits first."""
    _check_k(k)
    top = _top(relevance, k)
    if total_relevant < sum(top):
        raise ValueError("total_relevant is smaller than the number of relevant items ranked")
    if total_relevant == 0:
        return 0.0
    dcg = sum(1.0 / math.log2(i + 1) for i, r in enumerate(top, start=1) if r)
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, total_relevant) + 1))
    return dcg / idcg


@dataclass
class MetricsReport:
    k_grid: list
    per_query: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    n_queries: int = 0
    mean_query_time_s: float = 0.0

    def mean(self, metric: str, k: int = 10) -> float:
        return self.means[f"{metric}@{k}"]

    def values(self, metric: str, k: int = 10) -> np.ndarray:
        key = f"{metric}@{k}"
        return np.array([r[key] for r in self.per_query])

    def to_dict(self) -> dict:
        return {
            "k_grid": list(self.k_grid),
            "per_query": self.per_query,
            "means": self.means,
            "n_queries": self.n_queries,
            "mean_query_time_s": self.mean_query_time_s,
        }

    def to_json(self, indent=1) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(d["k_grid"], d["per_query"], d["means"], d["n_queries"], d["mean_query_time_s"])


def parse_k_grid(text: str) -> list:
    """``"5..15"`` -> ``[5, ..., 15]``; ``"5,10"`` -> ``[5, 10]``."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(p) for p in text.split(".."))
        grid = list(range(lo, hi + 1))
    else:
        grid = [int(p) for p in text.split(",") if p.strip()]
    if not grid or min(grid) < 1:
        raise ValueError(f"bad k grid {text!r}")
    return grid


def _ranked_ids(result) -> list:
    items = getattr(result, "items", result)
    return [it[0] if isinstance(it, tuple) else it for it in items]


def evaluate_rankings(queries, database, rankings: Iterable, k_grid=DEFAULT_K_GRID, mean_query_time_s=0.0) -> MetricsReport:
    """Score precomputed rankings (one list of item ids per query).

    A query's own id is dropped from its ranking and from its relevant count.
    """
    queries = list(queries)
    unlabeled = [q.series_id for q in queries if not q.label]
    if unlabeled:
        raise ValueError(f"every query needs a label; {unlabeled[0]!r} has none")
    k_grid = sorted(set(int(k) for k in k_grid))
    for k in k_grid:
        _check_k(k)
    label_of = {s.series_id: s.label for s in database}
    label_counts: dict = {}
    for s in database:
        label_counts[s.label] = label_counts.get(s.label, 0) + 1
    report = MetricsReport(k_grid, mean_query_time_s=mean_query_time_s)
    kmax = max(k_grid)
    for q, ranking in zip(queries, rankings):
        ids = [i for i in _ranked_ids(ranking) if i != q.series_id][:kmax]
        rel = [label_of[i] == q.label for i in ids]
        total = label_counts.get(q.label, 0) - (1 if label_of.get(q.series_id, object()) == q.label else 0)
        rec = {"query_id": q.series_id}
        for k in k_grid:
            rec[f"prec@{k}"] = precision_at_k(rel, k)
            rec[f"ap@{k}"] = average_precision_at_k(rel, k)
            rec[f"ndcg@{k}"] = ndcg_at_k(rel, k, total)
        report.per_query.append(rec)
    report.n_queries = len(report.per_query)
    if report.n_queries == 0:
        raise ValueError("empty query set")
    for k in k_grid:
        for m in ("prec", "ap", "ndcg"):
            key = f"{m}@{k}"
            report.means[key] = float(np.mean([r[key] for r in report.per_query]))
    return report


def evaluate_queries(query_set, database, query_fn: Callable, k_grid=DEFAULT_K_GRID) -> MetricsReport:
    """Run ``query_fn(q, k)`` for every query and aggregate Prec/AP/NDCG over ``k_grid``.

    ``query_fn`` returns a ranked list of item ids or a result object with an
    ``items`` list of ``(item_id, score)`` pairs.
    """
    queries = list(query_set)
    if not queries:
        raise ValueError("empty query set")
    db_ids = {s.series_id for s in database}
    kmax = max(k_grid)
    rankings, elapsed = [], 0.0
    for q in queries:
        t0 = time.perf_counter()
        rankings.append(query_fn(q, kmax + (1 if q.series_id in db_ids else 0)))
        elapsed += time.perf_counter() - t0
    return evaluate_rankings(queries, database, rankings, k_grid, elapsed / len(queries))


def two_sample_t_test(sample_a, sample_b, alpha: float = 0.05):
    """Welch's unequal-variance t-test; returns ``(t, two-sided p, p < alpha)``."""
    a, b = np.asarray(sample_a, dtype=np.float64), np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise SignificanceTestError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        raise SignificanceTestError("both samples have zero variance")
    se = math.sqrt(va + vb)
    t = diff / se
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(min(1.0, 2.0 * special.stdtr(df, -abs(t))))
    return float(t), p, bool(p < alpha)


def welch_df(sample_a, sample_b) -> float:
    a, b = np.asarray(sample_a, dtype=np.float64), np.asarray(sample_b, dtype=np.float64)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    return (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
