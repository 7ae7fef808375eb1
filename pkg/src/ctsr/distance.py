"""Euclidean and DTW baselines plus the pairwise |a_i - b_j| primitives."""

from __future__ import annotations

import numba
import numpy as np

from .series import as_values

BRUTE_FORCE_MAX_LEN = 8


class DimensionError(ValueError):
    pass


def euclidean_distance(a, b) -> float:
    x, y = as_values(a), as_values(b)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    d = x - y
    return float(np.sqrt(np.dot(d, d)))


def pairwise_abs_matrix(a, b) -> np.ndarray:
    """``(w, h)`` matrix with entry ``(i, j) = |a_i - b_j|``."""
    x, y = as_values(a), as_values(b)
    return np.abs(x[:, None] - y[None, :])


def template_distance_tensor(a, templates) -> np.ndarray:
    """Stack ``|a_i - t_{k,j}|`` over templates into a ``(w, h, K)`` array (channel last)."""
    x = as_values(a)
    bank = [as_values(t) for t in templates]
    if not bank:
        raise DimensionError("need at least one template")
    h = bank[0].size
    if any(t.size != h for t in bank):
        raise DimensionError("templates must share one length")
    T = np.stack(bank)  # (K, h)
    return np.abs(x[:, None, None] - T.T[None, :, :])


@numba.njit(cache=True)
def _dtw(x, y):
    w, h = x.size, y.size
    acc = np.empty((w, h))
    for i in range(w):
        for j in range(h):
            cost = abs(x[i] - y[j])
            if i == 0 and j == 0:
                acc[i, j] = cost
            elif i == 0:
                acc[i, j] = cost + acc[i, j - 1]
            elif j == 0:
                acc[i, j] = cost + acc[i - 1, j]
            else:
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best:
                    best = acc[i - 1, j]
                if acc[i, j - 1] < best:
                    best = acc[i, j - 1]
                acc[i, j] = cost + best
    return acc[w - 1, h - 1]


@numba.njit(cache=True)
def _dtw_to_many(q, X):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        out[r] = _dtw(q, X[r])
    return out


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with L1 local cost.

    Accumulates ``D[i,j] += min(D[i-1,j], D[i,j-1], D[i-1,j-1])`` in row-major
    order; the first row and column only have one predecessor.
    """
    x, y = as_values(a), as_values(b)
    if x.size == 0 or y.size == 0:
        raise DimensionError("DTW needs non-empty inputs")
    return float(_dtw(np.ascontiguousarray(x), np.ascontiguousarray(y)))


def dtw_to_many(a, database: np.ndarray) -> np.ndarray:
    """DTW from one series to every row of ``database``."""
    return _dtw_to_many(np.ascontiguousarray(as_values(a)), np.ascontiguousarray(database, dtype=np.float64))


def euclidean_to_many(a, database: np.ndarray) -> np.ndarray:
    diff = np.asarray(database, dtype=np.float64) - as_values(a)[None, :]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def dtw_brute_force(a, b) -> float:
    """Minimum summed ``|a_i - b_j|`` over every monotone warping path.

    Enumerates paths explicitly, so it is only meant for short inputs.
    """
    x, y = [float(v) for v in as_values(a)], [float(v) for v in as_values(b)]
    w, h = len(x), len(y)
    if w == 0 or h == 0:
        raise DimensionError("DTW needs non-empty inputs")
    if w > BRUTE_FORCE_MAX_LEN or h > BRUTE_FORCE_MAX_LEN:
        raise ValueError(f"brute force limited to lengths <= {BRUTE_FORCE_MAX_LEN}")

    best = float("inf")
    # each stack entry is (i, j, cost of the path prefix ending at (i, j))
    stack = [(0, 0, abs(x[0] - y[0]))]
    while stack:
        i, j, cost = stack.pop()
        if i == w - 1 and j == h - 1:
            best = min(best, cost)
            continue
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < w and nj < h:
                stack.append((ni, nj, cost + abs(x[ni] - y[nj])))
    return best
