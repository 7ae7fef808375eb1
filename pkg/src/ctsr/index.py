"""Retrieval back-ends: exact embedding scan, NN-descent graph search, pairwise scan.

Every ranking orders items by score (higher first) and breaks ties by
ascending item id, so results are reproducible across back-ends.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numba
import numpy as np

from .binio import FormatError, Reader, Writer
from .distance import dtw_to_many, euclidean_to_many
from .models import EMBED_BATCH, EMBED_DIM, EMBEDDING_KINDS, ModelKindError, embed_series, params_digest
from .series import LabeledCollection, as_values

INDEX_MAGIC = b"CTSX"
INDEX_VERSION = 1

DEFAULT_K_GRAPH = 20
DEFAULT_SAMPLE_RATE = 0.5
DEFAULT_DELTA = 0.001
DEFAULT_MAX_ITERS = 10
DEFAULT_CANDIDATES = 100


class IndexStateError(RuntimeError):
    pass


@dataclass
class QueryResult:
    items: list  # (item_id, score), best first
    elapsed_s: float = 0.0

    @property
    def ids(self) -> list:
        return [i for i, _ in self.items]

    @property
    def scores(self) -> list:
        return [s for _, s in self.items]

    def __len__(self):
        return len(self.items)


def _id_ranks(ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def top_k(scores: np.ndarray, k: int, id_rank: np.ndarray) -> np.ndarray:
    """Positions of the ``k`` best scores, ties broken by ascending id rank."""
    n = scores.shape[0]
    k = min(int(k), n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        part = np.argpartition(-scores, k - 1)
        cand = np.nonzero(scores >= scores[part[k - 1]])[0]
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


def embedding_distances(E: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``q`` to each row of ``E`` (float64, row-independent)."""
    diff = E - q[None, :]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass
class KnnGraph:
    neighbors: np.ndarray  # (n, k_graph) int64, ascending by distance
    distances: np.ndarray  # (n, k_graph) float32
    k_graph: int
    iterations: int
    sample_rate: float
    delta: float
    _adjacency: Optional[tuple] = field(default=None, repr=False, compare=False)

    def search_adjacency(self):
        """Undirected CSR adjacency (forward plus reverse edges) used by the search."""
        if self._adjacency is None:
            n, k = self.neighbors.shape
            src = np.repeat(np.arange(n), k)
            dst = self.neighbors.ravel()
            d = self.distances.ravel().astype(np.float64)
            s2, t2, d2 = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([d, d])
            order = np.lexsort((t2, d2, s2))
            s2, t2 = s2[order], t2[order]
            # keep the first (closest) copy of each directed edge, in sorted order
            _, first = np.unique(s2 * n + t2, return_index=True)
            first.sort()
            s2, t2 = s2[first], t2[first]
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.add.at(indptr, s2 + 1, 1)
            self._adjacency = (np.cumsum(indptr), t2.astype(np.int64))
        return self._adjacency


class FeatureIndex:
    """Embeddings of a database, computed once, plus labels and an optional graph."""

    def __init__(self, item_ids, labels, embeddings, checkpoint_hash: str = "", graph: Optional[KnnGraph] = None):
        E = np.asarray(embeddings, dtype=np.float32)
        if E.ndim != 2 or E.shape[1] != EMBED_DIM:
            raise ValueError(f"embeddings must be (n, {EMBED_DIM})")
        if len(item_ids) != E.shape[0] or len(labels) != E.shape[0]:
            raise ValueError("ids, labels and embeddings disagree on the item count")
        if len(set(item_ids)) != len(item_ids):
            raise ValueError("item ids must be unique")
        if not np.all(np.isfinite(E)):
            raise ValueError("embeddings must be finite")
        E.setflags(write=False)
        self.item_ids = list(item_ids)
        self.labels = list(labels)
        self.embeddings = E
        self.checkpoint_hash = checkpoint_hash
        self.graph = graph
        self._E64 = E.astype(np.float64)
        self._id_rank = _id_ranks(self.item_ids)

    def __len__(self):
        return len(self.item_ids)

    def result(self, positions, scores, elapsed=0.0) -> QueryResult:
        return QueryResult([(self.item_ids[p], float(scores[p])) for p in positions], elapsed)


def build_exact_index(collection: LabeledCollection, model, batch_size: int = EMBED_BATCH) -> FeatureIndex:
    """Embed every item once with an embedding model (``rn2dwt`` or ``rn1d``)."""
    if model.kind not in EMBEDDING_KINDS:
        raise ModelKindError(f"cannot index with a {model.kind} model; it has no per-series embedding")
    E = embed_series(model, collection.items, batch_size) if len(collection) else np.zeros((0, EMBED_DIM))
    return FeatureIndex(collection.ids, collection.labels, E, params_digest(model.params))


def search_exact(index: FeatureIndex, q_embedding, k: int) -> QueryResult:
    if len(index) == 0:
        raise IndexStateError("index is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    t0 = time.perf_counter()
    q = np.asarray(q_embedding, dtype=np.float32).astype(np.float64)
    scores = -embedding_distances(index._E64, q)
    pos = top_k(scores, k, index._id_rank)
    return index.result(pos, scores, time.perf_counter() - t0)


def query_exact(index: FeatureIndex, q, k: int, model) -> QueryResult:
    """Embed ``q`` once and rank every indexed item by negated embedding distance."""
    if len(index) == 0:
        raise IndexStateError("index is empty")
    if model.kind not in EMBEDDING_KINDS:
        raise ModelKindError(f"{model.kind} cannot embed queries")
    t0 = time.perf_counter()
    qe = model.embed(q)
    res = search_exact(index, qe, k)
    res.elapsed_s = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# NN-descent


@numba.njit(cache=True)
def _sqdist(E, i, j):
    s = 0.0
    for d in range(E.shape[1]):
        t = E[i, d] - E[j, d]
        s += t * t
    return s


@numba.njit(cache=True)
def _try_insert(idx, dist, flag, fresh, i, j, d):
    k = idx.shape[1]
    if d >= dist[i, k - 1]:
        return 0
    for p in range(k):
        if idx[i, p] == j:
            return 0
    p = k - 1
    while p > 0 and dist[i, p - 1] > d:
        idx[i, p] = idx[i, p - 1]
        dist[i, p] = dist[i, p - 1]
        flag[i, p] = flag[i, p - 1]
        fresh[i, p] = fresh[i, p - 1]
        p -= 1
    idx[i, p] = j
    dist[i, p] = d
    flag[i, p] = True
    fresh[i, p] = True
    return 1


@numba.njit(cache=True)
def _cand_push(cand, prio, i, j, pr):
    cap = cand.shape[1]
    worst = 0
    for p in range(cap):
        if cand[i, p] == j:
            return
        if prio[i, p] > prio[i, worst]:
            worst = p
    if pr < prio[i, worst]:
        cand[i, worst] = j
        prio[i, worst] = pr


@numba.njit(cache=True)
def _list_add(lst, i, j):
    if j < 0:
        return
    for p in range(lst.shape[1]):
        if lst[i, p] == j:
            return
        if lst[i, p] < 0:
            lst[i, p] = j
            return


@numba.njit(cache=True)
def _nn_descent(E, k, sample_rate, delta, max_iters, seed):
    n = E.shape[0]
    np.random.seed(seed)
    idx = -np.ones((n, k), dtype=np.int64)
    dist = np.full((n, k), np.inf)
    flag = np.zeros((n, k), dtype=np.bool_)
    fresh = np.zeros((n, k), dtype=np.bool_)
    for i in range(n):
        filled = 0
        while filled < k:
            j = np.random.randint(0, n)
            if j == i:
                continue
            filled += _try_insert(idx, dist, flag, fresh, i, j, _sqdist(E, i, j))
    cap = max(1, int(math.ceil(sample_rate * k)))
    rcap = 2 * k
    iters = 0
    for _ in range(max_iters):
        iters += 1
        # forward new: a sample of rho*k flagged neighbours; forward old: all of them
        fwd_c = -np.ones((n, cap), dtype=np.int64)
        fwd_p = np.full((n, cap), np.inf)
        for i in range(n):
            for p in range(k):
                if flag[i, p]:
                    _cand_push(fwd_c, fwd_p, i, idx[i, p], np.random.random())
        # reverse lists, each sampled down to 2k; a rho*k cap drops pairs
        # that are then never joined, which stalls small or high-dimensional sets
        rnew_c = -np.ones((n, rcap), dtype=np.int64)
        rnew_p = np.full((n, rcap), np.inf)
        rold_c = -np.ones((n, rcap), dtype=np.int64)
        rold_p = np.full((n, rcap), np.inf)
        new_c = -np.ones((n, cap + rcap), dtype=np.int64)
        old_c = -np.ones((n, k + rcap), dtype=np.int64)
        for i in range(n):
            for a in range(cap):
                j = fwd_c[i, a]
                if j >= 0:
                    _cand_push(rnew_c, rnew_p, j, i, np.random.random())
            for p in range(k):
                if not flag[i, p]:
                    _cand_push(rold_c, rold_p, idx[i, p], i, np.random.random())
        for i in range(n):
            for p in range(k):
                if flag[i, p]:
                    for a in range(cap):
                        if fwd_c[i, a] == idx[i, p]:
                            flag[i, p] = False
                            break
                else:
                    _list_add(old_c, i, idx[i, p])
            for a in range(cap):
                _list_add(new_c, i, fwd_c[i, a])
            for a in range(rcap):
                _list_add(new_c, i, rnew_c[i, a])
                _list_add(old_c, i, rold_c[i, a])
        fresh[:] = False
        for v in range(n):
            for a in range(new_c.shape[1]):
                u1 = new_c[v, a]
                if u1 < 0:
                    continue
                for b in range(a + 1, new_c.shape[1]):
                    u2 = new_c[v, b]
                    if u2 < 0:
                        continue
                    d = _sqdist(E, u1, u2)
                    _try_insert(idx, dist, flag, fresh, u1, u2, d)
                    _try_insert(idx, dist, flag, fresh, u2, u1, d)
                for b in range(old_c.shape[1]):
                    u2 = old_c[v, b]
                    if u2 < 0 or u2 == u1:
                        continue
                    d = _sqdist(E, u1, u2)
                    _try_insert(idx, dist, flag, fresh, u1, u2, d)
                    _try_insert(idx, dist, flag, fresh, u2, u1, d)
        # fraction of list entries replaced during this iteration
        if fresh.sum() < delta * n * k:
            break
    return idx, np.sqrt(dist), iters


def nn_descent_build(
    index: FeatureIndex,
    k_graph: int = DEFAULT_K_GRAPH,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    delta: float = DEFAULT_DELTA,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> KnnGraph:
    """Approximate k-NN graph by iterated neighbour-of-neighbour joins.

    Starts from random lists and stops when fewer than ``delta * n * k_graph``
    list entries change in an iteration, or after ``max_iters`` iterations.
    """
    n = len(index)
    if k_graph < 1 or k_graph >= n:
        raise ValueError(f"k_graph must be in [1, n), got {k_graph} with n={n}")
    if not 0 < sample_rate <= 1:
        raise ValueError("sample_rate must be in (0, 1]")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    idx, dist, iters = _nn_descent(index._E64, int(k_graph), float(sample_rate), float(delta), int(max_iters), int(seed))
    return KnnGraph(idx, dist.astype(np.float32), int(k_graph), int(iters), float(sample_rate), float(delta))


def brute_force_knn(E: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours of every row (excluding itself)."""
    E = np.asarray(E, dtype=np.float64)
    sq = (E * E).sum(axis=1)
    out = np.empty((E.shape[0], k), dtype=np.int64)
    for start in range(0, E.shape[0], 1024):
        block = E[start:start + 1024]
        d = sq[start:start + 1024, None] - 2 * block @ E.T + sq[None, :]
        d[np.arange(block.shape[0]), np.arange(start, start + block.shape[0])] = np.inf
        part = np.argpartition(d, k, axis=1)[:, :k]
        rows = np.take_along_axis(d, part, axis=1)
        out[start:start + block.shape[0]] = np.take_along_axis(part, np.argsort(rows, axis=1), axis=1)
    return out


def graph_recall(graph: KnnGraph, truth: np.ndarray) -> float:
    k = truth.shape[1]
    hits = sum(len(set(graph.neighbors[i, :k]) & set(truth[i])) for i in range(truth.shape[0]))
    return hits / truth.size


@numba.njit(cache=True)
def _graph_search(E, q, indptr, indices, n_cand, seed):
    n = E.shape[0]
    np.random.seed(seed)
    visited = np.zeros(n, dtype=np.bool_)
    pool_id = np.empty(n_cand, dtype=np.int64)
    pool_d = np.empty(n_cand)
    pool_exp = np.zeros(n_cand, dtype=np.bool_)
    size = 0
    n_seed = 0
    while n_seed < n_cand:
        if n_cand >= n:
            j = n_seed
        else:
            j = np.random.randint(0, n)
            if visited[j]:
                continue
        n_seed += 1
        visited[j] = True
        s = 0.0
        for d in range(E.shape[1]):
            t = E[j, d] - q[d]
            s += t * t
        # sorted insert; the pool is not full while seeding
        p = size
        while p > 0 and pool_d[p - 1] > s:
            pool_id[p] = pool_id[p - 1]
            pool_d[p] = pool_d[p - 1]
            pool_exp[p] = pool_exp[p - 1]
            p -= 1
        pool_id[p] = j
        pool_d[p] = s
        pool_exp[p] = False
        size += 1
    while True:
        cur = -1
        for p in range(size):
            if not pool_exp[p]:
                cur = p
                break
        if cur < 0:
            break
        pool_exp[cur] = True
        node = pool_id[cur]
        for e in range(indptr[node], indptr[node + 1]):
            j = indices[e]
            if visited[j]:
                continue
            visited[j] = True
            s = 0.0
            for d in range(E.shape[1]):
                t = E[j, d] - q[d]
                s += t * t
            if s >= pool_d[size - 1]:
                continue
            p = size - 1
            while p > 0 and pool_d[p - 1] > s:
                pool_id[p] = pool_id[p - 1]
                pool_d[p] = pool_d[p - 1]
                pool_exp[p] = pool_exp[p - 1]
                p -= 1
            pool_id[p] = j
            pool_d[p] = s
            pool_exp[p] = False
    return pool_id[:size].copy()


def nn_descent_query(
    graph: KnnGraph,
    index: FeatureIndex,
    q_embedding,
    k: int,
    n_candidates: int = DEFAULT_CANDIDATES,
    seed: int = 0,
) -> QueryResult:
    """Best-first search over the graph from random entry points.

    The pool holds ``n_candidates`` items; the closest unexpanded member is
    expanded until every pool member has been expanded. The pool is then
    re-scored exactly and its top ``k`` returned.
    """
    if graph is None or graph.neighbors.size == 0:
        raise IndexStateError("graph is empty")
    n = len(index)
    if not 1 <= k <= n_candidates <= n:
        raise ValueError(f"need 1 <= k <= n_candidates <= n, got k={k}, n_candidates={n_candidates}, n={n}")
    t0 = time.perf_counter()
    q = np.asarray(q_embedding, dtype=np.float32).astype(np.float64)
    indptr, indices = graph.search_adjacency()
    pool = _graph_search(index._E64, q, indptr, indices, int(n_candidates), int(seed))
    scores = -embedding_distances(index._E64[pool], q)
    pos = top_k(scores, k, index._id_rank[pool])
    return QueryResult([(index.item_ids[pool[p]], float(scores[p])) for p in pos], time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# scans without an index


def _scan_result(collection, scores, k, t0) -> QueryResult:
    ids = collection.ids
    pos = top_k(np.asarray(scores, dtype=np.float64), k, _id_ranks(ids))
    return QueryResult([(ids[p], float(scores[p])) for p in pos], time.perf_counter() - t0)


def query_pairwise_scan(collection: LabeledCollection, q, k: int, model, batch_size: int = 64) -> QueryResult:
    """Score every item with the pairwise model, ``score(item, q)``; n trunk evaluations."""
    if model.kind != "rn2d":
        raise ModelKindError(f"pairwise scan needs an rn2d model, got {model.kind}")
    if len(collection) == 0:
        raise IndexStateError("collection is empty")
    t0 = time.perf_counter()
    scores = model.score_against(collection.matrix(), as_values(q), batch_size).astype(np.float64)
    return _scan_result(collection, scores, k, t0)


def query_distance_scan(collection: LabeledCollection, q, k: int, metric: str = "ed") -> QueryResult:
    """Rank by a fixed distance (``ed`` or ``dtw``); score is the negated distance."""
    if len(collection) == 0:
        raise IndexStateError("collection is empty")
    t0 = time.perf_counter()
    X = collection.matrix()
    if metric == "ed":
        d = euclidean_to_many(q, X)
    elif metric == "dtw":
        d = dtw_to_many(q, X)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return _scan_result(collection, -d, k, t0)


def measure_query_time(query_fn: Callable, queries: Sequence, repetitions: int = 1) -> float:
    """Mean wall-clock seconds per ``query_fn(q)`` call over all queries and repetitions."""
    if not queries:
        raise ValueError("need at least one query")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    t0 = time.perf_counter()
    for _ in range(repetitions):
        for q in queries:
            query_fn(q)
    return (time.perf_counter() - t0) / (repetitions * len(queries))


# ---------------------------------------------------------------------------
# persistence

_PAIR = np.dtype([("id", "<u4"), ("d", "<f4")])


def index_to_bytes(index: FeatureIndex) -> bytes:
    w = Writer()
    w.raw(INDEX_MAGIC)
    w.u32(INDEX_VERSION)
    w.u32(len(index))
    for i in index.item_ids:
        w.text(i)
    for lab in index.labels:
        w.text(lab)
    w.array(index.embeddings, "<f4")
    w.text(index.checkpoint_hash)
    g = index.graph
    w.u32(0 if g is None else 1)
    if g is not None:
        w.u32(g.k_graph)
        w.u32(g.iterations)
        w.f64(g.sample_rate)
        w.f64(g.delta)
        pairs = np.empty(g.neighbors.size, dtype=_PAIR)
        pairs["id"] = g.neighbors.ravel()
        pairs["d"] = g.distances.ravel()
        w.raw(pairs.tobytes())
    return w.getvalue()


def index_from_bytes(buf: bytes) -> FeatureIndex:
    r = Reader(buf)
    if r.raw(4) != INDEX_MAGIC:
        raise FormatError("bad magic: not an index file")
    version = r.u32()
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    n = r.u32()
    ids = [r.text() for _ in range(n)]
    labels = [r.text() for _ in range(n)]
    E = r.array(n * EMBED_DIM, "<f4").reshape(n, EMBED_DIM)
    digest = r.text()
    has_graph = r.u32()
    graph = None
    if has_graph not in (0, 1):
        raise FormatError(f"bad graph flag {has_graph}")
    if has_graph:
        k = r.u32()
        iters = r.u32()
        rate = r.f64()
        delta = r.f64()
        pairs = np.frombuffer(r.raw(n * k * _PAIR.itemsize), dtype=_PAIR)
        nb = pairs["id"].astype(np.int64).reshape(n, k)
        if n and (nb.max() >= n):
            raise FormatError("graph refers to an item outside the index")
        graph = KnnGraph(nb, pairs["d"].astype(np.float32).reshape(n, k), k, iters, rate, delta)
    if not r.at_end():
        raise FormatError("trailing bytes after index payload")
    return FeatureIndex(ids, labels, E, digest, graph)


def save_index(index: FeatureIndex, path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path) -> FeatureIndex:
    return index_from_bytes(Path(path).read_bytes())
