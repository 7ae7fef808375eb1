"""Triplet sampling, BPR loss, the AdamW training loop and checkpoint files."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .binio import FormatError, Reader, Writer
from .evaluation import MetricsReport, evaluate_queries, evaluate_rankings
from .index import build_exact_index, query_distance_scan, query_pairwise_scan, search_exact
from .models import EMBEDDING_KINDS, MODEL_KINDS, TEMPLATE_GRID, ModelKindError, init_model, model_from_params
from .series import LabeledCollection, TimeSeries

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTSR"
CHECKPOINT_VERSION = 1
SELECTION_K = 10


class SamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Triplet:
    anchor: TimeSeries
    positive: TimeSeries
    negative: TimeSeries

    def __post_init__(self):
        if self.anchor.label != self.positive.label:
            raise ValueError("positive must share the anchor's label")
        if self.anchor.label == self.negative.label:
            raise ValueError("negative must have a different label")
        if self.anchor.series_id == self.positive.series_id:
            raise ValueError("positive must be a different series than the anchor")


@dataclass
class TrainConfig:
    model_kind: str = "rn2dwt"
    n_templates: int = 32
    series_length: int = 64
    batch_size: int = 32
    epochs: int = 10
    steps_per_epoch: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    # 0 means every validation query; capping helps the costly pairwise model
    max_val_queries: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.model_kind == "rn2dwt" and self.n_templates not in TEMPLATE_GRID:
            raise ValueError(f"n_templates must be one of {TEMPLATE_GRID}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if min(self.lr, self.beta1, self.beta2, self.eps) <= 0 or self.weight_decay < 0:
            raise ValueError("optimizer rates must be positive")
        if self.series_length < 2:
            raise ValueError("series_length must be >= 2")

    def to_dict(self) -> "OrderedDict[str, str]":
        return OrderedDict((k, repr(v) if isinstance(v, float) else str(v)) for k, v in asdict(self).items())

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        conv = {"int": int, "float": float, "str": str}
        return cls(**{f.name: conv[f.type](d[f.name]) for f in fields(cls) if f.name in d})


@dataclass
class CheckpointRecord:
    model_kind: str
    config: "OrderedDict[str, str]"
    params: "OrderedDict[str, np.ndarray]"
    best_val_ndcg: float = float("nan")
    epoch: int = 0
    format_version: int = CHECKPOINT_VERSION
    history: list = field(default_factory=list, compare=False)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model(self):
        store = ParamStore(OrderedDict((k, v.copy()) for k, v in self.params.items()))
        return model_from_params(self.model_kind, store, int(self.config["series_length"]))


# ---------------------------------------------------------------------------
# sampling and loss


def _class_index(collection: LabeledCollection):
    by_label: dict = {}
    for i, s in enumerate(collection):
        by_label.setdefault(s.label, []).append(i)
    if len(by_label) < 2:
        raise SamplingError("triplet sampling needs at least 2 labels")
    anchors = np.array([i for idx in by_label.values() if len(idx) >= 2 for i in idx], dtype=np.int64)
    if anchors.size == 0:
        raise SamplingError("every class is a singleton; no positive pair exists")
    return by_label, anchors


def sample_triplet_indices(collection: LabeledCollection, m: int, rng: np.random.Generator, _cache=None):
    """Row indices ``(anchor, positive, negative)``, each of length ``m``."""
    by_label, anchors = _cache or _class_index(collection)
    labels = collection.labels
    n = len(collection)
    a = np.empty(m, dtype=np.int64)
    p = np.empty(m, dtype=np.int64)
    neg = np.empty(m, dtype=np.int64)
    for r in range(m):
        i = int(anchors[rng.integers(anchors.size)])
        same = by_label[labels[i]]
        j = same[rng.integers(len(same) - 1)]
        if j == i:
            j = same[-1]
        # negatives: uniform over items outside the anchor's class
        k = int(rng.integers(n - len(same)))
        for other in by_label.values():
            if other is same:
                continue
            if k < len(other):
                neg[r] = other[k]
                break
            k -= len(other)
        a[r], p[r] = i, j
    return a, p, neg


def sample_triplet_batch(collection: LabeledCollection, m: int, rng) -> list:
    """``m`` triplets: uniform anchor, uniform same-label positive, uniform other-label negative."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    a, p, n = sample_triplet_indices(collection, m, rng)
    items = collection.items
    return [Triplet(items[i], items[j], items[k]) for i, j, k in zip(a, p, n)]


def bpr_loss(scores_pos, scores_neg):
    """``sum_i -log sigmoid(pos_i - neg_i)``, computed as ``sum softplus(neg - pos)``.

    Tensors in, Tensor out (differentiable); plain sequences in, float out.
    """
    if isinstance(scores_pos, Tensor) or isinstance(scores_neg, Tensor):
        pos, neg = ad._wrap(scores_pos), ad._wrap(scores_neg)
        if pos.shape != neg.shape or pos.data.ndim != 1 or pos.shape[0] < 1:
            raise ad.DimensionError("score lists must have equal length >= 1")
        return ad.sum_all(ad.softplus(ad.sub(neg, pos)))
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.shape != neg.shape or pos.ndim != 1 or pos.size < 1:
        raise ad.DimensionError("score lists must have equal length >= 1")
    return float(np.logaddexp(0.0, neg - pos).sum())


def triplet_scores(model, A, P, N):
    """Differentiable ``(score(anchor, positive), score(anchor, negative))``."""
    m = A.shape[0]
    if model.kind in EMBEDDING_KINDS:
        E = model.forward(np.concatenate([A, P, N]))
        ea, ep, en = E[:m], E[m:2 * m], E[2 * m:]
        return -ad.row_norm(ea - ep), -ad.row_norm(ea - en)
    # pairwise scorer: items first, the anchor plays the query
    s = model.forward(np.concatenate([P, N]), np.concatenate([A, A]))
    return s[:m], s[m:]


# ---------------------------------------------------------------------------
# evaluation helpers shared by training, the CLI and the acceptance suite


def model_rankings(model, queries, database: LabeledCollection, k: int, batch_size: int = 64):
    """Top-``k`` (+1 for self-matches) rankings of ``database`` for every query.

    ``batch_size`` applies to pairwise scoring only; embeddings use the
    batch-invariant default.
    """
    queries = list(queries)
    db_ids = set(database.ids)
    if model.kind in EMBEDDING_KINDS:
        index = build_exact_index(database, model)
        Q = model.embed_many(np.stack([q.values for q in queries]))
        return [search_exact(index, qe, k + (q.series_id in db_ids)) for q, qe in zip(queries, Q)]
    return [query_pairwise_scan(database, q, k + (q.series_id in db_ids), model, batch_size) for q in queries]


def evaluate_model(model, queries, database: LabeledCollection, k_grid=(SELECTION_K,), batch_size: int = 64) -> MetricsReport:
    rankings = model_rankings(model, queries, database, max(k_grid), batch_size)
    return evaluate_rankings(list(queries), database, rankings, k_grid)


def evaluate_baseline(metric: str, queries, database: LabeledCollection, k_grid=(SELECTION_K,)) -> MetricsReport:
    return evaluate_queries(queries, database, lambda q, k: query_distance_scan(database, q, k, metric), k_grid)


def validation_ndcg(model, val: LabeledCollection, train: LabeledCollection, max_queries: int = 0) -> float:
    queries = list(val)[:max_queries] if max_queries else list(val)
    return evaluate_model(model, queries, train).mean("ndcg", SELECTION_K)


# ---------------------------------------------------------------------------
# training loop


def _snapshot(model, config: TrainConfig, score: float, epoch: int, history) -> CheckpointRecord:
    params = OrderedDict((k, np.array(v, dtype=np.float32, copy=True)) for k, v in model.params.arrays().items())
    return CheckpointRecord(config.model_kind, config.to_dict(), params, float(score), int(epoch), history=list(history))


def train(
    train_set: LabeledCollection,
    val_set: LabeledCollection,
    config: TrainConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> CheckpointRecord:
    """Fit a model with BPR loss and AdamW; keep the epoch with the best validation NDCG@10.

    Epoch 0 is the initialisation. Ties keep the earliest epoch.
    """
    if train_set.fixed_length != config.series_length:
        raise ValueError(f"training series have length {train_set.fixed_length}, config expects {config.series_length}")
    rng = np.random.default_rng(config.seed)
    cache = _class_index(train_set)
    X = train_set.matrix(np.float32)
    template_source = X if config.model_kind == "rn2dwt" else None
    model = init_model(config.model_kind, config.series_length, config.seed, config.n_templates, template_source)

    history = []
    score = validation_ndcg(model, val_set, train_set, config.max_val_queries)
    entry = {"epoch": 0, "train_loss": float("nan"), "val_ndcg10": score}
    history.append(entry)
    if on_epoch:
        on_epoch(entry)
    best = _snapshot(model, config, score, 0, history)

    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(config.steps_per_epoch):
            step += 1
            a, p, n = sample_triplet_indices(train_set, config.batch_size, rng, cache)
            sp, sn = triplet_scores(model, X[a], X[p], X[n])
            loss = bpr_loss(sp, sn)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            loss.backward()
            ad.adamw_step(model.params, config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
            losses.append(value)
        score = validation_ndcg(model, val_set, train_set, config.max_val_queries)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_ndcg10": score, "step_losses": losses}
        history.append(entry)
        logger.info("epoch %d loss %.4f val ndcg@10 %.4f", epoch, entry["train_loss"], score)
        if on_epoch:
            on_epoch(entry)
        if score > best.best_val_ndcg:
            best = _snapshot(model, config, score, epoch, history)
    best.history = history
    return best


# ---------------------------------------------------------------------------
# checkpoint files


def _config_text(rec: CheckpointRecord) -> str:
    cfg = OrderedDict(rec.config)
    cfg["best_val_ndcg10"] = repr(float(rec.best_val_ndcg))
    cfg["epoch"] = str(rec.epoch)
    for k, v in cfg.items():
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"config entry {k!r} cannot be serialised")
    return "".join(f"{k}={v}\n" for k, v in cfg.items())


def checkpoint_to_bytes(rec: CheckpointRecord) -> bytes:
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u32(rec.format_version)
    w.text(rec.model_kind)
    w.text(_config_text(rec))
    w.u32(len(rec.params))
    for name, arr in rec.params.items():
        w.text(name)
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u64(d)
        w.array(arr, "<f4")
    return w.getvalue()


def checkpoint_from_bytes(buf: bytes) -> CheckpointRecord:
    r = Reader(buf)
    if r.raw(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    kind = r.text()
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    config = OrderedDict()
    for line in r.text().splitlines():
        if "=" not in line:
            raise FormatError(f"bad config line {line!r}")
        k, v = line.split("=", 1)
        config[k] = v
    try:
        best = float(config.pop("best_val_ndcg10"))
        epoch = int(config.pop("epoch"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"config lacks selection fields: {exc}") from None
    params = OrderedDict()
    for _ in range(r.u32()):
        name = r.text()
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"tensor {name!r} has implausible rank {rank}")
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        params[name] = r.array(count, "<f4").reshape(shape)
    if not r.at_end():
        raise FormatError("trailing bytes: shape table does not match payload length")
    return CheckpointRecord(kind, config, params, best, epoch, version)


def save_checkpoint(rec: CheckpointRecord, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(rec))


def load_checkpoint(path) -> CheckpointRecord:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model, config: Optional[TrainConfig] = None) -> CheckpointRecord:
    """Wrap an (untrained or externally trained) model as a checkpoint record."""
    if config is None:
        n_templates = getattr(model, "n_templates", 32)
        config = TrainConfig(
            model_kind=model.kind,
            n_templates=n_templates if n_templates in TEMPLATE_GRID else 32,
            series_length=model.length,
        )
    return _snapshot(model, config, float("nan"), 0, [])


def model_from_checkpoint(rec: CheckpointRecord, require_kind=None):
    if require_kind is not None and rec.model_kind not in require_kind:
        raise ModelKindError(f"checkpoint holds a {rec.model_kind} model; expected one of {tuple(require_kind)}")
    return rec.model()
