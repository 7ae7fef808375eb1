"""RN2Dw/T template encoder, RN2D pairwise scorer and the RN1D Siamese encoder.

All three share the channel-last autodiff layers. Each model counts how many
series (or series pairs) went through its trunk in ``trunk_calls`` so the
query paths can be audited.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, ParamStore, Tensor
from .series import as_values, stack_values

EMBED_DIM = 64
TRUNK_CHANNELS = 64
BOTTLENECK_CHANNELS = 16
N_BLOCKS = 8
STEM_KERNEL = 7
TEMPLATE_GRID = (8, 16, 24, 32, 40, 48)
RN1D_KERNELS = (8, 5, 3)
RN1D_STAGES = 3

MODEL_KINDS = ("rn2dwt", "rn2d", "rn1d")
EMBEDDING_KINDS = ("rn2dwt", "rn1d")


# BLAS results depend on the batch shape in the last bits, so stored and
# query-time embeddings are both computed one series at a time; that makes a
# query identical to an indexed series land at distance exactly 0.
EMBED_BATCH = 1


class ModelKindError(ValueError):
    pass


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_params(store, name, rng, kh, kw, cin, cout, dtype):
    fan_in = kh * kw * cin
    store.add(f"{name}.w", _uniform(rng, (kh, kw, cin, cout), fan_in, dtype))
    store.add(f"{name}.b", _uniform(rng, (cout,), fan_in, dtype))


def _linear_params(store, name, rng, fin, fout, dtype):
    store.add(f"{name}.w", _uniform(rng, (fin, fout), fin, dtype))
    store.add(f"{name}.b", _uniform(rng, (fout,), fin, dtype))


def _add_trunk_params(store, rng, in_channels, out_dim, dtype):
    _conv_params(store, "stem", rng, STEM_KERNEL, STEM_KERNEL, in_channels, TRUNK_CHANNELS, dtype)
    for i in range(N_BLOCKS):
        _conv_params(store, f"block{i}.conv1", rng, 1, 1, TRUNK_CHANNELS, BOTTLENECK_CHANNELS, dtype)
        _conv_params(store, f"block{i}.conv2", rng, 3, 3, BOTTLENECK_CHANNELS, BOTTLENECK_CHANNELS, dtype)
        _conv_params(store, f"block{i}.conv3", rng, 1, 1, BOTTLENECK_CHANNELS, TRUNK_CHANNELS, dtype)
    _linear_params(store, "head", rng, TRUNK_CHANNELS, out_dim, dtype)


def bottleneck_block(x: Tensor, params, prefix: str = "") -> Tensor:
    """``relu(x + conv1x1(relu(conv3x3(relu(conv1x1(x))))))``, 64 -> 16 -> 16 -> 64."""
    if x.shape[-1] != TRUNK_CHANNELS:
        raise DimensionError(f"bottleneck block expects {TRUNK_CHANNELS} channels, got {x.shape[-1]}")
    p = lambda n: params[f"{prefix}{n}"]  # noqa: E731
    h = ad.relu(ad.conv2d(x, p("conv1.w"), p("conv1.b")))
    h = ad.relu(ad.conv2d(h, p("conv2.w"), p("conv2.b"), padding=1))
    h = ad.conv2d(h, p("conv3.w"), p("conv3.b"))
    return ad.relu(ad.add(x, h))


def _trunk(params, image: Tensor) -> Tensor:
    """Stem (7x7, stride 2) -> ReLU -> 8 bottleneck blocks -> GAP -> linear head."""
    h = ad.relu(ad.conv2d(image, params["stem.w"], params["stem.b"], stride=2, padding=STEM_KERNEL // 2))
    for i in range(N_BLOCKS):
        h = bottleneck_block(h, params, f"block{i}.")
    return ad.linear(ad.global_avg_pool(h), params["head.w"], params["head.b"])


def _batched(fn, X, batch_size):
    out = []
    with ad.no_grad():
        for start in range(0, len(X), batch_size):
            out.append(fn(X[start:start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0,))


class _Model:
    kind = ""

    def __init__(self, params: ParamStore, length: int):
        self.params = params
        self.length = int(length)
        self.trunk_calls = 0

    @property
    def dtype(self):
        return next(iter(self.params.entries.values())).data.dtype

    def _as_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.length:
            raise DimensionError(f"{self.kind}: expected series of length {self.length}, got {X.shape[1]}")
        return X

    def config(self) -> "OrderedDict[str, str]":
        return OrderedDict(length=str(self.length))


class Rn2DwT(_Model):
    """Template-learning 2-D residual encoder.

    A series is compared against ``K`` learned templates; the stacked
    ``|a_i - t_kj|`` matrices go through the residual trunk, producing a
    64-d embedding.
    """

    kind = "rn2dwt"

    @property
    def n_templates(self) -> int:
        return self.params["templates"].shape[0]

    @classmethod
    def init(cls, length: int, n_templates: int = 32, seed: int = 0, template_source=None, dtype=np.float32):
        if n_templates < 1:
            raise ValueError("need at least one template")
        rng = np.random.default_rng(seed)
        store = ParamStore()
        if template_source is not None:
            pool = np.asarray(template_source, dtype=np.float64)
            if pool.shape[1] != length:
                raise DimensionError("template source rows must have the configured length")
            if len(pool) < n_templates:
                raise ValueError(f"need {n_templates} series to seed templates, have {len(pool)}")
            templates = pool[rng.choice(len(pool), n_templates, replace=False)]
        else:
            templates = rng.standard_normal((n_templates, length))
        store.add("templates", templates.astype(dtype))
        _add_trunk_params(store, rng, n_templates, EMBED_DIM, dtype)
        return cls(store, length)

    def forward(self, X) -> Tensor:
        X = self._as_batch(X)
        self.trunk_calls += X.shape[0]
        image = ad.template_abs_diff(Tensor(X), self.params["templates"])
        return _trunk(self.params, image)

    def embed_many(self, X, batch_size: int = EMBED_BATCH) -> np.ndarray:
        return _batched(self.forward, self._as_batch(X), batch_size)

    def embed(self, s) -> np.ndarray:
        return self.embed_many(as_values(s)[None, :])[0]

    def config(self):
        cfg = super().config()
        cfg["n_templates"] = str(self.n_templates)
        return cfg


class Rn2D(_Model):
    """Residual network over one ``|a_i - b_j|`` matrix, emitting a scalar score."""

    kind = "rn2d"

    @classmethod
    def init(cls, length: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        _add_trunk_params(store, rng, 1, 1, dtype)
        return cls(store, length)

    def forward(self, A, B) -> Tensor:
        """Scores of the row pairs ``(A[r], B[r])``; returns shape ``(N,)``."""
        A, B = self._as_batch(A), self._as_batch(B)
        if A.shape[0] != B.shape[0]:
            raise DimensionError("score batches must pair up row by row")
        self.trunk_calls += A.shape[0]
        image = ad.pair_abs_diff(Tensor(A), Tensor(B))
        out = _trunk(self.params, image)
        return ad.reshape(out, (out.shape[0],))

    def score_many(self, A, B, batch_size: int = 64) -> np.ndarray:
        A, B = self._as_batch(A), self._as_batch(B)
        if A.shape[0] != B.shape[0]:
            raise DimensionError("score batches must pair up row by row")
        out = []
        with ad.no_grad():
            for start in range(0, len(A), batch_size):
                out.append(self.forward(A[start:start + batch_size], B[start:start + batch_size]).data)
        return np.concatenate(out)

    def score_against(self, items, q, batch_size: int = 64) -> np.ndarray:
        """``score(item, q)`` for every row of ``items``."""
        items = self._as_batch(items)
        Q = np.broadcast_to(self._as_batch(q), items.shape)
        return self.score_many(items, Q, batch_size)


class Rn1D(_Model):
    """Three residual stages of 1-d convolutions (kernels 8, 5, 3) with 64 channels."""

    kind = "rn1d"

    @classmethod
    def init(cls, length: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        cin = 1
        for s in range(RN1D_STAGES):
            c = cin
            for j, k in enumerate(RN1D_KERNELS):
                store.add(f"stage{s}.conv{j}.w", _uniform(rng, (k, c, TRUNK_CHANNELS), k * c, dtype))
                store.add(f"stage{s}.conv{j}.b", _uniform(rng, (TRUNK_CHANNELS,), k * c, dtype))
                c = TRUNK_CHANNELS
            if cin != TRUNK_CHANNELS:
                store.add(f"stage{s}.skip.w", _uniform(rng, (1, cin, TRUNK_CHANNELS), cin, dtype))
                store.add(f"stage{s}.skip.b", _uniform(rng, (TRUNK_CHANNELS,), cin, dtype))
            cin = TRUNK_CHANNELS
        _linear_params(store, "head", rng, TRUNK_CHANNELS, EMBED_DIM, dtype)
        return cls(store, length)

    def forward(self, X) -> Tensor:
        X = self._as_batch(X)
        self.trunk_calls += X.shape[0]
        p = self.params
        h = Tensor(X[:, :, None])
        for s in range(RN1D_STAGES):
            y = h
            for j, k in enumerate(RN1D_KERNELS):
                # "same" padding; even kernels put the extra zero on the right
                y = ad.conv1d(y, p[f"stage{s}.conv{j}.w"], p[f"stage{s}.conv{j}.b"], padding=((k - 1) // 2, k // 2))
                if j < len(RN1D_KERNELS) - 1:
                    y = ad.relu(y)
            skip = h
            if f"stage{s}.skip.w" in p:
                skip = ad.conv1d(h, p[f"stage{s}.skip.w"], p[f"stage{s}.skip.b"])
            h = ad.relu(ad.add(skip, y))
        return ad.linear(ad.global_avg_pool(h), p["head.w"], p["head.b"])

    def embed_many(self, X, batch_size: int = EMBED_BATCH) -> np.ndarray:
        return _batched(self.forward, self._as_batch(X), batch_size)

    def embed(self, s) -> np.ndarray:
        return self.embed_many(as_values(s)[None, :])[0]


MODEL_CLASSES = {"rn2dwt": Rn2DwT, "rn2d": Rn2D, "rn1d": Rn1D}


def init_model(kind: str, length: int, seed: int = 0, n_templates: int = 32, template_source=None, dtype=np.float32):
    if kind == "rn2dwt":
        return Rn2DwT.init(length, n_templates, seed, template_source, dtype)
    if kind == "rn2d":
        return Rn2D.init(length, seed, dtype)
    if kind == "rn1d":
        return Rn1D.init(length, seed, dtype)
    raise ModelKindError(f"unknown model kind {kind!r}")


def model_from_params(kind: str, params: ParamStore, length: int):
    if kind not in MODEL_CLASSES:
        raise ModelKindError(f"unknown model kind {kind!r}")
    return MODEL_CLASSES[kind](params, length)


# ---------------------------------------------------------------------------
# functional entry points


def embed_rn2dwt(s, model: Rn2DwT) -> np.ndarray:
    return model.embed(s)


def embed_rn1d(s, model: Rn1D) -> np.ndarray:
    return model.embed(s)


def score_rn2d(a, b, model: Rn2D) -> float:
    return float(model.score_many(as_values(a)[None, :], as_values(b)[None, :])[0])


def relevance_from_embeddings(e1, e2) -> float:
    """Negated Euclidean distance, so that larger means more relevant."""
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if e1.shape != (EMBED_DIM,) or e2.shape != (EMBED_DIM,):
        raise DimensionError(f"embeddings must have dimension {EMBED_DIM}")
    d = e1 - e2
    return -float(np.sqrt(np.dot(d, d)))


def embed_series(model, series, batch_size: int = EMBED_BATCH) -> np.ndarray:
    if model.kind not in EMBEDDING_KINDS:
        raise ModelKindError(f"{model.kind} is a pairwise scorer, not an embedding model")
    return model.embed_many(stack_values(series), batch_size)


def params_digest(params: ParamStore) -> str:
    """SHA-256 over parameter names, shapes and float32 payloads."""
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.asarray(t.data.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def n_parameters(model) -> int:
    return model.params.n_values()


__all__ = [
    "EMBED_DIM",
    "MODEL_KINDS",
    "ModelKindError",
    "Rn1D",
    "Rn2D",
    "Rn2DwT",
    "bottleneck_block",
    "embed_rn1d",
    "embed_rn2dwt",
    "embed_series",
    "init_model",
    "model_from_params",
    "relevance_from_embeddings",
    "score_rn2d",
]
