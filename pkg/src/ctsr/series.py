"""Time-series containers, TSV ingestion, preprocessing and a synthetic corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

SPLITS = ("train", "validation", "test")

# waveform families, in the order classes are assigned
FAMILIES = (
    "sine",
    "square",
    "triangle",
    "chirp",
    "ramp",
    "two_bump",
    "damped_sine",
    "noise_burst",
)

CONSTANT_STD = 1e-8


class TsvFormatError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    label: Optional[str] = None
    series_id: str = ""

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).ravel()
        if arr.size < 2:
            raise ValueError(f"series {self.series_id!r} needs at least 2 values, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"series {self.series_id!r} contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def length(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.length

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(values, self.label, self.series_id)


@dataclass(frozen=True)
class RelevanceJudgment:
    query_id: str
    item_id: str
    relevant: bool

    @classmethod
    def from_series(cls, query: TimeSeries, item: TimeSeries) -> "RelevanceJudgment":
        return cls(query.series_id, item.series_id, query.label == item.label)


@dataclass(frozen=True)
class LabeledCollection:
    """An ordered set of labelled series.

    ``fixed_length`` is the common length of every item, or ``None`` while
    the items still have heterogeneous lengths (raw files before
    :func:`prepare`).
    """

    items: tuple
    split: str = "train"
    fixed_length: Optional[int] = field(default=None)

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for s in items:
            if s.label is None:
                raise ValueError(f"series {s.series_id!r} has no label")
        ids = [s.series_id for s in items]
        if len(set(ids)) != len(ids):
            raise ValueError("series ids must be unique within a collection")
        lengths = {s.length for s in items}
        if self.fixed_length is None:
            if len(lengths) == 1:
                object.__setattr__(self, "fixed_length", lengths.pop())
        elif lengths and lengths != {self.fixed_length}:
            raise ValueError(f"items do not all have length {self.fixed_length}")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[TimeSeries]:
        return iter(self.items)

    def __getitem__(self, i) -> TimeSeries:
        return self.items[i]

    @property
    def labels(self) -> list:
        return [s.label for s in self.items]

    @property
    def ids(self) -> list:
        return [s.series_id for s in self.items]

    def matrix(self, dtype=np.float64) -> np.ndarray:
        """Stack the values into an ``(n, L)`` array."""
        if self.fixed_length is None:
            raise ValueError("collection has heterogeneous lengths; resample it first")
        if not self.items:
            return np.zeros((0, 0), dtype=dtype)
        return np.stack([s.values for s in self.items]).astype(dtype, copy=False)

    def map(self, fn) -> "LabeledCollection":
        return LabeledCollection(tuple(fn(s) for s in self.items), self.split)


# ---------------------------------------------------------------------------
# TSV storage


def load_tsv(
    path,
    has_header: bool = False,
    split: str = "train",
    id_prefix: Optional[str] = None,
) -> LabeledCollection:
    """Parse a ``label<TAB>v1<TAB>v2...`` file.

    Series ids are ``<id_prefix>-<row>`` with ``row`` counting records from
    zero; the prefix defaults to the file stem.
    """
    path = Path(path)
    prefix = path.stem if id_prefix is None else id_prefix
    items = []
    seen_header = not has_header
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if not seen_header:
                seen_header = True
                continue
            fields = line.split("\t")
            label, tokens = fields[0].strip(), fields[1:]
            if len(tokens) < 2:
                raise TsvFormatError(line_no, f"expected at least 2 values, got {len(tokens)}")
            try:
                values = [float(tok) for tok in tokens]
            except ValueError as exc:
                raise TsvFormatError(line_no, f"non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise TsvFormatError(line_no, "non-finite value")
            items.append(TimeSeries(values, label, f"{prefix}-{len(items)}"))
    if not items:
        raise EmptyInputError(f"{path}: no records")
    return LabeledCollection(tuple(items), split)


def save_tsv(collection: Iterable[TimeSeries], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in collection:
            fh.write(s.label + "\t" + "\t".join(repr(float(v)) for v in s.values) + "\n")


# ---------------------------------------------------------------------------
# preprocessing


def z_normalize(s: TimeSeries) -> TimeSeries:
    x = s.values
    std = x.std()
    if std < CONSTANT_STD:
        return s.with_values(np.zeros_like(x))
    return s.with_values((x - x.mean()) / std)


def resample_to_length(s: TimeSeries, length: int) -> TimeSeries:
    """Linear interpolation onto ``length`` evenly spaced points; endpoints are kept."""
    if length < 2:
        raise ValueError("length must be >= 2")
    if length == s.length:
        return s
    src = np.arange(s.length, dtype=np.float64)
    grid = np.linspace(0.0, s.length - 1, length)
    out = np.interp(grid, src, s.values)
    out[0], out[-1] = s.values[0], s.values[-1]
    return s.with_values(out)


def prepare(collection: LabeledCollection, length: int, znorm: bool = True) -> LabeledCollection:
    """Resample every item to ``length`` and optionally z-normalize it."""

    def step(s):
        s = resample_to_length(s, length)
        return z_normalize(s) if znorm else s

    return LabeledCollection(tuple(step(s) for s in collection), collection.split, length)


# ---------------------------------------------------------------------------
# synthetic corpus

_CYCLES = 3


def _waveform(family: str, u: np.ndarray) -> np.ndarray:
    # u in [0, 1): position along the series after the circular phase shift
    angle = 2 * np.pi * _CYCLES * u
    if family == "sine":
        return np.sin(angle)
    if family == "square":
        return np.where(np.sin(angle) >= 0, 1.0, -1.0)
    if family == "triangle":
        return 2 / np.pi * np.arcsin(np.sin(angle))
    if family == "chirp":
        return np.sin(2 * np.pi * (1.0 * u + 3.0 * u * u))
    if family == "ramp":
        return 2 * np.mod(_CYCLES * u, 1.0) - 1
    if family == "two_bump":
        return np.exp(-((u - 0.25) ** 2) / 0.005) + 0.7 * np.exp(-((u - 0.65) ** 2) / 0.005)
    if family == "damped_sine":
        return np.exp(-3 * u) * np.sin(2 * np.pi * 4 * u)
    if family == "noise_burst":
        # the burst pattern is part of the class definition, so it is fixed
        burst = np.random.default_rng(12345).standard_normal(u.size)
        return np.where((u > 0.4) & (u < 0.6), burst, 0.0)
    raise ValueError(f"unknown family {family!r}")


def make_synthetic_corpus(
    n_per_class: int,
    length: int,
    n_classes: int,
    noise_sigma: float,
    seed: int,
    random_phase: bool = True,
    split: str = "train",
    id_prefix: str = "synth",
) -> LabeledCollection:
    """Phase-shifted waveform families with additive Gaussian noise.

    Items are ordered class by class. Every series is z-normalized.
    """
    if not 2 <= n_classes <= len(FAMILIES):
        raise ValueError(f"n_classes must be in [2, {len(FAMILIES)}]")
    if length < 16:
        raise ValueError("length must be >= 16")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    items = []
    for c in range(n_classes):
        family = FAMILIES[c]
        for _ in range(n_per_class):
            phase = rng.uniform() if random_phase else 0.0
            x = _waveform(family, np.mod(t + phase, 1.0))
            if noise_sigma > 0:
                x = x + rng.normal(0.0, noise_sigma, size=length)
            s = TimeSeries(x, family, f"{id_prefix}-{len(items)}")
            items.append(z_normalize(s))
    return LabeledCollection(tuple(items), split, length)


def make_synthetic_splits(
    n_train: int,
    n_val: int,
    n_test: int,
    length: int,
    n_classes: int,
    noise_sigma: float,
    seed: int,
) -> dict:
    """Generate one corpus and cut it per class into train/validation/test.

    Ids are ``train-i``, ``val-i`` and ``test-i`` so that they match what
    :func:`load_tsv` assigns to ``train.tsv``, ``val.tsv`` and ``test.tsv``.
    """
    per_class = n_train + n_val + n_test
    corpus = make_synthetic_corpus(per_class, length, n_classes, noise_sigma, seed)
    parts = {"train": [], "validation": [], "test": []}
    for c in range(n_classes):
        block = corpus.items[c * per_class:(c + 1) * per_class]
        parts["train"].extend(block[:n_train])
        parts["validation"].extend(block[n_train:n_train + n_val])
        parts["test"].extend(block[n_train + n_val:])
    prefixes = {"train": "train", "validation": "val", "test": "test"}
    out = {}
    for split, items in parts.items():
        relabeled = tuple(
            TimeSeries(s.values, s.label, f"{prefixes[split]}-{i}") for i, s in enumerate(items)
        )
        out[split] = LabeledCollection(relabeled, split, length)
    return out


def as_values(x) -> np.ndarray:
    """Raw float64 samples of a TimeSeries or any 1-d sequence."""
    if isinstance(x, TimeSeries):
        return x.values
    return np.asarray(x, dtype=np.float64).ravel()


def stack_values(series: Sequence, dtype=np.float64) -> np.ndarray:
    return np.stack([as_values(s) for s in series]).astype(dtype, copy=False)
