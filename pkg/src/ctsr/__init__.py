"""Content-based time-series retrieval with learned residual encoders."""

from .distance import dtw_distance, euclidean_distance
from .evaluation import MetricsReport, average_precision_at_k, ndcg_at_k, precision_at_k, two_sample_t_test
from .index import FeatureIndex, QueryResult, build_exact_index, nn_descent_build, nn_descent_query, query_exact
from .models import Rn1D, Rn2D, Rn2DwT, init_model
from .series import LabeledCollection, TimeSeries, load_tsv, make_synthetic_corpus, make_synthetic_splits, prepare
from .training import CheckpointRecord, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "dtw_distance",
    "euclidean_distance",
    "MetricsReport",
    "average_precision_at_k",
    "ndcg_at_k",
    "precision_at_k",
    "two_sample_t_test",
    "FeatureIndex",
    "QueryResult",
    "build_exact_index",
    "nn_descent_build",
    "nn_descent_query",
    "query_exact",
    "Rn1D",
    "Rn2D",
    "Rn2DwT",
    "init_model",
    "LabeledCollection",
    "TimeSeries",
    "load_tsv",
    "make_synthetic_corpus",
    "make_synthetic_splits",
    "prepare",
    "CheckpointRecord",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
