"""``ctsr`` command line: synth, train, index, query, evaluate, sweep-templates, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import NamedTuple

from . import __version__
from .binio import FormatError
from .evaluation import evaluate_rankings, parse_k_grid
from .index import (
    DEFAULT_CANDIDATES,
    DEFAULT_DELTA,
    DEFAULT_K_GRAPH,
    DEFAULT_MAX_ITERS,
    DEFAULT_SAMPLE_RATE,
    build_exact_index,
    load_index,
    nn_descent_build,
    nn_descent_query,
    query_pairwise_scan,
    save_index,
    search_exact,
)
from .models import EMBEDDING_KINDS, ModelKindError, params_digest
from .series import LabeledCollection, load_tsv, make_synthetic_splits, prepare, save_tsv
from .training import (
    SamplingError,
    TrainConfig,
    TrainingError,
    evaluate_baseline,
    evaluate_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

DEFAULT_NOISE = 0.1


class _Entry(NamedTuple):
    series_id: str
    label: str


class UsageError(Exception):
    """Bad flag combination; reported with exit status 2."""


# ---------------------------------------------------------------------------
# helpers


def _write_manifest(path, args, inputs, outputs, timings):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "timings_s": timings,
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _load_split(path, length, znorm, split="train") -> LabeledCollection:
    raw = load_tsv(path, split=split)
    if length is None:
        length = raw.fixed_length
        if length is None:
            raise UsageError(f"{path}: series lengths differ; pass --length")
    return prepare(raw, length, znorm)


def _load_model(path, kinds=None):
    rec = load_checkpoint(path)
    return rec, model_from_checkpoint(rec, kinds)


def _check_index_matches(index, model):
    if index.checkpoint_hash and index.checkpoint_hash != params_digest(model.params):
        raise UsageError("index was built with a different checkpoint")


def _score_text(x: float) -> str:
    return repr(float(x) + 0.0)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    n_val = args.per_class // 4 if args.val_per_class is None else args.val_per_class
    n_test = args.per_class // 4 if args.test_per_class is None else args.test_per_class
    t0 = time.perf_counter()
    splits = make_synthetic_splits(args.per_class, n_val, n_test, args.length, args.classes, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"train": out / "train.tsv", "validation": out / "val.tsv", "test": out / "test.tsv"}
    for split, path in files.items():
        save_tsv(splits[split], path)
        print(f"{path}\t{len(splits[split])} rows")
    _write_manifest(_manifest_path(args, out / "manifest.json"), args, [], files.values(), {"total": time.perf_counter() - t0})


def _train_config(args, model_kind, n_templates, length) -> TrainConfig:
    return TrainConfig(
        model_kind=model_kind,
        n_templates=n_templates,
        series_length=length,
        batch_size=args.batch_size,
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        max_val_queries=args.max_val_queries,
    )


def cmd_train(args):
    t0 = time.perf_counter()
    train_set = _load_split(args.train, args.length, not args.no_znorm)
    val_set = _load_split(args.val, train_set.fixed_length, not args.no_znorm, "validation")
    config = _train_config(args, args.model, args.templates, train_set.fixed_length)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_ndcg10\n")

        def on_epoch(entry):
            fh.write(f"{entry['epoch']}\t{entry['train_loss']!r}\t{entry['val_ndcg10']!r}\n")
            fh.flush()
            print(f"epoch {entry['epoch']}: loss {entry['train_loss']:.5f} val ndcg@10 {entry['val_ndcg10']:.5f}", file=sys.stderr)

        rec = train(train_set, val_set, config, on_epoch)
    save_checkpoint(rec, out)
    print(f"{out}\tbest epoch {rec.epoch}\tval ndcg@10 {rec.best_val_ndcg!r}")
    timings = {"total": time.perf_counter() - t0}
    _write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), args, [args.train, args.val], [out, log_path], timings)


def cmd_index(args):
    t0 = time.perf_counter()
    rec, model = _load_model(args.checkpoint)
    if model.kind not in EMBEDDING_KINDS:
        raise ModelKindError(f"cannot index with a {model.kind} checkpoint; use pairwise scan instead")
    corpus = _load_split(args.corpus, model.length, not args.no_znorm)
    index = build_exact_index(corpus, model)
    timings = {"embed": time.perf_counter() - t0}
    if args.graph:
        t1 = time.perf_counter()
        index.graph = nn_descent_build(index, args.k_graph, args.sample_rate, args.delta, args.max_iters, args.seed)
        timings["graph"] = time.perf_counter() - t1
    out = Path(args.out)
    save_index(index, out)
    extra = f"\tgraph k={index.graph.k_graph} iterations={index.graph.iterations}" if index.graph else ""
    print(f"{out}\t{len(index)} items{extra}")
    timings["total"] = time.perf_counter() - t0
    _write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), args, [args.checkpoint, args.corpus], [out], timings)


def _query_runner(args):
    """Returns ``(run(q, k) -> QueryResult, database collection or None, model)``."""
    if args.mode == "pairwise":
        ckpt = getattr(args, "pairwise_checkpoint", None) or args.checkpoint
        if not ckpt or not args.corpus:
            raise UsageError("--mode pairwise needs an rn2d checkpoint and --corpus")
        _, model = _load_model(ckpt)
        if model.kind != "rn2d":
            raise UsageError(f"--mode pairwise needs an rn2d checkpoint, got {model.kind}")
        corpus = _load_split(args.corpus, model.length, not args.no_znorm)
        return (lambda q, k: query_pairwise_scan(corpus, q, k, model)), corpus, model
    if not args.index or not args.checkpoint:
        raise UsageError(f"--mode {args.mode} needs --index and the --checkpoint it was built with")
    _, model = _load_model(args.checkpoint)
    if model.kind not in EMBEDDING_KINDS:
        raise UsageError(f"--mode {args.mode} needs an embedding checkpoint, got {model.kind}")
    index = load_index(args.index)
    _check_index_matches(index, model)
    corpus = _load_split(args.corpus, model.length, not args.no_znorm) if args.corpus else None
    if args.mode == "exact":
        return (lambda q, k: search_exact(index, model.embed(q), min(k, len(index)))), corpus, model
    if index.graph is None:
        raise UsageError("--mode ann needs an index built with --graph")

    def run(q, k):
        k = min(k, len(index))
        return nn_descent_query(index.graph, index, model.embed(q), k, max(k, min(args.candidates, len(index))), args.seed)

    return run, corpus, model


def cmd_query(args):
    t0 = time.perf_counter()
    run, corpus, model = _query_runner(args)
    queries = _load_split(args.queries, model.length, not args.no_znorm)
    if args.dump_series and corpus is None:
        raise UsageError("--dump-series needs --corpus to look up retrieved series")
    by_id = {s.series_id: s for s in corpus} if corpus is not None else {}
    label_of = {s.series_id: s.label for s in corpus} if corpus is not None else None
    if label_of is None and args.index:
        idx = load_index(args.index)
        label_of = dict(zip(idx.item_ids, idx.labels))
    dump = open(args.dump_series, "w", encoding="utf-8") if args.dump_series else None
    try:
        for q in queries:
            res = run(q, args.k)
            print(f"# query {q.series_id}")
            for rank, (item_id, score) in enumerate(res.items, start=1):
                print(f"{rank}\t{item_id}\t{label_of[item_id]}\t{_score_text(score)}")
                if dump:
                    vals = "\t".join(repr(float(v)) for v in by_id[item_id].values)
                    dump.write(f"{q.series_id}\t{rank}\t{item_id}\t{label_of[item_id]}\t{vals}\n")
    finally:
        if dump:
            dump.close()
    inputs = [p for p in (args.index, args.checkpoint, args.corpus, args.queries) if p]
    outputs = [args.dump_series] if args.dump_series else []
    default = Path(args.queries).with_name(Path(args.queries).name + ".query-manifest.json")
    _write_manifest(_manifest_path(args, default), args, inputs, outputs, {"total": time.perf_counter() - t0})


def _evaluate(args, queries_path, k_grid):
    if args.baseline:
        if not args.corpus:
            raise UsageError("--baseline needs --corpus")
        database = _load_split(args.corpus, args.length, not args.no_znorm)
        queries = _load_split(queries_path, database.fixed_length, not args.no_znorm, "test")
        return evaluate_baseline(args.baseline, queries, database, k_grid)
    if not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint or --baseline")
    _, model = _load_model(args.checkpoint)
    queries = _load_split(queries_path, model.length, not args.no_znorm, "test")
    if args.mode == "pairwise" or (args.mode == "exact" and not args.index):
        if args.mode == "pairwise" and model.kind != "rn2d":
            raise UsageError(f"--mode pairwise needs an rn2d checkpoint, got {model.kind}")
        if args.mode == "exact" and model.kind not in EMBEDDING_KINDS:
            raise UsageError("an rn2d checkpoint only supports --mode pairwise")
        if not args.corpus:
            raise UsageError("evaluating without --index needs --corpus")
        database = _load_split(args.corpus, model.length, not args.no_znorm)
        t0 = time.perf_counter()
        report = evaluate_model(model, queries, database, k_grid)
        report.mean_query_time_s = (time.perf_counter() - t0) / len(queries)
        return report
    if not args.index:
        raise UsageError(f"--mode {args.mode} needs --index")
    if model.kind not in EMBEDDING_KINDS:
        raise UsageError(f"--mode {args.mode} needs an embedding checkpoint")
    index = load_index(args.index)
    _check_index_matches(index, model)
    if args.mode == "ann" and index.graph is None:
        raise UsageError("--mode ann needs an index built with --graph")
    database = [_Entry(i, lab) for i, lab in zip(index.item_ids, index.labels)]
    db_ids = set(index.item_ids)
    kmax = max(k_grid)
    t0 = time.perf_counter()
    Q = model.embed_many(queries.matrix())
    rankings = []
    for q, qe in zip(queries, Q):
        k = min(kmax + (q.series_id in db_ids), len(index))
        if args.mode == "exact":
            rankings.append(search_exact(index, qe, k))
        else:
            rankings.append(nn_descent_query(index.graph, index, qe, k, max(k, min(args.candidates, len(index))), args.seed))
    elapsed = (time.perf_counter() - t0) / len(queries)
    return evaluate_rankings(list(queries), database, rankings, k_grid, elapsed)


def cmd_evaluate(args):
    t0 = time.perf_counter()
    k_grid = parse_k_grid(args.k_grid)
    report = _evaluate(args, args.queries, k_grid)
    out = Path(args.out)
    report.save(out)
    for k in k_grid:
        print(f"k={k}\tprec {report.mean('prec', k):.6f}\tap {report.mean('ap', k):.6f}\tndcg {report.mean('ndcg', k):.6f}")
    print(f"mean query time {report.mean_query_time_s * 1e3:.3f} ms over {report.n_queries} queries")
    inputs = [p for p in (args.index, args.checkpoint, args.corpus, args.queries) if p]
    _write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), args, inputs, [out], {"total": time.perf_counter() - t0})


def cmd_sweep_templates(args):
    t0 = time.perf_counter()
    grid = parse_k_grid(args.grid)
    train_set = _load_split(args.train, args.length, not args.no_znorm)
    val_set = _load_split(args.val, train_set.fixed_length, not args.no_znorm, "validation")
    test_set = _load_split(args.test, train_set.fixed_length, not args.no_znorm, "test")
    rows = []
    for K in grid:
        config = _train_config(args, "rn2dwt", K, train_set.fixed_length)
        rec = train(train_set, val_set, config)
        report = evaluate_model(rec.model(), test_set, train_set)
        row = {"templates": K, "best_epoch": rec.epoch, "val_ndcg@10": rec.best_val_ndcg}
        for m in ("prec", "ap", "ndcg"):
            row[f"{m}@10"] = report.mean(m, 10)
        rows.append(row)
        print(f"K={K}\tprec@10 {row['prec@10']:.6f}\tap@10 {row['ap@10']:.6f}\tndcg@10 {row['ndcg@10']:.6f}")
    spread = {m: max(r[m] for r in rows) - min(r[m] for r in rows) for m in ("prec@10", "ap@10", "ndcg@10")}
    print("spread\t" + "\t".join(f"{m} {v:.6f}" for m, v in spread.items()))
    out = Path(args.out)
    out.write_text(json.dumps({"rows": rows, "spread": spread}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), args, [args.train, args.val, args.test], [out], {"total": time.perf_counter() - t0})


def cmd_bench(args):
    t0 = time.perf_counter()
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = set(modes) - {"exact", "ann", "pairwise"}
    if bad or not modes:
        raise UsageError(f"unknown bench modes: {sorted(bad) or modes}")
    results = {}
    for mode in modes:
        args.mode = mode
        run, _, model = _query_runner(args)
        queries = list(_load_split(args.queries, model.length, not args.no_znorm))[: args.n_queries]
        run(queries[0], args.k)  # warm-up: numba compilation, caches
        model.trunk_calls = 0
        t1 = time.perf_counter()
        for q in queries:
            run(q, args.k)
        elapsed = time.perf_counter() - t1
        results[mode] = {
            "mean_query_s": elapsed / len(queries),
            "trunk_calls_per_query": model.trunk_calls / len(queries),
            "n_queries": len(queries),
        }
        print(f"{mode}\t{results[mode]['mean_query_s'] * 1e3:.3f} ms/query\t{results[mode]['trunk_calls_per_query']:g} trunk calls/query")
    out = Path(args.out)
    out.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    inputs = [p for p in (args.index, args.checkpoint, args.corpus, args.queries) if p]
    _write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), args, inputs, [out], {"total": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="manifest path (default: next to the main output)")


def _add_prep(p):
    p.add_argument("--length", type=int, help="resample series to this length (default: as stored)")
    p.add_argument("--no-znorm", action="store_true", help="skip z-normalization")


def _add_training(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps-per-epoch", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--max-val-queries", type=int, default=0, help="validation queries per epoch (0 = all)")


def _add_query_inputs(p):
    p.add_argument("--index")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", help="database TSV (pairwise mode, baselines, --dump-series)")
    p.add_argument("--queries", required=True)
    p.add_argument("--candidates", type=int, default=DEFAULT_CANDIDATES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctsr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled corpus (train/val/test TSV)")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=200, help="training series per class")
    p.add_argument("--val-per-class", type=int, help="default: per-class / 4")
    p.add_argument("--test-per-class", type=int, help="default: per-class / 4")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and keep the best validation epoch")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--model", choices=("rn2dwt", "rn2d", "rn1d"), default="rn2dwt")
    p.add_argument("--templates", type=int, default=32)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_prep(p)
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="embed a corpus into an index file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graph", action="store_true", help="also build an NN-descent k-NN graph")
    p.add_argument("--k-graph", type=int, default=DEFAULT_K_GRAPH)
    p.add_argument("--sample-rate", type=float, default=DEFAULT_SAMPLE_RATE)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--no-znorm", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="print the top-k items for each query series")
    _add_query_inputs(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--mode", choices=("exact", "ann", "pairwise"), default="exact")
    p.add_argument("--dump-series", help="write retrieved series to this TSV")
    p.add_argument("--no-znorm", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="Prec/AP/NDCG over a labeled query split")
    _add_query_inputs(p)
    p.add_argument("--baseline", choices=("ed", "dtw"), help="evaluate a fixed distance instead of a model")
    p.add_argument("--mode", choices=("exact", "ann", "pairwise"), default="exact")
    p.add_argument("--k-grid", default="10", help="e.g. 10, 5,10 or 5..15")
    p.add_argument("--out", required=True, help="report JSON path")
    _add_prep(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-templates", help="train and test RN2Dw/T for several template counts")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--grid", default="8,16,24,32,40,48")
    p.add_argument("--out", required=True, help="report JSON path")
    _add_prep(p)
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep_templates)

    p = sub.add_parser("bench", help="mean query time and trunk calls per query for each mode")
    _add_query_inputs(p)
    p.add_argument("--modes", default="exact", help="comma list of exact, ann, pairwise")
    p.add_argument("--pairwise-checkpoint", help="rn2d checkpoint for pairwise mode (default: --checkpoint)")
    p.add_argument("--n-queries", type=int, default=20)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--no-znorm", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, FormatError, ModelKindError, SamplingError, TrainingError) as exc:
        print(f"ctsr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
