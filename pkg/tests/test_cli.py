import json
import subprocess
import sys

import pytest

from ctsr.cli import main
from ctsr.evaluation import MetricsReport
from ctsr.index import load_index
from ctsr.series import load_tsv, prepare
from ctsr.training import load_checkpoint, validation_ndcg

TRAIN_FLAGS = ["--epochs", "2", "--steps-per-epoch", "2", "--batch-size", "4", "--seed", "3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def parse_query_output(text):
    blocks, cur = {}, None
    for line in text.splitlines():
        if line.startswith("# query "):
            cur = line[len("# query "):]
            blocks[cur] = []
        elif line.strip():
            rank, item, label, score = line.split("\t")
            blocks[cur].append((int(rank), item, label, float(score)))
    return blocks


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--classes", "3", "--per-class", "8", "--val-per-class", "3", "--test-per-class", "3", "--length", "16", "--seed", "7", "--out", str(d / "data")]) == 0
    for kind, extra in (("rn2dwt", ["--templates", "8"]), ("rn1d", []), ("rn2d", [])):
        argv = ["train", "--train", d / "data/train.tsv", "--val", d / "data/val.tsv", "--model", kind, "--out", d / f"{kind}.ctsr", *extra, *TRAIN_FLAGS]
        assert main([str(a) for a in argv]) == 0
    argv = ["index", "--checkpoint", d / "rn2dwt.ctsr", "--corpus", d / "data/train.tsv", "--out", d / "wt.ctsx", "--graph", "--k-graph", "5"]
    assert main([str(a) for a in argv]) == 0
    return d


# ---------------------------------------------------------------------------
# synth


def test_synth_row_counts_and_manifest(work):
    rows = {name: len((work / "data" / name).read_text().splitlines()) for name in ("train.tsv", "val.tsv", "test.tsv")}
    assert rows == {"train.tsv": 24, "val.tsv": 9, "test.tsv": 9}
    m = json.loads((work / "data/manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 7
    assert m["config"]["noise"] == 0.1 and m["config"]["length"] == 16
    assert len(m["outputs"]) == 3 and "total" in m["timings_s"]


def test_synth_default_split_sizes(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--classes", "3", "--per-class", "200", "--length", "64", "--seed", "7", "--out", tmp_path)
    assert code == 0
    assert [len((tmp_path / f).read_text().splitlines()) for f in ("train.tsv", "val.tsv", "test.tsv")] == [600, 150, 150]


def test_synth_is_deterministic(tmp_path, capsys):
    for sub in ("a", "b"):
        run(capsys, "synth", "--classes", "2", "--per-class", "5", "--length", "16", "--seed", "1", "--out", tmp_path / sub)
    for f in ("train.tsv", "val.tsv", "test.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_one_class_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--classes", "1", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "--classes" in capsys.readouterr().err


def test_synth_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "synth", "--classes", "2", "--per-class", "2", "--out", blocker / "sub")
    assert code == 1 and "error" in err


# ---------------------------------------------------------------------------
# train


def test_train_outputs(work):
    rec = load_checkpoint(work / "rn2dwt.ctsr")
    assert rec.model_kind == "rn2dwt" and rec.params["templates"].shape == (8, 16)
    log = (work / "rn2dwt.ctsr.log.tsv").read_text().splitlines()
    assert log[0] == "epoch\ttrain_loss\tval_ndcg10"
    assert len(log) == 1 + 3
    assert (work / "rn2dwt.ctsr.manifest.json").exists()


@pytest.mark.parametrize("kind", ["rn2dwt", "rn1d", "rn2d"])
def test_log_ndcg_matches_reevaluation(work, kind):
    rec = load_checkpoint(work / f"{kind}.ctsr")
    rows = [line.split("\t") for line in (work / f"{kind}.ctsr.log.tsv").read_text().splitlines()[1:]]
    logged = float(rows[rec.epoch][2])
    train = prepare(load_tsv(work / "data/train.tsv"), 16, True)
    val = prepare(load_tsv(work / "data/val.tsv", split="validation"), 16, True)
    assert abs(validation_ndcg(rec.model(), val, train) - logged) <= 1e-9
    assert logged == rec.best_val_ndcg == max(float(r[2]) for r in rows)


def test_train_single_class_surfaces_sampling_error(tmp_path, capsys):
    path = tmp_path / "one.tsv"
    path.write_text("\n".join("a\t" + "\t".join(str(float(i + j)) for j in range(8)) for i in range(4)) + "\n")
    code, _, err = run(capsys, "train", "--train", path, "--val", path, "--model", "rn1d", "--out", tmp_path / "m.ctsr", *TRAIN_FLAGS)
    assert code == 1 and "label" in err.lower()


def test_train_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--train", tmp_path / "nope.tsv", "--val", tmp_path / "nope.tsv", "--out", tmp_path / "m.ctsr")
    assert code == 1 and "nope.tsv" in err


# ---------------------------------------------------------------------------
# index


def test_index_contents(work):
    idx = load_index(work / "wt.ctsx")
    assert len(idx) == 24 and idx.graph is not None and idx.graph.k_graph == 5
    m = json.loads((work / "wt.ctsx.manifest.json").read_text())
    assert m["config"]["k_graph"] == 5 and m["config"]["sample_rate"] == 0.5


def test_index_rejects_pairwise_checkpoint(work, capsys, tmp_path):
    code, _, err = run(capsys, "index", "--checkpoint", work / "rn2d.ctsr", "--corpus", work / "data/train.tsv", "--out", tmp_path / "x.ctsx")
    assert code == 1 and "rn2d" in err
    assert not (tmp_path / "x.ctsx").exists()


# ---------------------------------------------------------------------------
# query


def test_self_query_ranks_first_with_zero_score(work, capsys):
    code, out, _ = run(capsys, "query", "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr", "--queries", work / "data/train.tsv", "--k", 3)
    assert code == 0
    blocks = parse_query_output(out)
    assert len(blocks) == 24
    for qid, rows in blocks.items():
        assert rows[0][0] == 1 and rows[0][1] == qid and rows[0][3] == 0.0
        assert [r[0] for r in rows] == [1, 2, 3]
        assert all(a[3] >= b[3] for a, b in zip(rows, rows[1:]))


def test_ann_with_exhaustive_pool_equals_exact(work, capsys):
    common = ["query", "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr", "--queries", work / "data/test.tsv", "--k", 10]
    _, exact, _ = run(capsys, *common)
    _, ann, _ = run(capsys, *common, "--mode", "ann", "--candidates", 24)
    assert exact == ann


def test_k_larger_than_n(work, capsys):
    _, out, _ = run(capsys, "query", "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr", "--queries", work / "data/test.tsv", "--k", 100)
    assert all(len(rows) == 24 for rows in parse_query_output(out).values())


def test_pairwise_query_and_dump(work, capsys, tmp_path):
    dump = tmp_path / "dump.tsv"
    code, out, _ = run(capsys, "query", "--mode", "pairwise", "--checkpoint", work / "rn2d.ctsr", "--corpus", work / "data/train.tsv", "--queries", work / "data/test.tsv", "--k", 2, "--dump-series", dump)
    assert code == 0
    blocks = parse_query_output(out)
    assert len(blocks) == 9 and all(len(r) == 2 for r in blocks.values())
    lines = dump.read_text().splitlines()
    assert len(lines) == 18 and len(lines[0].split("\t")) == 4 + 16


@pytest.mark.parametrize(
    "argv",
    [
        ["--mode", "pairwise", "--checkpoint", "rn2dwt.ctsr", "--corpus", "data/train.tsv"],
        ["--mode", "exact", "--index", "wt.ctsx", "--checkpoint", "rn2d.ctsr"],
        ["--mode", "exact", "--index", "wt.ctsx", "--checkpoint", "rn1d.ctsr"],
        ["--mode", "ann", "--checkpoint", "rn2dwt.ctsr"],
    ],
)
def test_mode_model_mismatch_is_usage_error(work, capsys, argv):
    argv = [str(work / a) if a.endswith((".ctsr", ".ctsx", ".tsv")) else a for a in argv]
    with pytest.raises(SystemExit) as exc:
        main(["query", "--queries", str(work / "data/test.tsv"), *argv])
    assert exc.value.code == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# evaluate


def _evaluate(capsys, work, out, *extra):
    return run(capsys, "evaluate", "--queries", work / "data/test.tsv", "--out", out, *extra)


def test_evaluate_paths_agree(work, capsys, tmp_path):
    via_index = tmp_path / "a.json"
    via_corpus = tmp_path / "b.json"
    assert _evaluate(capsys, work, via_index, "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr", "--k-grid", "5..15")[0] == 0
    assert _evaluate(capsys, work, via_corpus, "--checkpoint", work / "rn2dwt.ctsr", "--corpus", work / "data/train.tsv", "--k-grid", "5..15")[0] == 0
    a, b = MetricsReport.load(via_index), MetricsReport.load(via_corpus)
    assert a.k_grid == list(range(5, 16)) and len(a.means) == 33
    assert a.per_query == b.per_query
    assert a.mean_query_time_s > 0


def test_evaluate_baseline_and_pairwise(work, capsys, tmp_path):
    assert _evaluate(capsys, work, tmp_path / "ed.json", "--baseline", "ed", "--corpus", work / "data/train.tsv")[0] == 0
    assert _evaluate(capsys, work, tmp_path / "pw.json", "--mode", "pairwise", "--checkpoint", work / "rn2d.ctsr", "--corpus", work / "data/train.tsv")[0] == 0
    for name in ("ed.json", "pw.json"):
        r = MetricsReport.load(tmp_path / name)
        assert r.n_queries == 9 and 0 <= r.mean("ndcg") <= 1


def test_evaluate_all_same_label(tmp_path, capsys):
    rows = "\n".join("a\t" + "\t".join(str(float((i * 7 + j) % 5)) for j in range(8)) for i in range(12))
    (tmp_path / "db.tsv").write_text(rows + "\n")
    code, _, _ = run(capsys, "evaluate", "--baseline", "dtw", "--corpus", tmp_path / "db.tsv", "--queries", tmp_path / "db.tsv", "--k-grid", "3,5", "--out", tmp_path / "r.json")
    assert code == 0
    assert all(v == 1.0 for v in MetricsReport.load(tmp_path / "r.json").means.values())


def test_evaluate_unlabeled_queries(work, tmp_path, capsys):
    rows = (work / "data/test.tsv").read_text().splitlines()
    (tmp_path / "q.tsv").write_text("\n".join("\t" + r.split("\t", 1)[1] for r in rows) + "\n")
    code, _, err = run(capsys, "evaluate", "--queries", tmp_path / "q.tsv", "--baseline", "ed", "--corpus", work / "data/train.tsv", "--out", tmp_path / "r.json")
    assert code == 1 and "label" in err
    assert not (tmp_path / "r.json").exists()
    # querying does not need labels
    code, out, _ = run(capsys, "query", "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr", "--queries", tmp_path / "q.tsv", "--k", 1)
    assert code == 0 and len(parse_query_output(out)) == 9


# ---------------------------------------------------------------------------
# sweep and bench


def test_sweep_rows_match_standalone_runs(work, capsys, tmp_path):
    out = tmp_path / "sweep.json"
    code, _, _ = run(capsys, "sweep-templates", "--train", work / "data/train.tsv", "--val", work / "data/val.tsv", "--test", work / "data/test.tsv", "--grid", "8,16", "--out", out, *TRAIN_FLAGS)
    assert code == 0
    sweep = json.loads(out.read_text())
    assert [r["templates"] for r in sweep["rows"]] == [8, 16]
    assert sweep["spread"]["ndcg@10"] == pytest.approx(abs(sweep["rows"][0]["ndcg@10"] - sweep["rows"][1]["ndcg@10"]))
    # the K=8 row must agree with the standalone train (same flags) and evaluate
    run(capsys, "evaluate", "--checkpoint", work / "rn2dwt.ctsr", "--corpus", work / "data/train.tsv", "--queries", work / "data/test.tsv", "--out", tmp_path / "r.json")
    standalone = MetricsReport.load(tmp_path / "r.json")
    for m in ("prec", "ap", "ndcg"):
        assert sweep["rows"][0][f"{m}@10"] == standalone.mean(m, 10)


def test_bench_trunk_counts(work, capsys, tmp_path):
    out = tmp_path / "bench.json"
    code, _, _ = run(
        capsys, "bench", "--modes", "exact,ann,pairwise", "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr",
        "--pairwise-checkpoint", work / "rn2d.ctsr", "--corpus", work / "data/train.tsv", "--queries", work / "data/test.tsv",
        "--n-queries", 3, "--out", out,
    )
    assert code == 0
    res = json.loads(out.read_text())
    assert res["exact"]["trunk_calls_per_query"] == 1
    assert res["ann"]["trunk_calls_per_query"] == 1
    assert res["pairwise"]["trunk_calls_per_query"] == 24
    assert all(res[m]["mean_query_s"] > 0 for m in res)


def test_bench_missing_artifacts(work, capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--modes", "pairwise", "--queries", str(work / "data/test.tsv"), "--out", str(tmp_path / "b.json")])
    assert exc.value.code == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# reproducibility


def test_rerun_is_bitwise_identical(work, capsys, tmp_path):
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        run(capsys, "train", "--train", work / "data/train.tsv", "--val", work / "data/val.tsv", "--templates", 8, "--out", d / "m.ctsr", *TRAIN_FLAGS)
        run(capsys, "index", "--checkpoint", d / "m.ctsr", "--corpus", work / "data/train.tsv", "--out", d / "i.ctsx", "--graph", "--k-graph", 5)
        run(capsys, "evaluate", "--index", d / "i.ctsx", "--checkpoint", d / "m.ctsr", "--queries", work / "data/test.tsv", "--mode", "ann", "--out", d / "r.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "m.ctsr").read_bytes() == (b / "m.ctsr").read_bytes() == (work / "rn2dwt.ctsr").read_bytes()
    assert (a / "i.ctsx").read_bytes() == (b / "i.ctsx").read_bytes() == (work / "wt.ctsx").read_bytes()
    ra, rb = MetricsReport.load(a / "r.json"), MetricsReport.load(b / "r.json")
    assert ra.per_query == rb.per_query and ra.means == rb.means


def test_inputs_not_mutated(work, capsys, tmp_path):
    before = {p: p.read_bytes() for p in (work / "data/train.tsv", work / "rn2dwt.ctsr", work / "wt.ctsx")}
    run(capsys, "query", "--index", work / "wt.ctsx", "--checkpoint", work / "rn2dwt.ctsr", "--corpus", work / "data/train.tsv", "--queries", work / "data/train.tsv", "--manifest", tmp_path / "m.json")
    assert all(p.read_bytes() == b for p, b in before.items())
    assert json.loads((tmp_path / "m.json").read_text())["command"] == "query"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ctsr", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.strip().endswith("0.1.0")
