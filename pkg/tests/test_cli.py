import json

import pytest

from sarlab.cli import main

DATA_FLAGS = ["--topics", "2", "--articles-per-topic", "16", "--queries", "26", "--val", "4",
              "--test", "6", "--set", "data.concepts_per_topic=4", "--set", "data.topic_words=10",
              "--set", "data.common_words=20", "--set", "data.background_words=40"]
TINY = ["--set", "encoder.dim=8", "--set", "encoder.layers=1", "--set", "encoder.heads=2",
        "--set", "encoder.ff_dim=16", "--set", "encoder.chunk_len=8",
        "--set", "encoder.max_chunks=3", "--set", "encoder.query_max_len=12",
        "--set", "encoder.article_layers=1", "--set", "stage1.epochs=2",
        "--set", "stage1.batch_size=8"]
STAGE2 = ["--set", "stage2.epochs=2", "--set", "stage2.batch_size=8", "--set", "stage2.gat_heads=2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("generate", *DATA_FLAGS, "--seed", 3, "--out", data) == 0
    assert run("index", "--data", data, "--out", root / "bm25") == 0
    assert run("train", "--stage", 1, "--data", data, *TINY, "--seed", 1, "--out", root / "s1") == 0
    assert run("train", "--stage", 2, "--from", root / "s1", *STAGE2, "--seed", 1,
               "--out", root / "s2") == 0
    return root


class TestGenerate:
    def test_summary_and_files(self, tmp_path, capsys):
        assert run("generate", *DATA_FLAGS, "--seed", 7, "--out", tmp_path / "d") == 0
        assert "32 articles, 26 queries (16 train / 4 validation / 6 test)" in capsys.readouterr().out
        for name in ("articles.jsonl", "queries.jsonl", "split.json", "config.ini"):
            assert (tmp_path / "d" / name).is_file()

    def test_same_invocation_same_bytes(self, tmp_path, monkeypatch):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            monkeypatch.chdir(tmp_path / sub)
            assert run("generate", *DATA_FLAGS, "--seed", 7, "--out", "data") == 0
        for name in ("articles.jsonl", "queries.jsonl", "split.json", "config.ini"):
            assert ((tmp_path / "a" / "data" / name).read_bytes()
                    == (tmp_path / "b" / "data" / name).read_bytes())

    def test_infeasible_spec(self, tmp_path, capsys):
        code = run("generate", "--articles-per-topic", 2, "--set", "data.relevant_min=3",
                   "--set", "data.relevant_max=5", "--out", tmp_path / "d")
        assert code != 0
        assert "infeasible" in capsys.readouterr().err

    def test_too_few_queries(self, tmp_path):
        assert run("generate", "--queries", 5, "--val", 3, "--test", 3, "--out", tmp_path) == 1


class TestUsage:
    @pytest.mark.parametrize("argv", [
        [], ["frobnicate"], ["train", "--out", "x"], ["eval", "--runs", "r", "--k", "0"],
        ["generate", "--out", "x", "--set", "nodot=1"],
        ["generate", "--out", "x", "--set", "stage2.nope=1"],
    ])
    def test_exit_one(self, argv):
        assert main(argv) == 1

    def test_stage2_flags_rejected_for_stage1(self, workspace, tmp_path):
        assert run("train", "--stage", 1, "--kd-mode", "none", "--data", workspace / "data",
                   "--out", tmp_path / "x") == 1

    def test_stage2_needs_from(self, tmp_path):
        assert run("train", "--stage", 2, "--out", tmp_path / "x") == 1

    def test_inconsistent_ablation(self, workspace, tmp_path):
        assert run("train", "--stage", 2, "--from", workspace / "s1", "--graph", "none",
                   "--kd-mode", "score", "--out", tmp_path / "x") == 1


class TestTrain:
    def test_stage1_run_directory(self, workspace):
        s1 = workspace / "s1"
        meta = json.loads((s1 / "run.json").read_text())
        assert meta["kind"] == "stage1" and meta["name"] == "be"
        curve = [json.loads(line) for line in (s1 / "curve.jsonl").read_text().splitlines()]
        assert {"step", "loss", "lr"} <= set(curve[0])
        assert "seed = 1" in (s1 / "config.ini").read_text()

    def test_stage2_run_directory(self, workspace):
        s2 = workspace / "s2"
        meta = json.loads((s2 / "run.json").read_text())
        assert meta["kind"] == "stage2" and meta["name"] == "qabisar"
        assert (s2 / "graph" / "edges.jsonl").is_file()

    @pytest.mark.parametrize("flags,name", [
        (["--kd-mode", "none", "--graph", "statute-only"], "be+ge-stat"),
        (["--schedule", "sequential"], "sequential"),
        (["--kd-mode", "both"], "both-kd"),
    ])
    def test_ablation_flags(self, workspace, tmp_path, flags, name):
        assert run("train", "--stage", 2, "--from", workspace / "s1", *STAGE2, *flags,
                   "--out", tmp_path / "r") == 0
        assert json.loads((tmp_path / "r" / "run.json").read_text())["name"] == name

    def test_missing_stage1_artifacts(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("train", "--stage", 2, "--from", tmp_path / "empty",
                   "--out", tmp_path / "x") == 2

    def test_stage2_from_wrong_kind(self, workspace, tmp_path):
        assert run("train", "--stage", 2, "--from", workspace / "s2", "--out", tmp_path / "x") == 2

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--stage", 1, "--data", tmp_path / "nowhere",
                   "--out", tmp_path / "x") == 2


class TestEval:
    def test_table_and_files(self, workspace, tmp_path, capsys):
        runs = [workspace / "bm25", workspace / "s1", workspace / "s2"]
        assert run("eval", "--runs", *runs, "--k", "5,10", "--out", tmp_path / "cmp") == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].split() == ["config", "R@5", "R@10", "MAP", "MRP"]
        assert [line.split()[0] for line in out.splitlines()[2:5]] == ["bm25", "be", "qabisar"]
        assert (tmp_path / "cmp" / "table.txt").read_text() == out
        records = (tmp_path / "cmp" / "report.jsonl").read_text().splitlines()
        assert len(records) == 3 * 4

    def test_rerun_reproduces_stored_report(self, workspace):
        s2 = workspace / "s2"
        assert run("eval", "--runs", s2) == 0
        first = (s2 / "report-test.jsonl").read_bytes()
        assert run("eval", "--runs", s2) == 0
        assert (s2 / "report-test.jsonl").read_bytes() == first

    def test_bm25_literal_needs_data(self, workspace):
        assert run("eval", "--runs", "bm25") == 1
        assert run("eval", "--runs", "bm25", "--data", workspace / "data") == 0

    def test_unknown_run(self, tmp_path):
        assert run("eval", "--runs", tmp_path / "missing") != 0

    def test_mismatched_splits(self, workspace, tmp_path):
        other = tmp_path / "other"
        assert run("generate", *DATA_FLAGS, "--seed", 9, "--out", other) == 0
        assert run("index", "--data", other, "--out", tmp_path / "bm25b") == 0
        assert run("eval", "--runs", workspace / "bm25", tmp_path / "bm25b") == 2


class TestInfer:
    def test_ranks_printed(self, workspace, capsys):
        assert run("infer", "--run", workspace / "s2", "--text", "contrat de bail", "--k", 3) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == ["1", "2", "3"]
        scores = [float(line.split("\t")[2]) for line in lines]
        assert scores == sorted(scores, reverse=True)

    def test_sparse_run_rejected(self, workspace):
        assert run("infer", "--run", workspace / "bm25", "--text", "x") == 2


class TestDeterminism:
    def test_repeated_training_is_byte_identical(self, workspace, tmp_path):
        data, s1 = workspace / "data", workspace / "s1"
        assert run("train", "--stage", 1, "--data", data, *TINY, "--seed", 1,
                   "--out", tmp_path / "s1") == 0
        assert run("train", "--stage", 2, "--from", s1, *STAGE2, "--seed", 1,
                   "--out", tmp_path / "s2") == 0
        for name in ("checkpoint.npz", "curve.jsonl", "history.jsonl", "embeddings.tsv",
                     "config.ini"):
            assert (tmp_path / "s1" / name).read_bytes() == (s1 / name).read_bytes()
            assert (tmp_path / "s2" / name).read_bytes() == (workspace / "s2" / name).read_bytes()
