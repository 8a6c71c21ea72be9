import csv
import json

import pytest

from yolor.cli import main

SMALL = ["--set", "hidden=16,8", "--set", "batch_size=64"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--m", "4", "--n", "4", "--seed", "7", "--num-train", "400",
                 "--num-test", "200", "--num-requests", "6", "--num-items", "30", "--num-users", "40"]) == 0
    assert main(["train", "--data", str(data), "--config", str(data / "config.json"), "--epochs", "2",
                 "--out", str(root / "train"), *SMALL]) == 0
    return root


def test_gen_data_outputs(pipeline):
    data = pipeline / "data"
    for name in ("train.jsonl", "test.jsonl", "truth.jsonl", "config.json", "world.json"):
        assert (data / name).exists()
    cfg = json.loads((data / "config.json").read_text())
    assert cfg["item_vocab"] == 30 and cfg["user_vocab"] == 40


def test_train_outputs(pipeline):
    out = pipeline / "train"
    rows = list(csv.DictReader(open(out / "losses.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert (out / "model.npz").exists()


def test_evaluate(pipeline, capsys):
    out = pipeline / "eval"
    assert main(["evaluate", "--checkpoint", str(pipeline / "train" / "model.npz"), "--data",
                 str(pipeline / "data"), "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert 0 <= m["auc"] <= 1 and 0 <= m["gauc"] <= 1
    assert m["seed"] == 7 and len(m["config_hash"]) > 0 and m["build_id"]


def test_rerank_deterministic(pipeline):
    outs = []
    for name in ("r1", "r2"):
        assert main(["rerank", "--checkpoint", str(pipeline / "train" / "model.npz"), "--data",
                     str(pipeline / "data"), "--out", str(pipeline / name),
                     "--index-dir", str(pipeline / "idx")]) == 0
        outs.append((pipeline / name / "rerank.jsonl").read_bytes())
    assert outs[0] == outs[1]
    recs = [json.loads(line) for line in outs[0].splitlines()]
    assert len(recs) == 6 and all(sorted(r["best_permutation"]) == [0, 1, 2, 3] for r in recs)
    assert list((pipeline / "idx").glob("index_n4_m4_*.bin"))


def test_rerank_weights(pipeline):
    assert main(["rerank", "--checkpoint", str(pipeline / "train" / "model.npz"), "--data",
                 str(pipeline / "data"), "--out", str(pipeline / "rw"), "--weights", "1,0,0,0"]) == 0
    assert main(["rerank", "--checkpoint", str(pipeline / "train" / "model.npz"), "--data",
                 str(pipeline / "data"), "--out", str(pipeline / "rw"), "--weights", "1,0"]) == 1


def test_bench_counts(pipeline):
    out = pipeline / "bench"
    assert main(["bench", "--checkpoint", str(pipeline / "train" / "model.npz"), "--data",
                 str(pipeline / "data"), "--out", str(out), "--repetitions", "3", "--warmup", "1",
                 "--k", "5", "24", "--draws", "2"]) == 0
    m = json.loads((out / "bench_metrics.json").read_text())
    counts = {(c["mode"], c["k"]): c for c in m["counts"]}
    # n=m=4: blocks of size 4 and 2 -> 1 + 6 subsets
    assert counts[("cached", -1)]["set_attention_per_request"] == 7
    assert counts[("naive", 5)]["set_attention_per_request"] == 5 * 3
    hr = {(r["gsu"], r["k"]): r["hr"] for r in m["hit_ratio"]}
    assert hr[("full", 24)] == 1.0 and hr[("random", 24)] == 1.0
    assert (out / "bench_timing.csv").exists()


def test_ablate_and_sweep(pipeline):
    args = ["--data", str(pipeline / "data"), "--config", str(pipeline / "data" / "config.json"),
            "--epochs", "1", *SMALL]
    assert main(["ablate", "--out", str(pipeline / "abl"), *args]) == 0
    rows = list(csv.DictReader(open(pipeline / "abl" / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["yolor", "wo_irm", "wo_tcem", "wo_gbpr"]
    assert main(["sweep-alpha", "--out", str(pipeline / "sw"), *args]) == 0
    rows = list(csv.DictReader(open(pipeline / "sw" / "sweep_alpha.csv")))
    assert [float(r["alpha"]) for r in rows] == [0.0, 0.01, 0.05, 0.1, 0.5]


def test_out_env_default(pipeline, monkeypatch):
    monkeypatch.setenv("YOLOR_OUT", str(pipeline / "envroot"))
    assert main(["evaluate", "--checkpoint", str(pipeline / "train" / "model.npz"), "--data",
                 str(pipeline / "data")]) == 0
    assert (pipeline / "envroot" / "evaluate" / "metrics.json").exists()


@pytest.mark.parametrize("argv", [["nonsense"], ["train", "--bogus"], ["train", "--set", "m=6"],
                                  ["train", "--set", "nokey=1"], ["train", "--out", "/tmp/x"],
                                  ["evaluate", "--out", "/tmp/x"]])
def test_usage_errors_exit_2(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("YOLOR_OUT", str(tmp_path))
    if argv[0] == "nonsense" or "--bogus" in argv:
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    else:
        assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "nope"}\n')
    assert main(["train", "--train", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "FormatError" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.npz"), "--test", str(bad),
                 "--out", str(tmp_path / "o")]) == 1
