import hashlib
import json

import numpy as np
import pytest
from click.testing import CliRunner

from transdrop.cli import main
from transdrop.config import RunConfigError, load_config
from transdrop.network import load_checkpoint


def run(*args, ok=True):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    if ok:
        assert res.exit_code == 0, res.output
    return res


def _rows(path):
    return path.read_text().strip().splitlines()


@pytest.fixture
def toy(tmp_path):
    run("gen-toy", "--seed", 1, "--out-dir", tmp_path / "toy")
    return tmp_path / "toy"


def test_gen_toy_default_files(toy):
    for name in ("source.csv", "target.csv", "target_labels.csv"):
        assert len(_rows(toy / name)) == 51
    man = json.loads((toy / "manifest.json").read_text())
    assert man["seed"] == 1
    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((toy / name).read_bytes()).hexdigest() == digest


def test_gen_toy_repeatable(toy, tmp_path):
    run("gen-toy", "--seed", 1, "--out-dir", tmp_path / "again")
    for name in ("source.csv", "target.csv", "target_labels.csv", "manifest.json"):
        assert (toy / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_gen_toy_rejects_empty_source(tmp_path):
    res = run("gen-toy", "--n-src", 0, "--out-dir", tmp_path, ok=False)
    assert res.exit_code != 0


def test_split_iris(tmp_path):
    run("split", "builtin:iris", "--seed", 0, "--out-dir", tmp_path / "s")
    assert len(_rows(tmp_path / "s" / "train.csv")) == 121
    assert len(_rows(tmp_path / "s" / "test.csv")) == 31
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert len(man["test_rows"]) == 30 and len(man["train_rows"]) == 120


def test_split_manifest_replay(tmp_path):
    run("split", "builtin:wine", "--seed", 4, "--set", "weighting_temperature=2",
        "--out-dir", tmp_path / "a")
    run("split", "builtin:wine", "--from-manifest", tmp_path / "a" / "manifest.json",
        "--out-dir", tmp_path / "b")
    for name in ("train.csv", "test.csv", "target.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_split_csv_input(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["a,b,kind"] + [f"{x:.3f},{y:.3f},{'cat' if i % 3 else 'dog'}"
                            for i, (x, y) in enumerate(rng.normal(size=(40, 2)))]
    (tmp_path / "in.csv").write_text("\n".join(lines) + "\n")
    run("split", tmp_path / "in.csv", "--label-column", "kind", "--out-dir", tmp_path / "o")
    train = _rows(tmp_path / "o" / "train.csv")
    assert train[0] == "a,b,kind" and len(train) == 33


def test_split_single_class_errors(tmp_path):
    (tmp_path / "one.csv").write_text("a,y\n1,k\n2,k\n3,k\n4,k\n5,k\n6,k\n")
    res = run("split", tmp_path / "one.csv", "--out-dir", tmp_path / "o", ok=False)
    assert res.exit_code != 0 and "class" in res.output


def _train(toy, out, *extra):
    return run("train", "--train-csv", toy / "source.csv", "--target-csv", toy / "target.csv",
               "--epochs", 3, "--set", "batch_labelled=25", "--set", "m_train=4",
               "--out-dir", out, *extra)


def test_train_tdnr_matches_zero_lambda(toy, tmp_path):
    _train(toy, tmp_path / "a", "--method", "tdnr", "--seed", 2)
    _train(toy, tmp_path / "b", "--method", "transductive", "--lam", 0, "--seed", 2)
    a = load_checkpoint(tmp_path / "a" / "checkpoint.json")
    b = load_checkpoint(tmp_path / "b" / "checkpoint.json")
    assert a.flat().tobytes() == b.flat().tobytes()
    rep = json.loads(_rows(tmp_path / "a" / "train_report.jsonl")[0])
    assert len(rep["data_loss"]) == 3 and rep["checkpoint"] == "checkpoint.json"


def test_train_missing_dataset(tmp_path):
    res = run("train", "--train-csv", tmp_path / "nope.csv", "--out-dir", tmp_path, ok=False)
    assert res.exit_code != 0 and "not found" in res.output


def test_train_unknown_config_key(toy, tmp_path):
    res = run("train", "--set", "bogus=1", "--train-csv", toy / "source.csv", ok=False)
    assert res.exit_code != 0 and "bogus" in res.output


def test_config_file_and_override(toy, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[data]\ntrain_csv = {toy / 'source.csv'}\ntarget_csv = {toy / 'target.csv'}\n"
                   "[train]\nmethod = mc-dropout\nepochs = 50\n")
    run("train", "--config", cfg, "--epochs", 2, "--out-dir", tmp_path / "o")
    rep = json.loads(_rows(tmp_path / "o" / "train_report.jsonl")[0])
    assert rep["config"]["method"] == "mc-dropout" and len(rep["data_loss"]) == 2


def test_config_rejects_duplicates_and_unknown(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[a]\nseed = 1\n[b]\nseed = 2\n")
    with pytest.raises(RunConfigError):
        load_config(p)
    p.write_text("epochs = 3\nnope = 1\n")
    with pytest.raises(RunConfigError):
        load_config(p)
    assert load_config(None).epochs == 500


def test_eval_deterministic_model(toy, tmp_path):
    _train(toy, tmp_path / "m", "--method", "mlp")
    run("eval", "--checkpoint", tmp_path / "m" / "checkpoint.json", "--test-csv",
        toy / "target_labels.csv", "-M", 20, "--out-dir", tmp_path / "e")
    doc = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert doc["ci_width"] == 0.0
    for k in ("test_auroc", "error_pred_auroc", "ci_width", "misclassified_sd", "inpt", "detail"):
        assert k in doc
    assert len(_rows(tmp_path / "e" / "detail.tsv")) == 51


def test_eval_needs_two_samples(toy, tmp_path):
    _train(toy, tmp_path / "m", "--method", "mc-dropout")
    res = run("eval", "--checkpoint", tmp_path / "m" / "checkpoint.json", "--test-csv",
              toy / "target_labels.csv", "-M", 1, "--out-dir", tmp_path / "e", ok=False)
    assert res.exit_code != 0


def test_eval_classification_writes_curve(tmp_path):
    run("split", "builtin:breast_cancer", "--out-dir", tmp_path / "s")
    s = tmp_path / "s"
    run("train", "--train-csv", s / "train.csv", "--target-csv", s / "target.csv",
        "--method", "mc-dropout", "--epochs", 2, "--out-dir", tmp_path / "m")
    run("eval", "--checkpoint", tmp_path / "m" / "checkpoint.json", "--test-csv",
        s / "test.csv", "-M", 40, "--out-dir", tmp_path / "e")
    assert (tmp_path / "e" / "inpt_curve.png").stat().st_size > 0
    assert _rows(tmp_path / "e" / "inpt_curve.tsv")[0] == "width\tcount"


def test_plot_data(toy, tmp_path):
    _train(toy, tmp_path / "m", "--method", "transductive")
    args = ["plot-data", "--checkpoint", tmp_path / "m" / "checkpoint.json",
            "--source-csv", toy / "source.csv", "--target-csv", toy / "target.csv", "-M", 30]
    run(*args, "--out-dir", tmp_path / "p1")
    run(*args, "--out-dir", tmp_path / "p2")
    rows = _rows(tmp_path / "p1" / "predictive.tsv")
    assert rows[0] == "x\tmean\tlo\thi" and len(rows) == 162
    assert len(_rows(tmp_path / "p1" / "rate_density.tsv")) == 201
    for name in ("predictive.tsv", "rate_density.tsv", "predictive.png", "rate_density.png"):
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()


def test_output_root_env(toy, tmp_path, monkeypatch):
    monkeypatch.setenv("TRANSDROP_OUTPUT_ROOT", str(tmp_path / "root"))
    run("gen-toy", "--out-dir", "rel")
    assert (tmp_path / "root" / "rel" / "source.csv").exists()


def test_benchmark_filter_and_partial_failure(tmp_path):
    (tmp_path / "flat.csv").write_text("a,b,y\n" + "1,1,0\n1,1,1\n" * 5)
    res = run("benchmark", "--methods", "mc-dropout,tdnr",
              "--datasets", f"iris,{tmp_path / 'flat.csv'}", "--seeds", 1, "--workers", 1,
              "--set", "epochs=1", "--set", "hidden_dims=4", "--set", "m_eval=10",
              "--out-dir", tmp_path / "b", ok=False)
    assert res.exit_code != 0
    cells = [json.loads(l) for l in _rows(tmp_path / "b" / "benchmark.jsonl")]
    assert {c["method"] for c in cells} == {"mc-dropout", "tdnr"}
    status = {(c["method"], c["dataset"]): c["status"] for c in cells}
    assert status[("tdnr", "iris")] == "ok" and status[("tdnr", "flat")] == "failed"
    assert "failed" in (tmp_path / "b" / "table.txt").read_text()
    assert (tmp_path / "b" / "error_pred.png").exists()
