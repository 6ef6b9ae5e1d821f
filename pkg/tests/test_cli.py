import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from gnnuq.cli import main
from gnnuq.evolver import load_catalog

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="module")
def tiny_csv(tmp_path_factory):
    """First 30 FreeSolv rows."""
    path = tmp_path_factory.mktemp("data") / "tiny.csv"
    with open(DATA / "freesolv.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))[:30]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "y"])
        for r in rows:
            w.writerow([r["smiles"], r["expt"]])
    return path


@pytest.fixture(scope="module")
def pipeline(tiny_csv, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    base = ["--data", str(tiny_csv)]
    assert main(["split", *base, "--seed", "3", "--out", str(d / "split.json")]) == 0
    common = [*base, "--splits", str(d / "split.json")]
    assert main(["search", *common, "--evals", "5", "--population", "3", "--sample", "2", "--workers", "1",
                 "--epochs", "1", "--batch-size", "8", "--catalog", str(d / "cat.jsonl")]) == 0
    assert main(["posttrain", *common, "--catalog", str(d / "cat.jsonl"), "--top-k", "2", "--epochs", "2",
                 "--batch-size", "8", "--out-dir", str(d / "models")]) == 0
    for split in ("val", "test"):
        assert main(["predict", *common, "--models", str(d / "models"), "--split", split,
                     "--out", str(d / f"{split}.csv")]) == 0
    return d, common


def test_split_sizes_and_reproducible(tmp_path):
    rows = ["smiles,y"] + [f"{'C' * (k + 1)},{k}" for k in range(10)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    for name in ("a", "b"):
        assert main(["split", "--data", str(tmp_path / "d.csv"), "--seed", "1",
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    split = json.loads((tmp_path / "a.json").read_text())
    assert [len(split[k]) for k in ("train", "val", "test")] == [5, 2, 3]
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert main(["split", "--data", str(tmp_path / "d.csv"), "--ratios", "8:1:1",
                 "--out", str(tmp_path / "c.json")]) == 0
    split = json.loads((tmp_path / "c.json").read_text())
    assert [len(split[k]) for k in ("train", "val", "test")] == [8, 1, 1]


def test_search_catalog_and_resume(pipeline, tiny_csv, tmp_path, capsys):
    d, common = pipeline
    assert len((d / "cat.jsonl").read_text().splitlines()) == 5
    cat = tmp_path / "c.jsonl"
    cat.write_text((d / "cat.jsonl").read_text())
    assert main(["search", *common, "--evals", "10", "--population", "3", "--sample", "2", "--workers", "1",
                 "--epochs", "1", "--batch-size", "8", "--catalog", str(cat)]) == 0
    assert len(cat.read_text().splitlines()) == 10
    assert [r.eval_id for r in load_catalog(cat)] == list(range(10))
    assert "evals    10  mean reward" in capsys.readouterr().out


def test_posttrain_outputs(pipeline):
    d, _ = pipeline
    assert sorted(p.name for p in (d / "models").iterdir()) == [
        "model_00.guqw", "model_00.history.csv", "model_01.guqw", "model_01.history.csv"]
    hist = (d / "models" / "model_00.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_nll" and len(hist) == 3


def test_predict_and_evaluate(pipeline):
    d, _ = pipeline
    header = (d / "test.csv").read_text().splitlines()[0]
    assert header == "id,y,mu_0,var_0,mu_1,var_1"
    assert main(["evaluate", "--preds", str(d / "test.csv"), "--report", str(d / "plain.json")]) == 0
    plain = json.loads((d / "plain.json").read_text())["test"]
    assert not any(k.startswith("recal_") for k in plain)
    assert plain["cnll"] is None
    assert main(["evaluate", "--preds", str(d / "test.csv"), "--val-preds", str(d / "val.csv"),
                 "--recalibrate", "--report", str(d / "recal.json")]) == 0
    recal = json.loads((d / "recal.json").read_text())["test"]
    assert {"recal_a", "recal_mca", "cnll", "a", "b"} <= set(recal)
    for suffix in ("calibration", "confidence", "summary"):
        assert (d / f"recal.{suffix}.csv").exists()


def test_identical_members_zero_epistemic(pipeline, tmp_path):
    d, common = pipeline
    m = d / "models" / "model_00.guqw"
    assert main(["predict", *common, "--models", str(m), str(m), "--split", "test",
                 "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["evaluate", "--preds", str(tmp_path / "p.csv"), "--report", str(tmp_path / "r.json")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r.summary.csv")))
    assert rows and all(float(r["epistemic"]) == 0.0 for r in rows)


def test_baselines(pipeline, tmp_path):
    d, common = pipeline
    assert main(["baseline", *common, "--kind", "mcdropout", "--catalog", str(d / "cat.jsonl"),
                 "--epochs", "1", "--batch-size", "8", "--out-dir", str(tmp_path / "mc")]) == 0
    with open(tmp_path / "mc" / "test.csv") as fh:
        assert next(csv.reader(fh))[-1] == "var_9"
    assert main(["baseline", *common, "--kind", "random", "--k", "2", "--epochs", "1", "--batch-size", "8",
                 "--out-dir", str(tmp_path / "rnd")]) == 0
    assert len(list((tmp_path / "rnd").glob("*.guqw"))) == 2
    assert main(["baseline", *common, "--kind", "mcdropout", "--out-dir", str(tmp_path / "x")]) == 1


def test_config_file(pipeline, tmp_path):
    d, _ = pipeline
    (tmp_path / "cfg.json").write_text(json.dumps({"preds": str(d / "test.csv"), "split-name": "held"}))
    assert main(["--config", str(tmp_path / "cfg.json"), "evaluate", "--report", str(tmp_path / "r.json")]) == 0
    assert list(json.loads((tmp_path / "r.json").read_text())) == ["held"]
    (tmp_path / "bad.json").write_text(json.dumps({"no_such_flag": 1}))
    assert main(["--config", str(tmp_path / "bad.json"), "space", "--cardinality"]) == 1


def test_error_exits(tmp_path, capsys):
    assert main(["split", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "s.json")]) == 1
    assert main(["split", "--data", str(DATA / "freesolv.csv"), "--ratios", "5:2",
                 "--out", str(tmp_path / "s.json")]) == 1
    assert main(["evaluate", "--preds", str(tmp_path / "nope.csv"), "--report", str(tmp_path / "r.json")]) == 1
    (tmp_path / "p.csv").write_text("id,y,mu_0,var_0\n0,1.0,1.0,1.0\n")
    assert main(["evaluate", "--preds", str(tmp_path / "p.csv"), "--recalibrate",
                 "--report", str(tmp_path / "r.json")]) == 1
    assert "gnnuq: error:" in capsys.readouterr().err


def test_space_cardinality(capsys):
    assert main(["space", "--cardinality"]) == 0
    assert capsys.readouterr().out.strip() == "12259638116352"


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "gnnuq.cli", "space", "--cardinality"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "12259638116352"
