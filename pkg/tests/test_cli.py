import csv
import json
from importlib import resources

import jsonschema
import pytest

from rankbench import __version__
from rankbench.cli import main


def _schema(name):
    return json.loads(resources.files("rankbench").joinpath(f"schemas/{name}.schema.json").read_text(encoding="utf-8"))


def _run(argv, capsys, code=0):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr()
    assert rc == code, out.err
    return out


def _report(path, command):
    rep = json.loads(path.read_text(encoding="utf-8"))
    jsonschema.validate(rep, _schema(command))
    assert rep["manifest"]["subcommand"] == command
    assert rep["manifest"]["version"] == __version__
    return rep


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for preset, extra in (("dominance", ["--set", "n_drugs=30", "--set", "n_cells=60"]),
                          ("two-cluster", ["--set", "n_drugs=30", "--set", "n_cells=80"])):
        assert main(["synth", "--preset", preset, "--out", str(root / preset), "--report", str(root / f"{preset}.json"), *extra]) == 0
    return root


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def test_synth_outputs(data):
    rep = _report(data / "dominance.json", "synth")
    files = set(rep["result"]["files"])
    assert files == {"responses.csv", "cells.csv", "moa.csv", "drugs.csv", "train.csv", "test.csv", "ground_truth.json"}
    assert all((data / "dominance" / f).exists() for f in files)


def test_decompose_drug_mean_on_dominance(data, tmp_path, capsys):
    out = tmp_path / "dec.json"
    _run(["decompose", "--responses", data / "dominance/responses.csv", "--predictor", "drug-mean", "--report", out], capsys)
    rep = _report(out, "decompose")
    assert rep["result"]["decomposition"]["omega_b"] > 0.9
    assert rep["result"]["metrics"]["per_drug_r_mean"] == 0.0
    assert len(rep["manifest"]["inputs"]) == 1


def test_decompose_predictions_file_and_csv(data, tmp_path, capsys):
    rows = list(csv.DictReader(open(data / "dominance/responses.csv", encoding="utf-8")))
    pred = tmp_path / "pred.csv"
    with open(pred, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["drug_id", "cell_id", "predicted"])
        for r in rows:
            w.writerow([r["drug_id"], r["cell_id"], 2 * float(r["value"]) + 1])
    _run(["decompose", "--responses", data / "dominance/responses.csv", "--predictions", pred,
          "--report", tmp_path / "r.json", "--csv", tmp_path / "r.csv"], capsys)
    rep = _report(tmp_path / "r.json", "decompose")
    assert rep["result"]["metrics"]["per_drug_r_mean"] == pytest.approx(1.0)
    table = list(csv.reader(open(tmp_path / "r.csv", encoding="utf-8")))
    assert table[0] == ["drug_id", "per_drug_r"] and len(table) == 31


def test_eval_byte_identical(data, tmp_path, capsys):
    argv = ["eval", "--responses", data / "two-cluster/responses.csv", "--cells", data / "two-cluster/cells.csv",
            "--scheme", "drug-blind", "--k", 5, "--seed", 7]
    _run(argv + ["--report", tmp_path / "a.json"], capsys)
    _run(argv + ["--report", tmp_path / "b.json", "--threads", 1], capsys)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = _report(tmp_path / "a.json", "eval")
    assert rep["manifest"]["seeds"] == {"fold_seed": 7}
    assert rep["manifest"]["config"]["seed"] == 7


def test_eval_stdout_and_drug_feature_modes(data, capsys):
    base = ["eval", "--responses", data / "dominance/responses.csv", "--cells", data / "dominance/cells.csv", "--k", 3]
    out = _run(base + ["--drug-features", data / "dominance/drugs.csv", "--targets", "zscore"], capsys)
    rep = json.loads(out.out)
    jsonschema.validate(rep, _schema("eval"))
    assert rep["result"]["cv"]["report"]["per_drug_r_mean"] > 0.3
    out = _run(base + ["--drug-features", "random:16:3"], capsys)
    jsonschema.validate(json.loads(out.out), _schema("eval"))
    _run(base + ["--drug-features", "random:16"], capsys, code=1)
    _run(base + ["--drug-features", "moa-onehot"], capsys, code=1)


def test_config_file_and_flag_precedence(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"responses": str(data / "two-cluster/responses.csv"),
                               "cells": [str(data / "two-cluster/cells.csv")], "k": 3, "alpha": 2.0}))
    out = _run(["eval", "--config", cfg, "--k", 4], capsys)
    conf = json.loads(out.out)["manifest"]["config"]
    assert conf["k"] == 4 and conf["alpha"] == 2.0
    cfg.write_text(json.dumps({"responses": "x.csv", "kk": 3}))
    err = _run(["eval", "--config", cfg, "--cells", "y.csv"], capsys, code=1).err
    assert "did you mean 'k'" in err


def test_kshot_with_control(data, tmp_path, capsys):
    d = data / "two-cluster"
    _run(["kshot", "--train", d / "train.csv", "--test", d / "test.csv", "--k-list", "0,5,20", "--trials", 1,
          "--control", "permuted", "--control-k", 20, "--report", tmp_path / "k.json", "--csv", tmp_path / "k.csv"], capsys)
    rep = _report(tmp_path / "k.json", "kshot")
    assert set(rep["result"]["curve"]["points"]) == {"0", "5", "20"}
    assert rep["result"]["control"]["point"]["K"] == 20
    rows = list(csv.reader(open(tmp_path / "k.csv", encoding="utf-8")))
    assert [r[1] for r in rows[1:]] == ["matched"] * 3 + ["permuted"]


@pytest.mark.parametrize("mode", ["onehot", "weighted", "within"])
def test_moa_modes(data, tmp_path, capsys, mode):
    d = data / "two-cluster"
    argv = ["moa", "--responses", d / "responses.csv", "--cells", d / "cells.csv", "--moa", d / "moa.csv",
            "--mode", mode, "--permute-seed", 42, "--k", 3, "--report", tmp_path / "m.json"]
    if mode == "weighted":
        argv += ["--moa-weight-grid", "1,20", "--class", "cluster0"]
    _run(argv, capsys)
    rep = _report(tmp_path / "m.json", "moa")
    assert rep["manifest"]["seeds"]["permute_seed"] == 42
    assert "permuted" in rep["result"]


def test_moa_unknown_class_hint(data, capsys):
    d = data / "two-cluster"
    err = _run(["moa", "--responses", d / "responses.csv", "--cells", d / "cells.csv", "--moa", d / "moa.csv",
                "--mode", "within", "--class", "cluster00"], capsys, code=1).err
    assert "did you mean" in err


def test_leakage_synthetic(tmp_path, capsys):
    _run(["leakage", "--folds", 3, "--epochs", 5, "--seed", 1, "--report", tmp_path / "l.json"], capsys)
    rep = _report(tmp_path / "l.json", "leakage")
    assert rep["result"]["snoop_inflation"] >= 0
    assert len(rep["result"]["per_fold"]) == 3
    _run(["leakage", "--cells", "x.csv"], capsys, code=1)


def test_biomarker(data, tmp_path, capsys):
    d = data / "dominance"
    cells = [r["cell_id"] for r in csv.DictReader(open(d / "responses.csv", encoding="utf-8"))]
    cells = sorted(set(cells))
    mut = tmp_path / "mut.csv"
    mut.write_text("cell_id,status\n" + "".join(f"{c},{i % 2}\n" for i, c in enumerate(cells)))
    _run(["biomarker", "--responses", d / "responses.csv", "--mutations", mut, "--drug", "D0000",
          "--report", tmp_path / "b.json"], capsys)
    rep = _report(tmp_path / "b.json", "biomarker")
    assert rep["result"]["group_sizes"]["mutant"] == 30
    assert rep["result"]["test"]["alternative"] == "less"
    _run(["biomarker", "--responses", d / "responses.csv", "--mutations", mut, "--drug", "nope"], capsys, code=2)


def test_concordance_modes(data, tmp_path, capsys):
    d = data / "two-cluster"
    _run(["concordance", "--responses", d / "responses.csv", "--mode", "replicate", "--replicate", d / "responses.csv",
          "--anchors", "D0000,D0001", "--report", tmp_path / "c.json"], capsys)
    rep = _report(tmp_path / "c.json", "concordance")
    assert rep["result"]["replicate"]["per_drug_r_mean"] == pytest.approx(1.0)
    _run(["concordance", "--responses", d / "responses.csv", "--mode", "profile", "--moa", d / "moa.csv",
          "--report", tmp_path / "p.json"], capsys)
    rep = _report(tmp_path / "p.json", "concordance")
    assert set(rep["result"]["profile"]) == {"cluster0", "cluster1"}
    _run(["concordance", "--responses", d / "responses.csv", "--mode", "replicate"], capsys, code=1)


def test_exit_codes_and_suggestions(capsys, tmp_path):
    err = _run(["evall"], capsys, code=1).err
    assert "usage" in err and "did you mean eval?" in err
    err = _run(["synth", "--out", tmp_path, "--sed", 3], capsys, code=1).err
    assert "--seed" in err
    err = _run(["decompose", "--responses", tmp_path / "missing.csv", "--predictor", "drug-mean"], capsys, code=2).err
    assert "not found" in err
    _run(["decompose", "--responses", "x.csv"], capsys, code=1)
    _run(["synth", "--out", tmp_path, "--set", "n_drug=3"], capsys, code=1)


def test_numerical_error_exit_code(data, capsys):
    d = data / "dominance"
    err = _run(["leakage", "--responses", d / "responses.csv", "--cells", d / "cells.csv",
                "--lr", 100, "--epochs", 500, "--folds", 2], capsys, code=3).err
    assert "epoch" in err


def test_synth_seed_changes_output(tmp_path, capsys):
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        _run(["synth", "--preset", "noisy-leakage", "--seed", seed, "--out", tmp_path / name,
              "--report", tmp_path / f"{name}.json"], capsys)
    a, b, c = ((tmp_path / n / "responses.csv").read_bytes() for n in "abc")
    assert a == b and a != c
