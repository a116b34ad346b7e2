import json

import pytest

from evlab import cli
from evlab.config import config_hash, load_config, seeds

SMALL = {
    "master_seed": 3,
    "dataset": {"synthetic": {"n_samples": 300, "n_features": 40, "n_planted_malicious": 5, "n_planted_benign": 5}},
    "models": [
        {"kind": "gbdt", "hyperparams": {"n_trees": 20}},
        {"kind": "linear_svm"},
        {"kind": "random_forest", "hyperparams": {"n_trees": 10}},
    ],
    "attack": {"target": "gbdt", "N": 10, "models": ["gbdt", "linear_svm"], "background_size": 20},
    "curve": {"N_list": [0, 5, 10], "n_sets": 2, "set_size": 20},
    "transfer": {"models": ["gbdt", "linear_svm", "random_forest"], "top_k": 8},
    "case_trace": {"models": ["gbdt"], "n_samples": 1, "N_max": 5},
    "sage": {"model": "gbdt", "n_permutations": 2, "background_size": 4, "eval_size": 40, "k_list": [3]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["gen", "--no-such-flag"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["gen", "--format", "pdf"])
    assert e.value.code == 2


def test_missing_dataset_names_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"csv": "nowhere/data.csv"}}))
    code, _, err = _run(capsys, "gen", "--config", cfg, "--out", tmp_path / "run")
    assert code == 1
    doc = json.loads(err)
    assert doc["key"] == "dataset.csv"
    assert "nowhere/data.csv" in doc["path"]


def test_missing_config_file(tmp_path, capsys):
    code, _, err = _run(capsys, "gen", "--config", tmp_path / "absent.json", "--out", tmp_path / "run")
    assert code == 1 and "absent.json" in json.loads(err)["path"]


def test_invalid_config_value(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"attack": {"N": 0}}))
    code, _, err = _run(capsys, "gen", "--config", cfg, "--out", tmp_path / "run")
    assert code == 1 and json.loads(err)["key"] == "attack.N"


def test_missing_prerequisite(tmp_path, capsys, cfg_path):
    code, _, err = _run(capsys, "train", "--config", cfg_path, "--out", tmp_path / "run")
    assert code == 1
    assert "dataset.csv" in json.loads(err)["path"]


def test_seed_scheme_and_override(cfg_path):
    cfg = load_config(cfg_path)
    s = seeds(cfg)
    assert s["dataset"] == 3 and s["master"] == 3
    assert len({v for k, v in s.items() if k not in ("master", "dataset")}) == len(s) - 2
    moved = load_config(cfg_path, seed=11)
    assert seeds(moved)["dataset"] == 11
    assert config_hash(moved) != config_hash(cfg)


def test_stepwise_pipeline(tmp_path, capsys, cfg_path):
    out = tmp_path / "run"
    common = ["--config", cfg_path, "--out", out]
    assert _run(capsys, "gen", *common)[0] == 0
    assert (out / "dataset" / "dataset.csv").is_file()
    assert _run(capsys, "train", *common)[0] == 0
    assert (out / "models" / "gbdt.json").is_file()
    assert _run(capsys, "explain", *common, "--model", "linear_svm", "--split", "val")[0] == 0
    assert (out / "shap" / "linear_svm_val.csv").is_file()
    code, text, _ = _run(capsys, "select", *common, "--model", "gbdt", "--N", 5)
    assert code == 0 and 0 < json.loads(text)["patch_len"] <= 5
    code, text, _ = _run(capsys, "attack", *common, "--patch", out / "patches" / "gbdt_amm.json")
    assert code == 0 and json.loads(text)["samples"] > 0
    manifest = json.loads((out / "attack" / "gbdt_amm" / "manifest.json").read_text())
    assert all(e["functional"] for e in manifest["samples"])
    assert _run(capsys, "sage", *common)[0] == 0
    sage = json.loads((out / "sage" / "gbdt.json").read_text())
    assert len(sage["ranking"]) == 40
    for ranking in ("amm", "sage"):
        code, text, _ = _run(capsys, "harden", *common, "--k", 3, "--ranking", ranking)
        assert code == 0 and json.loads(text)["excluded"] == 3
    assert _run(capsys, "eval", *common, "--format", "json,csv")[0] == 0
    assert (out / "report" / "eval" / "attacks.csv").is_file()
    assert not list((out / "report" / "eval").glob("*.svg"))

    run_manifest = json.loads((out / "manifest.json").read_text())
    h = run_manifest["config_hash"]
    assert "models/gbdt.json" in run_manifest["files"]
    # every JSON artifact carries the config hash
    for rel in ("models/gbdt.json", "patches/gbdt_amm.json", "sage/gbdt.json", "harden/gbdt_amm_k3.json"):
        assert json.loads((out / rel).read_text())["config_hash"] == h
    assert json.loads((out / "shap" / "linear_svm_val.csv.json").read_text())["config_hash"] == h


def test_refuses_foreign_run_directory(tmp_path, capsys, cfg_path):
    out = tmp_path / "run"
    assert _run(capsys, "gen", "--config", cfg_path, "--out", out)[0] == 0
    code, _, err = _run(capsys, "gen", "--config", cfg_path, "--out", out, "--seed", 99)
    assert code == 1
    assert json.loads(err)["error"] == "RunDirError"
    keep = out / "notes.txt"
    keep.write_text("mine")
    assert _run(capsys, "gen", "--config", cfg_path, "--out", out, "--seed", 99, "--force")[0] == 0
    assert keep.read_text() == "mine"
    assert json.loads((out / "manifest.json").read_text())["seeds"]["master"] == 99


def test_refuses_unmanaged_directory(tmp_path, capsys, cfg_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "x").write_text("1")
    assert _run(capsys, "gen", "--config", cfg_path, "--out", out)[0] == 1


def test_repro_is_byte_identical(tmp_path, capsys, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(capsys, "repro", "--config", cfg_path, "--out", a)[0] == 0
    assert _run(capsys, "repro", "--config", cfg_path, "--out", b)[0] == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    full = a / "report" / "full"
    for name in ("report.json", "attacks.csv", "transfer.csv", "hardening.csv", "transfer_heatmap.svg", "hardening.svg"):
        assert (full / name).is_file(), name
    # in-place rerun keeps the tree identical
    assert _run(capsys, "repro", "--config", cfg_path, "--out", a)[0] == 0
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
