import json

import numpy as np
import pytest

from invstore import cli, data, persist


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", "--model", "quadratic", "--seed", "7", "--n-train", "4",
                     "--n-test", "2", "--out", str(root / "d")]) == 0
    return root


def test_generate_layout(generated):
    d = generated / "d"
    assert len(data.load_dataset(d / "train")) == 4
    assert persist.load_model(d / "truth.json").model == "quadratic"
    assert json.loads((d / "manifest.json").read_text())["seed"] == 7


def test_train_predict_evaluate(generated, capsys):
    d, m = generated / "d", generated / "m.json"
    argv = ["train", "--model", "quadratic", "--data", str(d / "train"), "--test", str(d / "test"),
            "--out", str(m), "--seed", "7", "--epochs", "30", "--restarts", "1"]
    assert cli.main(argv) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "epoch,train_mse,test_mse" and len(out) == 31
    manifest = json.loads((generated / "m.json.manifest.json").read_text())
    assert manifest["command"][1:] == argv
    assert manifest["config"]["max_epochs"] == 30
    assert set(manifest["inputs"]) == {str(d / "train"), str(d / "test")}
    first = m.read_bytes()
    assert cli.main(argv) == 0
    assert m.read_bytes() == first

    f = generated / "f"
    assert cli.main(["predict", "--model", str(m), "--data", str(d / "test"), "--out", str(f)]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", "--forecast", str(f), "--data", str(d / "test"), "--json"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["n_samples"] == 2 and metrics["mse"] >= 0


def test_config_precedence(generated, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_epochs": 2, "restarts": 1, "seed": 5}))
    m = tmp_path / "m.json"
    assert cli.main(["train", "--model", "quadratic", "--data", str(generated / "d" / "train"),
                     "--out", str(m), "--config", str(cfg), "--epochs", "3"]) == 0
    manifest = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert manifest["config"]["max_epochs"] == 3 and manifest["config"]["seed"] == 5


def test_baseline_and_audit(generated, capsys):
    d = generated / "d"
    assert cli.main(["baseline", "threshold", "--train", str(d / "train"), "--test", str(d / "test")]) == 0
    assert "r_charge" in json.loads(capsys.readouterr().out)
    assert cli.main(["audit", "grad", "--data", str(d / "train"), "--instances", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["max_rel_error"] <= 1e-4
    assert cli.main(["audit", "grad", "--data", str(d / "train"), "--instances", "1", "--limit", "0"]) == 1


def test_export(generated):
    m = generated / "truth.json"
    m.write_bytes((generated / "d" / "truth.json").read_bytes())
    out = generated / "plots"
    assert cli.main(["export", "--model", str(m), "--data", str(generated / "d" / "test"), "--out", str(out)]) == 0
    assert (out / "dispatch.csv").read_text().startswith("sample,t,price,true,predicted")


def test_equality_commands(tmp_path, capsys):
    assert cli.main(["generate", "--model", "equality", "--seed", "2", "--out", str(tmp_path / "e")]) == 0
    assert cli.main(["train", "--model", "equality", "--data", str(tmp_path / "e" / "train"),
                     "--out", str(tmp_path / "eq.json"), "--epochs", "500"]) == 0
    truth = data.load_equality(tmp_path / "e" / "train")
    assert abs(persist.load_model(tmp_path / "eq.json").alpha - truth.alpha) <= 1e-4


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--model", "quadratic", "--data", "x", "--out", "y", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_domain_error_exits_1(tmp_path, capsys):
    assert cli.main(["predict", "--model", str(tmp_path / "none.json"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ModelLoadError"
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"restarts": 0}))
    assert cli.main(["train", "--model", "quadratic", "--data", str(tmp_path), "--out", str(tmp_path / "m.json"),
                     "--config", str(bad)]) == 1


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "invstore", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
