import json
import subprocess
import sys

import numpy as np
import pytest

from estaug.cli import main


@pytest.fixture
def data(tmp_path):
    rng = np.random.default_rng(31)
    X = rng.standard_normal((8, 12))
    beta = np.zeros(12)
    beta[:3] = [2.0, -1.0, 1.5]
    y = X @ beta + 0.5 * rng.standard_normal(8)
    np.savetxt(tmp_path / "X.csv", X, delimiter=",")
    np.savetxt(tmp_path / "y.csv", y, delimiter=",")
    return tmp_path


def _last_json(out):
    return json.loads(out.strip().splitlines()[-1].lstrip("# "))


def test_fit_and_density(data, capsys):
    fit_csv = data / "fit.csv"
    assert main(["fit", "--x", str(data / "X.csv"), "--y", str(data / "y.csv"), "--groups", "3", "--active-groups", "1", "--out", str(fit_csv)]) == 0
    info = _last_json(capsys.readouterr().out)
    assert len(info["active"]) == 1
    tab = np.loadtxt(fit_csv, delimiter=",", skiprows=1)
    assert tab.shape == (12, 6)
    np.savetxt(data / "pt.csv", tab[:, 2:4], delimiter=",", fmt="%.17g")
    assert main(["density", "--x", str(data / "X.csv"), "--groups", "3", "--point", str(data / "pt.csv"), "--lambda", repr(info["lambda"])]) == 0
    rep = _last_json(capsys.readouterr().out)
    assert rep["stratum"] == info["active"]
    assert rep["density"] > 0
    assert len(rep["chart_free"]) == 8 - len(rep["stratum"])


def test_sample_commands(data, capsys):
    common = ["--x", str(data / "X.csv"), "--groups", "3", "--lambda", "0.5", "--y", str(data / "y.csv"), "--n-draws", "300", "--seed", "4"]
    out = data / "is.csv"
    assert main(["sample-is", *common, "--mixture", "1,zero,4", "--out", str(out)]) == 0
    summ = _last_json(capsys.readouterr().out)
    lines = out.read_text().splitlines()
    assert lines[0] == "active_size,statistic,log_weight"
    assert len(lines) == 302
    assert summ["N"] == 300 and 0 <= summ["p_hat"] <= 1
    assert main(["sample-pb", *common]) == 0
    text = capsys.readouterr().out
    assert _last_json(text)["ess"] == pytest.approx(300)


def test_sample_debiased(data, capsys):
    np.savetxt(data / "theta.csv", np.eye(12), delimiter=",")
    args = ["sample-is", "--x", str(data / "X.csv"), "--groups", "3", "--lambda", "0.5", "--n-draws", "100",
            "--beta-tilde", "zero", "--stat", "fitted_norm:0", "--estimator", "debiased", "--theta", str(data / "theta.csv"),
            "--observed", "1.0", "--mixture", "0.5,tilde,2", "--mixture", "0.5,tilde-half-0,4"]
    assert main(args) == 0
    assert _last_json(capsys.readouterr().out)["p_hat"] is not None


def test_simulate_and_oracle(tmp_path, capsys):
    assert main(["simulate", "--class", "full-v", "--index", "1", "--out-prefix", str(tmp_path / "d")]) == 0
    assert _last_json(capsys.readouterr().out)["dataset_id"] == 22
    assert np.loadtxt(tmp_path / "d_X.csv", delimiter=",").shape == (30, 100)
    assert main(["oracle-check", "--n-draws", "5000"]) == 0
    out = capsys.readouterr().out
    assert "FAIL " not in out and out.strip().endswith("all passed")


def test_experiment_command(tmp_path, capsys):
    ini = tmp_path / "e.ini"
    ini.write_text("[experiment]\nN = 200\nR = 2\n\n[class.tiny]\npattern = full-v\nn_datasets = 1\nfirst_id = 21\n")
    out = tmp_path / "r.csv"
    assert main(["experiment-group", "--config", str(ini), "--out", str(out)]) == 0
    assert out.read_text().startswith("dataset_id,")
    assert _last_json(capsys.readouterr().out)["completed"] == 1


def test_errors_are_reported(data, capsys):
    with pytest.raises(SystemExit):
        main(["fit", "--x", str(data / "X.csv"), "--y", str(data / "y.csv"), "--groups", "3"])
    with pytest.raises(SystemExit):
        main(["fit", "--x", str(data / "X.csv"), "--y", str(data / "y.csv"), "--groups", "5", "--lambda", "1"])
    rc = main(["fit", "--x", str(data / "X.csv"), "--y", str(data / "y.csv"), "--groups", "3", "--alpha", "3", "--lambda", "1"])
    assert rc == 2
    assert "alpha" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "estaug", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("fit", "density", "sample-pb", "sample-is", "simulate", "experiment-group", "experiment-debias", "oracle-check"):
        assert cmd in res.stdout
