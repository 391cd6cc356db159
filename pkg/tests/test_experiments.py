import dataclasses
import math

import numpy as np
import pytest

from estaug.experiments import (
    CSV_HEADER,
    ConfigError,
    SimulationConfig,
    debiased_configs,
    emit_results,
    load_config,
    read_results,
    run_debiased_experiment,
    run_group_lasso_experiment,
    simulate_dataset,
    signal_class_configs,
)


def test_signal_classes():
    cfgs = signal_class_configs()
    assert [c.name for c in cfgs] == ["null", "half-v", "full-v"]
    assert [c.first_id for c in cfgs] == [1, 11, 21]
    full = cfgs[2]
    b = full.beta0()
    assert np.count_nonzero(b) == 16 and b[:10].sum() == 0
    np.testing.assert_allclose(cfgs[1].beta0(), 0.5 * b)
    assert not cfgs[0].beta0().any()
    assert len(debiased_configs()) == 2


def test_covariance_structure():
    c = SimulationConfig("x", p=20, rho1=0.5, rho2=0.1)
    S = c.covariance()
    assert S[0, 0] == 1 and S[0, 1] == 0.5 and S[0, 15] == pytest.approx(0.1)
    R = c.covariance_root()
    np.testing.assert_allclose(R @ R.T, S, atol=1e-12)
    with pytest.raises(ConfigError):
        SimulationConfig("bad", p=20, rho1=-0.9).covariance_root()


def test_config_validation():
    with pytest.raises(ConfigError):
        SimulationConfig(pattern="odd")
    with pytest.raises(ConfigError):
        SimulationConfig(p=95)
    with pytest.raises(ConfigError):
        SimulationConfig(weights="bad")


def test_simulate_dataset_is_reproducible():
    c = signal_class_configs()[2]
    X1, y1, b1 = simulate_dataset(c, 3)
    X2, y2, b2 = simulate_dataset(c, 3)
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(y1, y2)
    X3, _, _ = simulate_dataset(c, 4)
    assert not np.allclose(X1, X3)
    assert X1.shape == (30, 100)
    with pytest.raises(IndexError):
        simulate_dataset(c, 10)


@pytest.fixture(scope="module")
def small_result():
    c = dataclasses.replace(signal_class_configs()[0], n_datasets=2)
    return run_group_lasso_experiment([c], N=300, R=3)


def test_group_experiment_records(small_result):
    recs = small_result.records
    assert [r.dataset_id for r in recs] == [1, 2]
    for r in recs:
        assert r.skipped is None
        assert r.lam > 0 and r.stat_obs > 0
        assert 0 <= r.qbar <= 1
    s = small_result.summary()
    assert s["completed"] == 2


def test_emit_and_read_roundtrip(tmp_path, small_result):
    path = tmp_path / "out.csv"
    emit_results(small_result, path)
    text = path.read_text()
    assert text.splitlines()[0] == CSV_HEADER
    assert "# kind=group" in text
    rows = read_results(path)
    assert len(rows) == 2
    for row, rec in zip(rows, small_result.records):
        assert row["dataset_id"] == rec.dataset_id
        assert row["lambda"] == rec.lam
        assert row["stat_obs"] == rec.stat_obs
        if math.isfinite(rec.cv_is):
            assert row["cv_is"] == rec.cv_is


def test_debiased_experiment_runs():
    c = dataclasses.replace(debiased_configs()[0], n_datasets=1)
    res = run_debiased_experiment([c], N=200, R=2)
    assert res.records[0].skipped is None
    assert res.kind == "debiased"


def test_load_config(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(
        "[experiment]\nseed = 5\nN = 100\nR = 2\nlambda_rule = entry\n\n"
        "[class.small]\nn = 10\np = 20\ngroup_size = 10\npattern = full-v\nn_datasets = 1\nfirst_id = 7\n"
    )
    plan = load_config(ini)
    assert plan.N == 100 and plan.R == 2 and plan.rule == "entry" and plan.seed == 5
    (c,) = plan.configs
    assert c.name == "small" and c.n == 10 and c.first_id == 7 and c.seed == 5
    bad = tmp_path / "bad.ini"
    bad.write_text("[class.x]\nfoo = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
