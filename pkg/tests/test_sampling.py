import warnings

import numpy as np
import pytest
from scipy.special import logsumexp

from estaug.core import build_design
from estaug.density import AugmentedPoint, GaussianNoise, augment, density_report
from estaug.sampling import (
    CHUNK,
    LowESSWarning,
    ProposalMixture,
    TestSpec,
    confidence_region,
    cv_report,
    debias,
    estimate_pvalue,
    importance_sample,
    log_importance_weights,
    parametric_bootstrap,
    sample_statistics,
    statistic,
    weighted_quantile,
)
from estaug.solver import solve_block_lasso


@pytest.fixture(scope="module")
def hd():
    rng = np.random.default_rng(21)
    X = rng.standard_normal((8, 16))
    return build_design(X, [4] * 4)


@pytest.fixture(scope="module")
def ld():
    rng = np.random.default_rng(22)
    X = rng.standard_normal((16, 6))
    return build_design(X, [2] * 3)


def _log_density_at(d, y, lam, beta0, sigma2):
    pt = augment(solve_block_lasso(d, y, lam), d)
    return density_report(pt, d, beta0, lam, GaussianNoise(sigma2)).log_value


@pytest.mark.filterwarnings("ignore::estaug.sampling.LowESSWarning")
@pytest.mark.parametrize("which", ["hd", "ld"])
def test_weights_equal_density_ratio(which, request):
    """Gaussian-ratio weights against the general density of the augmented
    estimator under target and proposals (the Jacobians cancel)."""
    d = request.getfixturevalue(which)
    rng = np.random.default_rng(23)
    lam = 0.3
    target = np.zeros(d.p)
    target[:2] = 0.8
    comps = [np.zeros(d.p), rng.normal(0, 0.5, d.p)]
    mix = ProposalMixture([0.3, 0.7], comps, [2.0, 5.0])
    ws = importance_sample(d, target, GaussianNoise(1.5), mix, lam, 6, seed=1)
    for t in range(ws.N):
        y = ws.Y[t]
        num = _log_density_at(d, y, lam, target, 1.5)
        den = logsumexp([np.log(a) + _log_density_at(d, y, lam, b, 1.5 * M) for a, b, M in zip(mix.weights, comps, mix.scales)])
        assert ws.log_weights[t] == pytest.approx(num - den, rel=1e-7, abs=1e-7)


def test_identity_mixture_gives_unit_weights(hd):
    beta = np.ones(hd.p) * 0.1
    ws = importance_sample(hd, beta, 1.0, ProposalMixture.single(beta, 1.0), 0.3, 50, seed=2)
    np.testing.assert_allclose(ws.log_weights, 0.0, atol=1e-10)
    assert ws.ess == pytest.approx(50)


def test_seeding_is_deterministic_and_chunk_stable(hd):
    mix = ProposalMixture.single(np.zeros(hd.p), 3.0)
    a = importance_sample(hd, np.zeros(hd.p), 1.0, mix, 0.3, CHUNK + 10, seed=5)
    b = importance_sample(hd, np.zeros(hd.p), 1.0, mix, 0.3, CHUNK + 10, seed=5)
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(a.log_weights, b.log_weights)
    # a shorter run is a prefix of the longer one
    c = importance_sample(hd, np.zeros(hd.p), 1.0, mix, 0.3, 100, seed=5)
    np.testing.assert_array_equal(c.Y, a.Y[:100])
    d = importance_sample(hd, np.zeros(hd.p), 1.0, mix, 0.3, 100, seed=5, key=(1,))
    assert not np.allclose(d.Y, c.Y)


def test_bootstrap_weights_and_fits(hd):
    beta = np.zeros(hd.p)
    pb = parametric_bootstrap(hd, beta, GaussianNoise(2.0), 0.4, 200, seed=3)
    assert np.all(pb.log_weights == 0)
    assert pb.betas.shape == (200, hd.p) and pb.S.shape == (200, hd.p)
    assert pb.active_sizes.max() <= hd.J
    resid = pb.Y - pb.betas @ hd.X.T
    np.testing.assert_allclose(pb.S, resid @ hd.X / (hd.n * 0.4 * hd.w), atol=1e-12)


def test_mixture_validation():
    with pytest.raises(ValueError):
        ProposalMixture([0.5, 0.6], np.zeros((2, 3)), [1, 1])
    with pytest.raises(ValueError):
        ProposalMixture([1.0], np.zeros((1, 3)), [0.0])
    with pytest.raises(ValueError):
        ProposalMixture([0.5, 0.5], np.zeros((1, 3)), [1, 1])


def test_log_weights_formula(hd):
    rng = np.random.default_rng(4)
    Y = rng.standard_normal((5, hd.n))
    mix = ProposalMixture([0.4, 0.6], [np.zeros(hd.p), np.ones(hd.p)], [1.0, 4.0])
    lw = log_importance_weights(hd, GaussianNoise(1.0), mix, np.zeros(hd.p), Y)
    X = hd.X

    def logphi(e, v):
        return -0.5 * e.shape[-1] * np.log(2 * np.pi * v) - 0.5 * np.sum(e * e, -1) / v

    n = hd.n
    num = logphi(Y / np.sqrt(n), 1.0 / n)
    den = np.logaddexp(np.log(0.4) + logphi(Y / np.sqrt(n), 1.0 / n), np.log(0.6) + logphi((Y - X @ np.ones(hd.p)) / np.sqrt(n), 4.0 / n))
    np.testing.assert_allclose(lw, num - den, rtol=1e-12)


def test_low_ess_warning(hd):
    mix = ProposalMixture.single(np.full(hd.p, 3.0), 1.0)
    with pytest.warns(LowESSWarning):
        importance_sample(hd, np.zeros(hd.p), 1.0, mix, 0.3, 100, seed=6)


def test_statistics():
    X = np.random.default_rng(7).standard_normal((4, 6))
    d = build_design(X, [3, 3])
    V = np.array([[3.0, 4.0, 0.0, 1.0, 0.0, 0.0]])
    assert statistic(d, V, TestSpec("sum_norms"))[0] == pytest.approx(6.0)
    assert statistic(d, V, TestSpec("block_norm", group=0))[0] == pytest.approx(5.0)
    assert statistic(d, V, TestSpec("fitted_norm", group=1))[0] == pytest.approx(np.linalg.norm(X[:, 3]))
    with pytest.raises(ValueError):
        TestSpec("fitted_norm")
    with pytest.raises(ValueError):
        TestSpec("max_norm")
    assert TestSpec("sum_norms", estimator="debiased").is_centered
    assert not TestSpec("sum_norms").is_centered


def test_pvalue_estimate_is_self_normalized(hd):
    mix = ProposalMixture.single(np.zeros(hd.p), 4.0)
    ws = importance_sample(hd, np.zeros(hd.p), 1.0, mix, 0.3, 500, seed=8)
    test = TestSpec("sum_norms")
    vals = sample_statistics(ws, test)
    t = float(np.quantile(vals, 0.7))
    w = np.exp(ws.log_weights - ws.log_weights.max())
    want = w[vals >= t].sum() / w.sum()
    est = estimate_pvalue(ws, test, t)
    assert est.p_hat == pytest.approx(want, rel=1e-12)
    p, se = est
    assert 0 < se < 1
    with pytest.raises(ValueError):
        estimate_pvalue(ws, test)


def test_bootstrap_pvalue_is_plain_frequency(hd):
    pb = parametric_bootstrap(hd, np.zeros(hd.p), 1.0, 0.3, 300, seed=9)
    test = TestSpec("block_norm", group=0)
    vals = sample_statistics(pb, test)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowESSWarning)
        est = estimate_pvalue(pb, test, 0.05)
    assert est.p_hat == pytest.approx(np.mean(vals >= 0.05))
    assert est.std_err == pytest.approx(np.sqrt(est.p_hat * (1 - est.p_hat) / 300))


def test_weighted_quantile():
    v = np.array([3.0, 1.0, 2.0, 4.0])
    assert weighted_quantile(v, np.ones(4), 0.5) == 2.0
    assert weighted_quantile(v, np.ones(4), 0.75) == 3.0
    assert weighted_quantile(v, np.array([0, 0, 0, 1.0]), 0.1) == 4.0


def test_debias_and_confidence_region(hd):
    rng = np.random.default_rng(10)
    beta0 = np.zeros(hd.p)
    beta0[:4] = 1.0
    y = hd.X @ beta0 + rng.standard_normal(hd.n)
    lam = 0.3
    fit = solve_block_lasso(hd, y, lam)
    theta = np.eye(hd.p)
    b = debias(fit, theta, hd)
    np.testing.assert_allclose(b, fit.beta_hat + hd.X.T @ (y - hd.X @ fit.beta_hat) / hd.n, atol=1e-12)
    pb = parametric_bootstrap(hd, fit.beta_hat, 1.0, lam, 400, seed=11).with_debiased(theta)
    test = TestSpec("block_norm", group=0, estimator="debiased")
    reg = confidence_region(pb, test, 0.1, estimate=b)
    vals = sample_statistics(pb, test)
    assert np.mean(vals <= reg.threshold) >= 0.9
    assert reg.contains(b)
    far = b.copy()
    far[:4] += 100
    assert not reg.contains(far)
    with pytest.raises(ValueError):
        confidence_region(pb, test, 0.0)


def test_cv_report():
    rep = cv_report([0.01, 0.012, 0.008, 0.01], N=1000)
    assert rep.qbar == pytest.approx(0.01)
    assert rep.cv == pytest.approx(np.std([0.01, 0.012, 0.008, 0.01], ddof=1) / 0.01)
    assert rep.cv_pb == pytest.approx(np.sqrt(0.99 / 10))
    assert rep.log10_ratio == pytest.approx(np.log10(rep.cv_pb / rep.cv))
    assert np.isnan(cv_report([0.0, 0.0], 10).cv)
    with pytest.raises(ValueError):
        cv_report([0.1], 10)


def test_augmented_point_from_sample_reconstructs(hd):
    pb = parametric_bootstrap(hd, np.zeros(hd.p), 1.0, 0.2, 20, seed=12)
    for beta, s in zip(pb.betas, pb.S):
        g = hd.partition.group_norms(beta)
        A = tuple(np.flatnonzero(g > 0))
        pt = AugmentedPoint(A, g[list(A)], s)
        np.testing.assert_allclose(pt.coefficients(hd), beta, atol=1e-8)
