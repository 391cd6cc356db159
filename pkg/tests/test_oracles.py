import numpy as np
import pytest
from scipy import integrate, stats

from estaug.oracles import (
    STRATA,
    brute_force_event_probability,
    three_predictor_density,
    three_predictor_design,
    three_predictor_stratum_probability,
    orthogonal_design,
    orthogonal_oracle,
    run_oracle_check,
)


@pytest.mark.parametrize("sigma2,lam", [(1.0, 1.0), (0.5, 0.3), (2.0, 1.7)])
def test_closed_form_probabilities_sum_to_one(sigma2, lam):
    total = sum(three_predictor_stratum_probability(A, sigma2, lam) for A in STRATA)
    assert total == pytest.approx(1.0, abs=1e-10)


def test_closed_form_density_integrates_to_stratum_probability():
    # independent route: integrate the written-out densities directly
    sigma2, lam = 1.1, 0.6
    f0 = lambda r, a: 2 * three_predictor_density((0,), [r], [np.cos(a), np.sin(a), np.cos(a) + np.sin(a)], sigma2, lam)
    # group 0 alone on the arc s2 > 0 with s1 in (-1, 0); use angle t, |ds1| = |sin t| dt
    val = integrate.dblquad(lambda r, t: f0(r, t) * abs(np.sin(t)), np.pi / 2, np.pi, 0, np.inf, epsabs=1e-11)[0]
    assert val == pytest.approx(three_predictor_stratum_probability((0,), sigma2, lam), abs=1e-8)
    f01 = lambda r2, r1: 4 * three_predictor_density((0, 1), [r1, r2], [1.0, 0.0, 1.0], sigma2, lam)
    val = integrate.dblquad(f01, 0, np.inf, 0, np.inf, epsabs=1e-12)[0]
    assert val == pytest.approx(three_predictor_stratum_probability((0, 1), sigma2, lam), abs=1e-8)


def test_density_rejects_points_off_stratum():
    with pytest.raises(ValueError):
        three_predictor_density((), [], [0.5, 0.5, 0.5], 1.0, 1.0)
    with pytest.raises(ValueError):
        three_predictor_density((0,), [1.0], [0.2, 0.2, 0.4], 1.0, 1.0)
    with pytest.raises(ValueError):
        three_predictor_density((7,), [1.0], [0.2, 0.2, 0.4], 1.0, 1.0)


def test_brute_force_agrees_with_closed_form():
    d = three_predictor_design()
    groups = d.partition.groups

    def pred(B, S):
        return (np.linalg.norm(B[:, groups[0]], axis=1) > 0) & (np.abs(B[:, groups[1]]).max(axis=1) == 0)

    p, se = brute_force_event_probability(d, np.zeros(3), 1.0, 0.8, pred, 20000, seed=1)
    assert abs(p - 0.5 * np.exp(-0.64)) < 4 * se


def test_orthogonal_design_is_orthogonal():
    d = orthogonal_design(3, 4, seed=2)
    np.testing.assert_allclose(d.psi, np.eye(12), atol=1e-12)
    np.testing.assert_allclose(d.weights, np.sqrt(3))


def test_orthogonal_oracle_tails_and_density():
    m, J = 4, 3
    beta0 = np.zeros(m * J)
    beta0[:m] = 0.2
    o = orthogonal_oracle(m, J, 1.3, 0.15, beta0)
    n = m * J
    assert o.tail_prob(1, 0.0) == pytest.approx(stats.chi2.sf(n * 0.15**2 * m / 1.3, m))
    assert o.p_zero(1) + o.tail_prob(1, 0.0) == pytest.approx(1.0)
    assert o.tail_prob(0, 0.1) > o.tail_prob(1, 0.1)
    # density of the block norm integrates to the tail mass
    mass = integrate.quad(o.marginal_density, 0.2, np.inf)[0]
    assert mass == pytest.approx(o.tail_prob(1, 0.2), rel=1e-8)
    with pytest.raises(ValueError):
        orthogonal_oracle(m, J, 1.0, 0.1, np.zeros(3))


def test_run_oracle_check_all_pass():
    rows = run_oracle_check(N=20000, seed=3)
    failed = [r for r in rows if not r[4]]
    assert not failed, failed
    assert len(rows) == 15
