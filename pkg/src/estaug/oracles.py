"""Closed-form reference values for two small designs and a brute-force
Monte Carlo oracle.

The three-predictor design has ``X / sqrt(2) = [[1, 0, 1], [0, 1, 1]]``,
groups ``{0, 1}`` and ``{2}``, unit weights and ``beta0 = 0``. Its strata
are labelled by the active groups ``()``, ``(0,)``, ``(1,)`` and
``(0, 1)``. The orthogonal design has ``X^T X / n = I`` with J groups of
size m and weights ``sqrt(m)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats
from scipy.special import gammaln

from .core import GroupedDesign, GroupPartition, build_design
from .density import GaussianNoise, Region, event_probability_quadrature
from .sampling import parametric_bootstrap

STRATA = ((), (0,), (1,), (0, 1))


def three_predictor_design() -> GroupedDesign:
    X = np.sqrt(2.0) * np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    return build_design(X, GroupPartition([[0, 1], [2]], [1.0, 1.0]))


def _stratum(A):
    A = tuple(sorted(int(j) for j in A))
    if A not in STRATA:
        raise ValueError(f"unknown stratum {A}")
    return A


def three_predictor_density(A, r, s, sigma2: float, lam: float) -> float:
    """Stratum densities written out in closed form.

    Charts: ``()`` uses ``(s1, s2)``, ``(0,)`` uses ``(r1, s1)``, ``(1,)``
    uses ``(r2, s1)`` and ``(0, 1)`` uses ``(r1, r2)``.

    Raises
    ------
    ValueError
        If ``(r, s)`` lies outside the stratum.
    """
    A = _stratum(A)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    s = np.asarray(s, dtype=float)
    c = 1.0 / (np.pi * sigma2)
    if np.any(r <= 0) or r.size != len(A):
        raise ValueError("r must be positive with one entry per active group")
    tol = 1e-9
    if abs(s[0] + s[1] - s[2]) > tol:
        raise ValueError("s is not in the row space")
    n01 = np.hypot(s[0], s[1])
    if A == ():
        if n01 >= 1 or abs(s[2]) >= 1:
            raise ValueError("point outside the interior of the empty stratum")
        return c * lam**2 * np.exp(-(lam**2) * (s[0] ** 2 + s[1] ** 2) / sigma2)
    if A == (0,):
        if abs(n01 - 1) > tol or abs(s[2]) >= 1 or s[1] == 0:
            raise ValueError("point outside the stratum")
        return c * np.exp(-((r[0] + lam) ** 2) / sigma2) * (r[0] + lam) / abs(s[1])
    if A == (1,):
        if abs(abs(s[2]) - 1) > tol or n01 >= 1:
            raise ValueError("point outside the stratum")
        return 2 * lam * c * np.exp(-2 * r[0] * (r[0] + lam) / sigma2) * np.exp(-(lam**2) * (s[0] ** 2 + s[1] ** 2) / sigma2)
    if abs(n01 - 1) > tol or abs(abs(s[2]) - 1) > tol:
        raise ValueError("point outside the stratum")
    return c * np.exp(-((r[0] + r[1] + lam) ** 2 + r[1] ** 2) / sigma2)


def three_predictor_stratum_probability(A, sigma2: float, lam: float) -> float:
    """P(active set = A) from standard bivariate normal probabilities.

    With ``tau = sqrt(2) lam / sigma`` the events are ``Z`` in ``tau``
    times the disk cut by ``|s1 + s2| <= 1`` (empty stratum),
    ``Z1 + Z2 >= tau, |Z1 - Z2| <= tau`` (twice, group 1 alone) and
    ``Z1 >= 0, Z2 - Z1 >= tau`` (four times, both groups).
    """
    A = _stratum(A)
    sig = np.sqrt(sigma2)
    tau = np.sqrt(2.0) * lam / sig
    h = tau / np.sqrt(2.0)
    opts = dict(epsabs=1e-12, epsrel=1e-12, limit=200)
    if A == (0,):
        return 0.5 * np.exp(-(lam**2) / sigma2)
    if A == ():
        f = lambda u: stats.norm.pdf(u) * (2 * stats.norm.cdf(np.sqrt(max(tau**2 - u**2, 0.0))) - 1)
        return integrate.quad(f, -h, h, **opts)[0]
    if A == (1,):
        # in rotated coordinates the region is a product set
        return 2 * stats.norm.sf(h) * (2 * stats.norm.cdf(h) - 1)
    return 4 * integrate.quad(lambda z: stats.norm.pdf(z) * stats.norm.sf(z + tau), 0, np.inf, **opts)[0]


def three_predictor_regions():
    """Quadrature regions covering each stratum (pieces per stratum)."""
    c = np.sqrt(0.75)
    return {
        (): [Region([0, 1], np.zeros(3), [(-1, 1), lambda a: (max(-np.sqrt(1 - a * a), -1 - a), min(np.sqrt(1 - a * a), 1 - a))])],
        (0,): [
            Region([0], np.array([-0.5, c, c - 0.5]), [(-1, 0)]),
            Region([0], np.array([0.5, -c, 0.5 - c]), [(0, 1)]),
        ],
        (1,): [
            Region([0], np.array([0.5, 0.5, 1.0]), [(0, 1)]),
            Region([0], np.array([-0.5, -0.5, -1.0]), [(-1, 0)]),
        ],
        (0, 1): [Region([], np.array(v, dtype=float), []) for v in ((1, 0, 1), (0, 1, 1), (-1, 0, -1), (0, -1, -1))],
    }


def three_predictor_quadrature_probability(A, sigma2: float, lam: float) -> float:
    """Integral of the general density over the stratum ``A``."""
    A = _stratum(A)
    d = three_predictor_design()
    noise = GaussianNoise(sigma2)
    return sum(event_probability_quadrature(d, np.zeros(3), lam, noise, A, reg) for reg in three_predictor_regions()[A])


def orthogonal_design(m: int, J: int, seed: int = 0) -> GroupedDesign:
    """``n = p = mJ`` design with ``X^T X / n = I`` and weights ``sqrt(m)``."""
    p = m * J
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((p, p)))
    Q = Q * np.sign(np.diag(R))
    return build_design(np.sqrt(p) * Q, GroupPartition.from_sizes([m] * J, np.full(J, np.sqrt(m))))


@dataclass(frozen=True)
class OrthogonalOracle:
    m: int
    n: int
    sigma2: float
    lam: float
    beta0: np.ndarray

    def _nc(self, j):
        b = self.beta0[j * self.m : (j + 1) * self.m]
        return self.n * float(b @ b) / self.sigma2

    def tail_prob(self, j: int, t: float) -> float:
        """P(||beta_hat_(j)|| > t) = P(||beta_ls_(j)|| > t + lam sqrt(m))."""
        x = self.n * (t + self.lam * np.sqrt(self.m)) ** 2 / self.sigma2
        nc = self._nc(j)
        return float(stats.chi2.sf(x, self.m) if nc == 0 else stats.ncx2.sf(x, self.m, nc))

    def p_zero(self, j: int) -> float:
        return 1.0 - self.tail_prob(j, 0.0)

    def marginal_density(self, r):
        """Density of the block norm on r > 0 for a group with beta0_(j) = 0."""
        m, n, s2 = self.m, self.n, self.sigma2
        u = np.asarray(r, dtype=float) + self.lam * np.sqrt(m)
        logc = 0.5 * m * np.log(n / s2) - (0.5 * m - 1) * np.log(2.0) - gammaln(m / 2)
        return np.exp(logc + (m - 1) * np.log(u) - n * u**2 / (2 * s2))


def orthogonal_oracle(m: int, J: int, sigma2: float, lam: float, beta0) -> OrthogonalOracle:
    beta0 = np.asarray(beta0, dtype=float)
    if beta0.size != m * J:
        raise ValueError("beta0 must have length m J")
    return OrthogonalOracle(m, m * J, sigma2, lam, beta0)


def brute_force_event_probability(design, beta0, sigma2, lam, predicate, N: int, seed: int = 0):
    """Plain Monte Carlo frequency of ``predicate(betas, S)`` with its
    binomial standard error."""
    pb = parametric_bootstrap(design, beta0, GaussianNoise(sigma2), lam, N, seed, key=(1,))
    hit = np.asarray(predicate(pb.betas, pb.S), dtype=bool)
    p = float(hit.mean())
    return p, float(np.sqrt(p * (1 - p) / N))


def _active_pattern(betas, groups):
    act = np.stack([np.linalg.norm(betas[:, g], axis=1) > 0 for g in groups], axis=1)
    return act


def run_oracle_check(sigma2: float = 1.0, lam: float = 1.0, N: int = 100000, seed: int = 0):
    """Agreement of closed form, quadrature of the general density and
    simulation on the three-predictor design, plus orthogonal-design
    tails. Returns rows ``(name, value, reference, tolerance, passed)``."""
    rows = []
    d = three_predictor_design()
    groups = d.partition.groups
    total = 0.0
    for A in STRATA:
        exact = three_predictor_stratum_probability(A, sigma2, lam)
        quad = three_predictor_quadrature_probability(A, sigma2, lam)
        total += quad
        rows.append((f"P(A={list(A)}) quadrature vs closed form", quad, exact, 1e-6, abs(quad - exact) < 1e-6))

        def pred(B, S, A=A):
            act = _active_pattern(B, groups)
            want = np.zeros(2, dtype=bool)
            want[list(A)] = True
            return np.all(act == want, axis=1)

        mc, se = brute_force_event_probability(d, np.zeros(3), sigma2, lam, pred, N, seed)
        rows.append((f"P(A={list(A)}) simulation vs closed form", mc, exact, 3 * se, abs(mc - exact) < 3 * se))
    rows.append(("sum of stratum probabilities", total, 1.0, 1e-5, abs(total - 1) < 1e-5))

    m, J = 5, 4
    od = orthogonal_design(m, J, seed)
    beta0 = np.zeros(m * J)
    beta0[:m] = 0.3
    lam_o = 0.1
    orc = orthogonal_oracle(m, J, sigma2, lam_o, beta0)
    pb = parametric_bootstrap(od, beta0, GaussianNoise(sigma2), lam_o, N, seed, key=(2,))
    gam = od.partition.group_norms(pb.betas)
    for j in (0, 1):
        for t in (0.0, 0.5, 1.0):
            emp = float(np.mean(gam[:, j] > t))
            ref = orc.tail_prob(j, t)
            se = max(np.sqrt(ref * (1 - ref) / N), 1.0 / N)
            rows.append((f"orthogonal P(|b_{j}|>{t})", emp, ref, 3 * se, abs(emp - ref) < 3 * se))
    return rows
