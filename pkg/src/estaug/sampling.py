"""Parametric bootstrap and importance sampling of the augmented estimator,
de-biasing, and weighted p-value and quantile estimates.

Draws are generated in fixed chunks of ``CHUNK`` rows. Chunk ``c`` of a
run keyed by ``(seed, *key)`` uses its own generator seeded from
``SeedSequence([seed, *key, c])``, so results do not depend on how the
work is split across processes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import EstaugError, GroupedDesign, lp_norm
from .density import GaussianNoise
from .solver import BlockLassoFit, ConvergenceError, solve_many

logger = logging.getLogger(__name__)

CHUNK = 1024
SOLVE_BLOCK = 4096
LOW_ESS = 10.0
_RESAMPLE_TAG = 2**31 - 1


class LowESSWarning(UserWarning):
    pass


class SamplingError(EstaugError):
    pass


@dataclass(frozen=True, eq=False)
class ProposalMixture:
    """Mixture of parametric-bootstrap proposals sharing the target lambda.

    Component ``k`` draws ``y* = X beta_dagger[k] + sqrt(scales[k]) eps``.
    """

    weights: np.ndarray
    betas: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.weights, dtype=float))
        B = np.atleast_2d(np.asarray(self.betas, dtype=float))
        M = np.atleast_1d(np.asarray(self.scales, dtype=float))
        if not (a.size == B.shape[0] == M.size):
            raise ValueError("weights, betas and scales need one entry per component")
        if np.any(a <= 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(M <= 0):
            raise ValueError("variance multipliers must be positive")
        object.__setattr__(self, "weights", a)
        object.__setattr__(self, "betas", B)
        object.__setattr__(self, "scales", M)

    @classmethod
    def single(cls, beta, scale: float = 1.0) -> "ProposalMixture":
        return cls([1.0], [np.asarray(beta, dtype=float)], [scale])

    @property
    def K(self) -> int:
        return self.weights.size


@dataclass(eq=False)
class WeightedSampleSet:
    """Draws ``(beta*, S*)`` with log importance weights.

    ``Y`` keeps the simulated responses so weights can be recomputed.
    """

    design: GroupedDesign
    lam: float
    beta_tilde: np.ndarray
    noise: object
    mixture: ProposalMixture
    betas: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    log_weights: np.ndarray
    component: np.ndarray
    n_resampled: int = 0
    debiased: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.betas.shape[0]

    @property
    def active_sizes(self) -> np.ndarray:
        part = self.design.partition
        if self.design.alpha == 1:
            return np.count_nonzero(self.betas, axis=1)
        return np.count_nonzero(part.group_norms(self.betas) > 0, axis=1)

    @property
    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw))

    @property
    def ess(self) -> float:
        """``(sum w)^2 / sum w^2``."""
        lw = self.log_weights
        return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))

    @property
    def low_ess(self) -> bool:
        return self.ess < LOW_ESS

    def with_debiased(self, theta_hat) -> "WeightedSampleSet":
        self.debiased = debias_batch(self.design, self.betas, self.S, self.lam, theta_hat)
        return self


def _generator(seed: int, key: Sequence[int], chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key), int(chunk)])))


def _draw_chunk(rng, design, noise, mixture, m):
    if mixture.K > 1:
        comp = rng.choice(mixture.K, size=m, p=mixture.weights)
    else:
        comp = np.zeros(m, dtype=int)
    eps = noise.sample(rng, m, design.n) * np.sqrt(mixture.scales[comp])[:, None]
    Y = mixture.betas[comp] @ design.X.T + eps
    return Y, comp


def _solve_rows(design, Y, lam, max_iter):
    N = Y.shape[0]
    B = np.empty((N, design.p))
    S = np.empty((N, design.p))
    ok = np.empty(N, dtype=bool)
    for a in range(0, N, SOLVE_BLOCK):
        b, s, c = solve_many(design, Y[a : a + SOLVE_BLOCK], lam, max_iter=max_iter)
        B[a : a + SOLVE_BLOCK], S[a : a + SOLVE_BLOCK], ok[a : a + SOLVE_BLOCK] = b, s, c
    return B, S, ok


def _simulate(design, noise, mixture, lam, N, seed, key, max_iter):
    if N < 1:
        raise ValueError("N must be at least 1")
    if design.alpha not in (1.0, 2.0):
        raise NotImplementedError("sampling needs alpha in {1, 2}")
    Ys, comps = [], []
    for c in range(-(-N // CHUNK)):
        m = min(CHUNK, N - c * CHUNK)
        Y, comp = _draw_chunk(_generator(seed, key, c), design, noise, mixture, m)
        Ys.append(Y)
        comps.append(comp)
    Y = np.vstack(Ys)
    comp = np.concatenate(comps)
    B, S, ok = _solve_rows(design, Y, lam, max_iter)
    bad = np.flatnonzero(~ok)
    if bad.size:
        logger.warning("%d of %d draws failed to converge; resampling them once", bad.size, N)
        for t in bad:
            rng = _generator(seed, (*key, _RESAMPLE_TAG), int(t))
            y1, c1 = _draw_chunk(rng, design, noise, mixture, 1)
            b1, s1, ok1 = solve_many(design, y1, lam, max_iter=10 * max_iter)
            if not ok1[0]:
                raise ConvergenceError(f"draw {t} failed to converge after resampling")
            Y[t], comp[t], B[t], S[t] = y1[0], c1[0], b1[0], s1[0]
    return Y, comp, B, S, int(bad.size)


def _log_noise_rows(design, noise, Y, beta, scale):
    """log g at H~(.; beta) = (y - X beta)/sqrt(n), or at H when p < n."""
    R = Y - beta @ design.X.T
    if design.high_dimensional:
        return noise.log_gn(R / np.sqrt(design.n), scale)
    H = R @ design.X / design.n
    return noise.log_gnX(H, design, scale)


def log_importance_weights(design, noise, mixture, beta_tilde, Y) -> np.ndarray:
    """Log of the target-to-mixture density ratio at each simulated ``y``.

    With a shared lambda the Jacobians cancel, leaving a ratio of noise
    densities evaluated at ``H~`` under each component.
    """
    Y = np.atleast_2d(Y)
    num = _log_noise_rows(design, noise, Y, np.asarray(beta_tilde, dtype=float), 1.0)
    den = np.stack(
        [np.log(a) + _log_noise_rows(design, noise, Y, b, M) for a, b, M in zip(mixture.weights, mixture.betas, mixture.scales)]
    )
    return num - logsumexp(den, axis=0)


def importance_sample(
    design: GroupedDesign,
    beta_tilde,
    noise,
    mixture: ProposalMixture,
    lam: float,
    N: int,
    seed: int,
    key: Sequence[int] = (0,),
    *,
    max_iter: int = 50000,
) -> WeightedSampleSet:
    """Draw from ``mixture`` and weight toward the target ``beta_tilde``.

    Parameters
    ----------
    noise : GaussianNoise or IIDNoise
        Error law of the target; proposal ``k`` scales it by
        ``sqrt(mixture.scales[k])``. A float is read as ``sigma2``.
    key : sequence of int
        Replicate identifier mixed into the random streams.

    Raises
    ------
    SamplingError
        If every weight is zero.
    """
    if isinstance(noise, (int, float)):
        noise = GaussianNoise(float(noise))
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    if mixture.betas.shape[1] != design.p or beta_tilde.size != design.p:
        raise ValueError("beta vectors must have length p")
    Y, comp, B, S, nres = _simulate(design, noise, mixture, lam, N, seed, key, max_iter)
    lw = log_importance_weights(design, noise, mixture, beta_tilde, Y)
    if not np.any(np.isfinite(lw)):
        raise SamplingError("all importance weights are zero")
    out = WeightedSampleSet(design, float(lam), beta_tilde, noise, mixture, B, S, Y, lw, comp, nres)
    if out.low_ess:
        warnings.warn(f"effective sample size {out.ess:.1f} is below {LOW_ESS:g}", LowESSWarning, stacklevel=2)
    return out


def parametric_bootstrap(
    design: GroupedDesign,
    beta_tilde,
    noise,
    lam: float,
    N: int,
    seed: int,
    key: Sequence[int] = (0,),
    *,
    max_iter: int = 50000,
) -> WeightedSampleSet:
    """Plain bootstrap draws from the target; all weights equal 1."""
    if isinstance(noise, (int, float)):
        noise = GaussianNoise(float(noise))
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    mixture = ProposalMixture.single(beta_tilde, 1.0)
    Y, comp, B, S, nres = _simulate(design, noise, mixture, lam, N, seed, key, max_iter)
    return WeightedSampleSet(design, float(lam), beta_tilde, noise, mixture, B, S, Y, np.zeros(N), comp, nres)


def debias(fit: BlockLassoFit, theta_hat, design: GroupedDesign) -> np.ndarray:
    """``b = beta_hat + lam Theta W S``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if theta_hat.shape != (design.p, design.p):
        raise ValueError(f"theta_hat must be {design.p} x {design.p}")
    return fit.beta_hat + fit.lam * theta_hat @ (design.w * fit.S)


def debias_batch(design: GroupedDesign, betas, S, lam: float, theta_hat) -> np.ndarray:
    theta_hat = np.asarray(theta_hat, dtype=float)
    if theta_hat.shape != (design.p, design.p):
        raise ValueError(f"theta_hat must be {design.p} x {design.p}")
    return np.asarray(betas) + lam * (np.asarray(S) * design.w) @ theta_hat.T


def debias_from_residual(design: GroupedDesign, y, beta, theta_hat) -> np.ndarray:
    """``beta + Theta X^T (y - X beta) / n``; equal to :func:`debias` by KKT."""
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return beta + ((y - beta @ design.X.T) @ design.X / design.n) @ np.asarray(theta_hat).T


@dataclass(frozen=True)
class TestSpec:
    """Test statistic.

    ``kind`` is one of ``sum_norms`` (sum of block norms),
    ``fitted_norm`` (``||X_(j) v_(j)||``) or ``block_norm``
    (``||v_(j)||_alpha``). ``estimator`` selects ``beta`` or
    ``debiased`` draws. When ``centered`` the statistic is applied to the
    draw minus ``beta_tilde``; it defaults to True for de-biased tests.
    """

    __test__ = False

    kind: str
    group: int | None = None
    estimator: str = "beta"
    observed: float | None = None
    centered: bool | None = None

    def __post_init__(self):
        if self.kind not in ("sum_norms", "fitted_norm", "block_norm"):
            raise ValueError(f"unknown statistic {self.kind!r}")
        if self.kind != "sum_norms" and self.group is None:
            raise ValueError(f"{self.kind} needs a group index")
        if self.estimator not in ("beta", "debiased"):
            raise ValueError("estimator must be 'beta' or 'debiased'")

    @property
    def is_centered(self) -> bool:
        return self.estimator == "debiased" if self.centered is None else bool(self.centered)


def statistic(design: GroupedDesign, V, test: TestSpec) -> np.ndarray:
    """Evaluate the test statistic on each row of ``V``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    part = design.partition
    if test.kind == "sum_norms":
        return part.group_norms(V, design.alpha).sum(axis=1)
    g = part.groups[test.group]
    if test.kind == "fitted_norm":
        return np.linalg.norm(V[:, g] @ design.X[:, g].T, axis=1)
    return np.array([lp_norm(v, design.alpha) for v in V[:, g]])


def sample_statistics(samples: WeightedSampleSet, test: TestSpec) -> np.ndarray:
    if test.estimator == "debiased":
        if samples.debiased is None:
            raise ValueError("samples carry no de-biased draws; call with_debiased first")
        V = samples.debiased
    else:
        V = samples.betas
    if test.is_centered:
        V = V - samples.beta_tilde
    return statistic(samples.design, V, test)


@dataclass(frozen=True)
class PValueEstimate:
    p_hat: float
    std_err: float
    tail_ess: float
    low_ess_tail: bool

    def __iter__(self):
        return iter((self.p_hat, self.std_err))


def estimate_pvalue(samples: WeightedSampleSet, test: TestSpec, observed: float | None = None) -> PValueEstimate:
    """Self-normalized weighted tail frequency of ``T* >= T_obs``.

    The standard error is the delta-method value
    ``sqrt(sum_t wbar_t^2 (1{tail}_t - p)^2)`` with normalized weights.
    """
    if samples.N == 0:
        raise ValueError("empty sample")
    t_obs = test.observed if observed is None else observed
    if t_obs is None:
        raise ValueError("observed statistic is required")
    vals = sample_statistics(samples, test)
    wbar = samples.normalized_weights
    tail = vals >= t_obs
    p = float(np.sum(wbar[tail]))
    se = float(np.sqrt(np.sum(wbar**2 * (tail - p) ** 2)))
    wt = wbar[tail]
    tail_ess = float(wt.sum() ** 2 / np.sum(wt**2)) if wt.size and wt.sum() > 0 else 0.0
    low = tail_ess < LOW_ESS
    if low:
        warnings.warn(f"only {tail_ess:.1f} effective draws in the tail", LowESSWarning, stacklevel=2)
    return PValueEstimate(min(p, 1.0), se, tail_ess, low)


def weighted_quantile(values, weights, level: float) -> float:
    """Smallest ``x`` whose weighted CDF reaches ``level``."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    target = level * cw[-1] * (1.0 - 1e-12)
    k = int(np.searchsorted(cw, target, side="left"))
    return float(values[order][min(k, values.size - 1)])


@dataclass(frozen=True, eq=False)
class ConfidenceRegion:
    """``{theta : h(b_(j) - theta_(j)) <= threshold}``."""

    threshold: float
    test: TestSpec
    estimate: np.ndarray | None
    design: GroupedDesign

    def contains(self, theta) -> bool:
        if self.estimate is None:
            raise ValueError("region was built without the observed estimate")
        v = self.estimate - np.asarray(theta, dtype=float)
        return bool(statistic(self.design, v, self.test)[0] <= self.threshold)


def confidence_region(samples: WeightedSampleSet, test: TestSpec, delta: float, estimate=None) -> ConfidenceRegion:
    """Weighted ``(1 - delta)`` quantile of ``h(b* - beta_tilde)``.

    ``estimate`` is the observed ``b`` (or ``beta_hat``) that anchors the
    membership test.
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if samples.ess * delta < 5:
        warnings.warn("too few effective draws beyond the requested quantile", LowESSWarning, stacklevel=2)
    vals = sample_statistics(samples, test)
    thr = weighted_quantile(vals, samples.normalized_weights, 1.0 - delta)
    est = None if estimate is None else np.asarray(estimate, dtype=float)
    return ConfidenceRegion(thr, test, est, samples.design)


@dataclass(frozen=True)
class CVReport:
    qbar: float
    cv: float
    cv_pb: float
    log10_ratio: float


def cv_report(estimates, N: int) -> CVReport:
    """Coefficient of variation across replicate estimates against the
    bootstrap value ``sqrt((1 - q) / (N q))``.

    The standard deviation uses ``ddof=1``. When the mean is 0 the cv and
    ratio are NaN.
    """
    q = np.asarray(estimates, dtype=float)
    if q.size < 2:
        raise ValueError("need at least two replicates")
    qbar = float(q.mean())
    if qbar <= 0:
        return CVReport(qbar, float("nan"), float("nan"), float("nan"))
    cv = float(q.std(ddof=1) / qbar)
    cv_pb = float(np.sqrt(max(1.0 - qbar, 0.0) / (N * qbar)))
    with np.errstate(divide="ignore"):
        ratio = float(np.log10(cv_pb / cv)) if cv > 0 else float("inf")
    return CVReport(qbar, cv, cv_pb, ratio)
