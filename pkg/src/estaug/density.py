"""Augmented estimator (r_A, s, A), local charts of the stratum manifold and
the closed-form sampling density of the augmented block-Lasso estimator.

Every density value is taken with respect to ``dr_A ^ ds_F`` for the chart
used; values under different charts are comparable only through integrals.
Designs with ``alpha = 1`` are handled through their singleton-group view,
so for them ``active`` lists coordinates rather than groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy import integrate

from .core import EstaugError, GroupedDesign, SingularityError, eta, eta_prime
from .solver import BlockLassoFit

CHART_COND_MAX = 1e12
_LIFT_TOL = 1e-14


class BoundaryError(SingularityError):
    """The point lies on a measure-zero boundary between strata."""


class ChartError(EstaugError):
    pass


class AugmentError(EstaugError):
    pass


def density_view(design: GroupedDesign) -> GroupedDesign:
    """Design on which densities are evaluated (singletons for alpha = 1)."""
    return design.lasso_view() if design.alpha == 1 else design


@dataclass(frozen=True, eq=False)
class AugmentedPoint:
    """A value ``(r_A, s, A)`` of the augmented estimator.

    ``r`` holds the block norms of the active groups in the order of
    ``active``; ``s`` is the full subgradient vector.
    """

    active: tuple
    r: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(int(j) for j in self.active))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).ravel())
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float).ravel())
        if self.r.size != len(self.active):
            raise ValueError("need one r value per active group")

    def coefficients(self, design: GroupedDesign) -> np.ndarray:
        """``b`` with ``b_(j) = r_j eta(s_(j))`` on active groups, zero elsewhere."""
        view = density_view(design)
        b = np.zeros(view.p)
        for rj, j in zip(self.r, self.active):
            g = view.partition.groups[j]
            b[g] = rj * eta(self.s[g], view.rho)
        return b


def augment(fit: BlockLassoFit, design: GroupedDesign, tol: float = 1e-6) -> AugmentedPoint:
    """Map a converged fit to ``(gamma_hat_A, S, A)`` and validate it.

    Raises
    ------
    AugmentError
        If ``S`` leaves the row space of ``X W^-1``, an active block is off
        the unit dual sphere, an inactive block leaves the dual ball, or the
        coefficients do not reconstruct ``beta_hat`` within 1e-8.
    """
    view = density_view(design)
    part = view.partition
    s = np.asarray(fit.S, dtype=float)
    beta = np.asarray(fit.beta_hat, dtype=float)
    gamma = part.group_norms(beta, view.alpha)
    active = tuple(int(j) for j in np.flatnonzero(gamma > 0))
    if len(active) > min(view.n, view.p):
        raise AugmentError(f"|A| = {len(active)} exceeds min(n, p); the fit is not unique")
    point = AugmentedPoint(active, gamma[list(active)], s)

    if view.Q.shape[1]:
        off = np.abs(view.Q.T @ s).max()
        if off > 1e-8 * max(1.0, np.abs(s).max()):
            raise AugmentError(f"S is off the row space of X W^-1 by {off:.2e}")
    norms = part.group_norms(s, view.alpha_star)
    act = np.zeros(view.J, dtype=bool)
    act[list(active)] = True
    if np.any(np.abs(norms[act] - 1.0) > tol):
        raise AugmentError("active blocks of S are off the unit dual sphere")
    if np.any(norms[~act] > 1.0 + tol):
        raise AugmentError("inactive blocks of S exceed the unit dual ball")
    err = np.abs(point.coefficients(design) - beta).max()
    if err > 1e-8:
        raise AugmentError(f"reconstruction error {err:.2e} exceeds 1e-8")
    return point


@dataclass(frozen=True, eq=False)
class Chart:
    """Free coordinates ``F`` of the subgradient and the tangent matrix.

    ``T`` is p x |F| with ``C T = 0`` and ``T[F] = I``.
    """

    active: tuple
    free: np.ndarray
    dependent: np.ndarray
    T: np.ndarray

    @property
    def key(self) -> tuple:
        return tuple(int(k) for k in self.free)


def constraint_matrix(design: GroupedDesign, s, active) -> np.ndarray:
    """Rows of ``Q^T`` followed by one ``eta(s_(j))`` row per active group."""
    view = design
    s = np.asarray(s, dtype=float)
    rows = [view.Q.T] if view.Q.shape[1] else []
    for j in active:
        g = view.partition.groups[j]
        row = np.zeros(view.p)
        row[g] = eta(s[g], view.rho)
        rows.append(row[None, :])
    if not rows:
        return np.zeros((0, view.p))
    return np.vstack(rows)


def _anchor_coords(design, s, active):
    """Per active group, the coordinate of largest |s_k|."""
    out = []
    for j in active:
        g = design.partition.groups[j]
        out.append(int(g[np.argmax(np.abs(s[g]))]))
    return out


def _canonical_dependent(C, anchors):
    p = C.shape[1]
    D0 = list(anchors)
    need = C.shape[0] - len(D0)
    if need == 0:
        return np.array(sorted(D0), dtype=int)
    rest = np.array([k for k in range(p) if k not in set(D0)], dtype=int)
    Cr = C[:, rest]
    if D0:
        q0, _ = np.linalg.qr(C[:, D0])
        Cr = Cr - q0 @ (q0.T @ Cr)
    # reversed column order so that exact ties go to the highest index
    _, _, piv = scipy.linalg.qr(Cr[:, ::-1], pivoting=True, mode="economic")
    picked = rest[::-1][piv[:need]]
    return np.array(sorted(D0 + [int(k) for k in picked]), dtype=int)


def choose_chart(point: AugmentedPoint, design: GroupedDesign, free: Sequence[int] | None = None) -> Chart:
    """Local parameterization of the stratum manifold at ``point``.

    By default every active group drops its largest-|s| coordinate and the
    remaining dependent coordinates are picked by column-pivoted QR of the
    constraint matrix after projecting out the dropped columns. Passing
    ``free`` fixes ``F`` instead.

    Raises
    ------
    ChartError
        If the dependent block of the constraint matrix is singular.
    """
    view = density_view(design)
    s = point.s
    C = constraint_matrix(view, s, point.active)
    p = view.p
    nfree = min(view.n, p) - len(point.active)
    if nfree < 0:
        raise ChartError("more active groups than min(n, p)")
    if free is None:
        D = _canonical_dependent(C, _anchor_coords(view, s, point.active))
        F = np.array([k for k in range(p) if k not in set(D.tolist())], dtype=int)
    else:
        F = np.array(sorted(int(k) for k in free), dtype=int)
        if F.size != nfree or len(set(F.tolist())) != F.size:
            raise ChartError(f"chart needs {nfree} distinct free coordinates, got {F.size}")
        D = np.array([k for k in range(p) if k not in set(F.tolist())], dtype=int)
    T = np.zeros((p, F.size))
    T[F, np.arange(F.size)] = 1.0
    if D.size:
        CD = C[:, D]
        if np.linalg.cond(CD) > CHART_COND_MAX:
            raise ChartError("dependent block of the constraint matrix is singular at this point")
        T[D] = -np.linalg.solve(CD, C[:, F])
    return Chart(point.active, F, D, T)


class _Frame:
    """Pieces of M and H that do not depend on r at a fixed (s, chart).

    ``BM(r) = M0 + sum_j r_j Mj[j]`` and ``Ht(r) = h0 + sum_j r_j hj[j]``,
    both already mapped by B when p >= n.
    """

    def __init__(self, view: GroupedDesign, s, active, chart: Chart, lam: float, beta0):
        psi = view.psi
        rho = view.rho
        T = chart.T
        p = view.p
        k = len(active)
        lamW = lam * view.w
        cols = np.empty((p, k))
        dcols = []
        hj = []
        for i, j in enumerate(active):
            g = view.partition.groups[j]
            e = eta(s[g], rho)
            try:
                d = eta_prime(s[g], rho)
            except SingularityError as exc:
                raise BoundaryError(str(exc)) from None
            cols[:, i] = psi[:, g] @ e
            dcols.append(psi[:, g] @ (d[:, None] * T[g]))
            hj.append(cols[:, i])
        base = np.hstack([np.zeros((p, k)), lamW[:, None] * T])
        per_r = []
        for i in range(k):
            m = np.zeros_like(base)
            m[:, k:] = dcols[i]
            per_r.append(m)
        base[:, :k] = cols
        H0 = lamW * s - psi @ np.asarray(beta0, dtype=float)
        self.high = view.high_dimensional
        if self.high:
            B = view.B
            base = B @ base
            per_r = [B @ m for m in per_r]
            H0 = B @ H0
            hj = [B @ h for h in hj]
        self.M0 = base
        self.Mr = np.array(per_r) if k else np.zeros((0,) + base.shape)
        self.h0 = H0
        self.hr = np.array(hj) if k else np.zeros((0, H0.size))

    def M(self, r):
        if self.Mr.shape[0] == 0:
            return self.M0
        return self.M0 + np.tensordot(r, self.Mr, axes=1)

    def H(self, r):
        if self.hr.shape[0] == 0:
            return self.h0
        return self.h0 + r @ self.hr


def _check_interior(view, point):
    if np.any(point.r <= 0):
        raise ValueError("r_A must be positive")
    norms = view.partition.group_norms(point.s, view.alpha_star)
    inactive = np.ones(view.J, dtype=bool)
    inactive[list(point.active)] = False
    if np.any(norms[inactive] > 1.0 + 1e-9):
        raise ValueError("an inactive block of s lies outside the unit dual ball")
    if np.any(norms[inactive] >= 1.0 - 1e-12):
        raise BoundaryError("an inactive block of s has unit dual norm")
    if view.rho < 1:
        for j in point.active:
            if np.any(point.s[view.partition.groups[j]] == 0):
                raise BoundaryError("zero subgradient coordinate in an active group")


def build_M(point: AugmentedPoint, chart: Chart, design: GroupedDesign, lam: float) -> np.ndarray:
    """``[(Psi o eta)_A | {(r o Psi) D + lam W} T]``, p x min(n, p)."""
    view = density_view(design)
    k = len(point.active)
    psi = view.psi
    M = np.empty((view.p, k + chart.T.shape[1]))
    K = lam * view.w[:, None] * chart.T
    for i, j in enumerate(point.active):
        g = view.partition.groups[j]
        M[:, i] = psi[:, g] @ eta(point.s[g], view.rho)
        K = K + point.r[i] * psi[:, g] @ (eta_prime(point.s[g], view.rho)[:, None] * chart.T[g])
    M[:, k:] = K
    return M


def jacobian(point: AugmentedPoint, chart: Chart, design: GroupedDesign, lam: float) -> float:
    """Signed ``det(B M)`` when p >= n and ``det(M)`` otherwise."""
    view = density_view(design)
    f = _Frame(view, point.s, point.active, chart, lam, np.zeros(view.p))
    return float(np.linalg.det(f.M(point.r)))


def htilde(point: AugmentedPoint, design: GroupedDesign, beta0, lam: float) -> np.ndarray:
    """``B H`` (p >= n) or ``H`` (p < n), ``H = Psi (b - beta0) + lam W s``.

    For a point augmented from a fit of ``y = X beta0 + eps`` with p >= n
    this equals ``eps / sqrt(n)``.
    """
    view = density_view(design)
    b = point.coefficients(design)
    H = view.psi @ (b - np.asarray(beta0, dtype=float)) + lam * view.w * point.s
    return view.B @ H if view.high_dimensional else H


@dataclass(frozen=True)
class GaussianNoise:
    """``eps ~ N(0, sigma2 I)``."""

    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def sample(self, rng: np.random.Generator, size: int, n: int) -> np.ndarray:
        return np.sqrt(self.sigma2) * rng.standard_normal((size, n))

    def log_gn(self, V, scale=1.0):
        """Log density of ``eps / sqrt(n)`` at the rows of ``V``; the noise
        is multiplied by ``sqrt(scale)``."""
        V = np.asarray(V, dtype=float)
        n = V.shape[-1]
        v2 = self.sigma2 * scale / n
        return -0.5 * n * np.log(2 * np.pi * v2) - 0.5 * np.sum(V * V, axis=-1) / v2

    def log_gnX(self, H, design: GroupedDesign, scale=1.0):
        """Log density of ``X^T eps / n ~ N(0, sigma2 Psi / n)`` (p < n)."""
        H = np.asarray(H, dtype=float)
        L = _psi_cholesky(design)
        p = design.p
        v2 = self.sigma2 * scale / design.n
        z = scipy.linalg.solve_triangular(L, np.atleast_2d(H).T, lower=True)
        quad = np.sum(z * z, axis=0) / v2
        logdet = 2 * np.sum(np.log(np.diag(L))) + p * np.log(v2)
        out = -0.5 * (p * np.log(2 * np.pi) + logdet + quad)
        return out if H.ndim > 1 else float(out[0])


@dataclass(frozen=True)
class IIDNoise:
    """I.i.d. errors with a user-supplied log density and sampler.

    ``logpdf`` evaluates the density of one error; ``sampler(rng, shape)``
    draws errors. Only the p >= n density path is available.
    """

    logpdf: Callable
    sampler: Callable

    def sample(self, rng, size, n):
        return np.asarray(self.sampler(rng, (size, n)), dtype=float)

    def log_gn(self, V, scale=1.0):
        V = np.asarray(V, dtype=float)
        n = V.shape[-1]
        e = np.sqrt(n) * V / np.sqrt(scale)
        return 0.5 * n * np.log(n) - 0.5 * n * np.log(scale) + np.sum(self.logpdf(e), axis=-1)

    def log_gnX(self, H, design, scale=1.0):
        raise NotImplementedError("the p < n density is available for Gaussian noise only")


def _psi_cholesky(design):
    cache = design.__dict__.setdefault("_density_cache", {})
    if "chol" not in cache:
        cache["chol"] = np.linalg.cholesky(design.psi)
    return cache["chol"]


def _log_noise(view, noise, Hvec, scale=1.0):
    if view.high_dimensional:
        return float(noise.log_gn(Hvec, scale))
    return float(noise.log_gnX(Hvec, view, scale))


@dataclass(frozen=True, eq=False)
class DensityReport:
    value: float
    log_value: float
    jacobian: float
    chart: Chart
    active: tuple


def density_report(point, design, beta0, lam, noise, chart: Chart | None = None) -> DensityReport:
    """Density of the augmented estimator at ``point`` with its chart.

    Raises
    ------
    BoundaryError
        For measure-zero boundary points.
    """
    view = density_view(design)
    _check_interior(view, point)
    if chart is None:
        chart = choose_chart(point, design)
    f = _Frame(view, point.s, point.active, chart, lam, beta0)
    M = f.M(point.r)
    sign, logabs = np.linalg.slogdet(M)
    logg = _log_noise(view, noise, f.H(point.r))
    logv = logg + logabs if sign != 0 else -np.inf
    return DensityReport(float(np.exp(logv)), float(logv), float(sign * np.exp(logabs)), chart, point.active)


def log_density(point, design, beta0, lam, noise, chart=None) -> float:
    return density_report(point, design, beta0, lam, noise, chart).log_value


def density(point, design, beta0, lam, noise, chart=None) -> float:
    """``g_n(H~) |J_A|`` (p >= n) or ``g_{n,X}(H) |det M|`` (p < n)."""
    return density_report(point, design, beta0, lam, noise, chart).value


def lasso_density(point, design, beta0, lam, noise, chart=None) -> float:
    """Density for singleton groups from ``M = [Psi_A | lam W_B T_B.]``.

    Signs of active coordinates are fixed on a stratum, so only the
    inactive coordinates move; active columns enter through ``Psi_A``.
    """
    view = density_view(design)
    if not view.partition.is_singleton:
        raise ValueError("lasso_density needs singleton groups")
    _check_interior(view, point)
    A = np.array(point.active, dtype=int)
    if chart is None:
        chart = choose_chart(point, design)
    F = chart.free
    p = view.p
    T = np.zeros((p, F.size))
    T[F, np.arange(F.size)] = 1.0
    R = np.array([k for k in chart.dependent if k not in set(A.tolist())], dtype=int)
    if R.size:
        Qt = view.Q.T
        T[R] = -np.linalg.solve(Qt[:, R], Qt[:, F])
    psi = view.psi
    M = np.hstack([psi[:, A], lam * view.w[:, None] * T])
    b = np.zeros(p)
    b[A] = point.r * point.s[A]
    H = psi @ (b - np.asarray(beta0, dtype=float)) + lam * view.w * point.s
    if view.high_dimensional:
        M = view.B @ M
        H = view.B @ H
    _, logabs = np.linalg.slogdet(M)
    return float(np.exp(_log_noise(view, noise, H) + logabs))


def lift(design: GroupedDesign, active, free, s_free, reference) -> np.ndarray:
    """Solve the dependent coordinates of ``s`` given the free ones.

    Newton iteration from ``reference`` on ``Q^T s = 0`` and
    ``||s_(j)||_{alpha*} = 1`` (j active).

    Raises
    ------
    ChartError
        If Newton fails or an anchored coordinate changes sign, which
        means the free values left the chart's domain.
    """
    view = density_view(design)
    s = np.array(reference, dtype=float)
    F = np.asarray(free, dtype=int)
    s[F] = s_free
    p = view.p
    D = np.array([k for k in range(p) if k not in set(F.tolist())], dtype=int)
    if D.size == 0:
        return s
    qs = view.alpha_star
    anchors = _anchor_coords(view, np.asarray(reference, float), active)
    ref_sign = np.sign(np.asarray(reference, float)[anchors])
    Qt = view.Q.T if view.Q.shape[1] else np.zeros((0, p))
    for _ in range(60):
        res = [Qt @ s]
        for j in active:
            g = view.partition.groups[j]
            res.append(np.array([np.sum(np.abs(s[g]) ** qs) - 1.0]))
        res = np.concatenate(res)
        if np.abs(res).max() < _LIFT_TOL:
            break
        C = constraint_matrix(view, s, active)
        C[Qt.shape[0]:] *= qs
        CD = C[:, D]
        try:
            step = np.linalg.solve(CD, res)
        except np.linalg.LinAlgError:
            raise ChartError("singular constraint block while lifting") from None
        s[D] -= step
        if not np.all(np.isfinite(s)):
            raise ChartError("lift diverged")
    else:
        raise ChartError("lift did not converge; free values outside the chart domain")
    if np.any(np.sign(s[anchors]) != ref_sign):
        raise ChartError("lift crossed to another branch of the manifold")
    return s


@dataclass
class Region:
    """Integration region in chart coordinates.

    Attributes
    ----------
    free : sequence of int
        Chart free coordinates F.
    reference : array
        A point of the stratum selecting the branch of the manifold.
    s_ranges : list
        One entry per free coordinate, outermost first. Each entry is a
        ``(lo, hi)`` pair or a callable of the preceding free values.
    r_ranges : list, optional
        One entry per active group; a pair or a callable of all free
        values followed by the preceding r values. Default ``(0, inf)``.
    """

    free: Sequence[int]
    reference: np.ndarray
    s_ranges: list = field(default_factory=list)
    r_ranges: list | None = None


def event_probability_quadrature(
    design: GroupedDesign,
    beta0,
    lam: float,
    noise,
    active,
    region: Region,
    *,
    epsabs: float = 1e-9,
    epsrel: float = 1e-9,
) -> float:
    """Integrate the stratum density over ``region`` by nested adaptive
    quadrature. Intended for n <= 3.

    Points whose inactive blocks leave the dual ball lie outside the
    stratum and contribute 0.
    """
    view = density_view(design)
    if view.n > 3:
        raise ValueError("quadrature oracle is limited to n <= 3")
    active = tuple(int(j) for j in active)
    free = np.array(sorted(int(k) for k in region.free), dtype=int)
    k = len(active)
    m = free.size
    if m != min(view.n, view.p) - k:
        raise ValueError("region does not match the stratum dimension")
    s_ranges = list(region.s_ranges)
    r_ranges = list(region.r_ranges) if region.r_ranges is not None else [(0.0, np.inf)] * k
    if len(s_ranges) != m or len(r_ranges) != k:
        raise ValueError("need one range per free coordinate and per active group")
    reference = np.asarray(region.reference, dtype=float)
    ref_point = AugmentedPoint(active, np.ones(k), reference)
    chart0 = choose_chart(ref_point, design, free)
    beta0 = np.asarray(beta0, dtype=float)
    part = view.partition
    inactive = np.ones(view.J, dtype=bool)
    inactive[list(active)] = False

    cache = {}

    def frame_for(sf):
        key = tuple(sf)
        if key in cache:
            return cache[key]
        s = lift(design, active, free, np.asarray(sf), reference) if m else reference
        if np.any(part.group_norms(s, view.alpha_star)[inactive] > 1.0):
            fr = None
        else:
            chart = choose_chart(AugmentedPoint(active, np.ones(k), s), design, free) if m else chart0
            fr = _Frame(view, s, active, chart, lam, beta0)
        cache.clear()
        cache[key] = fr
        return fr

    def integrand(*args):
        vals = args[::-1]
        sf, r = vals[:m], np.asarray(vals[m:], dtype=float)
        fr = frame_for(sf)
        if fr is None:
            return 0.0
        _, logabs = np.linalg.slogdet(fr.M(r))
        return float(np.exp(_log_noise(view, noise, fr.H(r)) + logabs))

    ordered = s_ranges + r_ranges

    def wrap(i, rg):
        if callable(rg):
            return lambda *outer: tuple(rg(*outer[::-1]))
        lo, hi = rg
        return (float(lo), float(hi))

    ranges = [wrap(i, rg) for i, rg in enumerate(ordered)][::-1]
    for rg in ranges:
        if not callable(rg) and rg[0] >= rg[1]:
            return 0.0
    val, _ = integrate.nquad(integrand, ranges, opts={"epsabs": epsabs, "epsrel": epsrel, "limit": 200})
    return float(val)
