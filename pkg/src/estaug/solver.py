"""Block-Lasso solver for alpha in {1, 2}, subgradient extraction, lambda
selection by active-group count, and the uniqueness certificate."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import EstaugError, GroupedDesign, eta, lp_norm

logger = logging.getLogger(__name__)

ACTIVE_TOL = 1e-10
KKT_RTOL = 1e-9
# accepted objective increase per step, relative to 1 + |objective|
_MONOTONE_SLACK = 1e-13


class ConvergenceError(EstaugError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class LambdaSelectionError(EstaugError):
    pass


@dataclass(frozen=True, eq=False)
class BlockLassoFit:
    """A converged block-Lasso solution together with its subgradient."""

    beta_hat: np.ndarray
    S: np.ndarray
    lam: float
    alpha: float
    active: tuple
    gamma_hat: np.ndarray
    kkt_residual: float
    kkt_tol: float
    objective: float
    n_iter: int
    y: np.ndarray
    objective_trace: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.kkt_residual < self.kkt_tol


@dataclass(frozen=True, eq=False)
class UniquenessReport:
    E: tuple
    Z: np.ndarray
    rank_Z: int
    certified: bool
    active_bound_ok: bool


def _check_alpha(design: GroupedDesign):
    if design.alpha not in (1.0, 2.0):
        raise NotImplementedError("the solver handles alpha = 1 and alpha = 2 only")


def _prox(design: GroupedDesign, V, t):
    """Proximal map of ``t * lam-free`` block penalty applied row-wise."""
    if design.alpha == 1:
        thr = t * design.w
        return np.sign(V) * np.maximum(np.abs(V) - thr, 0.0)
    part = design.partition
    nrm = part.group_norms(V)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(nrm > 0, np.maximum(0.0, 1.0 - t * design.weights / nrm), 0.0)
    return V * scale[:, part.group_of]


def _penalty(design: GroupedDesign, Beta):
    if design.alpha == 1:
        return np.abs(Beta) @ design.w
    return design.partition.group_norms(Beta) @ design.weights


def _objective(design, Beta, R, lam):
    n = design.n
    return 0.5 * np.einsum("ij,ij->i", R, R) / n + lam * _penalty(design, Beta)


def kkt_residuals(design: GroupedDesign, Y, Beta, lam):
    """Sup-norm of the minimum-norm element of the subdifferential, per row.

    Active groups compare the correlation ``X_(j)^T r / n`` with
    ``lam w_j`` times the gradient of the block norm; inactive groups
    contribute only the amount by which the correlation leaves the dual
    ball of radius ``lam w_j``.
    """
    Y = np.atleast_2d(Y)
    Beta = np.atleast_2d(Beta)
    X = design.X
    C = (Y - Beta @ X.T) @ X / design.n
    if design.alpha == 1:
        thr = lam * design.w
        act = Beta != 0
        g = np.where(act, C - thr * np.sign(Beta), np.sign(C) * np.maximum(np.abs(C) - thr, 0.0))
        return np.abs(g).max(axis=1)
    part = design.partition
    gi = part.group_of
    nb = part.group_norms(Beta)
    nc = part.group_norms(C)
    thr = lam * design.weights
    act = nb > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(act[:, gi], Beta / nb[:, gi], 0.0)
        excess = np.where(nc > thr, 1.0 - thr / nc, 0.0)
    g = np.where(act[:, gi], C - thr[gi] * unit, C * excess[:, gi])
    return np.abs(g).max(axis=1)


def kkt_tolerance(design: GroupedDesign, Y):
    Y = np.atleast_2d(Y)
    return KKT_RTOL * (1.0 + np.abs(Y @ design.X / design.n).max(axis=1))


def solve_batch(
    design: GroupedDesign,
    Y,
    lam: float,
    beta_init=None,
    *,
    max_iter: int = 50000,
    check_every: int = 10,
    tol=None,
    trace: bool = False,
):
    """Solve the block Lasso for every row of ``Y`` at once.

    Accelerated proximal gradient with step ``1/L``, ``L`` the top
    eigenvalue of ``X^T X / n``. A step that would raise the objective is
    rejected and the momentum restarted from the current iterate, so the
    accepted iterates never increase the objective. Rows are dropped from
    the working set once their KKT residual falls below tolerance.

    Returns
    -------
    Beta : (N, p) array
    n_iter : (N,) int array
    residual : (N,) array of KKT residuals
    converged : (N,) bool array
    trace : list of objective arrays (only if ``trace``; row 0 only)
    """
    _check_alpha(design)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if not np.all(np.isfinite(Y)):
        raise ValueError("y contains non-finite values")
    N, n = Y.shape
    if n != design.n:
        raise ValueError(f"y has length {n}, design has n = {design.n}")
    X = design.X
    p = design.p
    L = design.lipschitz
    if L <= 0:
        raise ValueError("design has zero Gram matrix")
    tol = kkt_tolerance(design, Y) if tol is None else np.broadcast_to(np.asarray(tol, float), (N,)).copy()

    x = np.zeros((N, p)) if beta_init is None else np.array(np.broadcast_to(beta_init, (N, p)), dtype=float)
    Xx = x @ X.T
    z, Xz = x.copy(), Xx.copy()
    tk = np.ones(N)
    F = _objective(design, x, Y - Xx, lam)
    n_iter = np.zeros(N, dtype=int)
    resid = kkt_residuals(design, Y, x, lam)
    converged = resid < tol
    idx = np.flatnonzero(~converged)
    hist = [F[0]] if trace else None

    it = 0
    while idx.size and it < max_iter:
        it += 1
        a = idx
        Ya = Y[a]
        grad = -((Ya - Xz[a]) @ X) / design.n
        xn = _prox(design, z[a] - grad / L, lam / L)
        Xn = xn @ X.T
        Fn = _objective(design, xn, Ya - Xn, lam)
        Fa = F[a]
        acc = Fn <= Fa + _MONOTONE_SLACK * (1.0 + np.abs(Fa))
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk[a] ** 2))
        xo, Xo = x[a], Xx[a]
        acc2 = acc[:, None]
        xk = np.where(acc2, xn, xo)
        Xk = np.where(acc2, Xn, Xo)
        c1 = (tk[a] / tn)[:, None]
        c2 = ((tk[a] - 1.0) / tn)[:, None]
        zn = xk + c1 * (xn - xk) + c2 * (xk - xo)
        Xzn = Xk + c1 * (Xn - Xk) + c2 * (Xk - Xo)
        zn = np.where(acc2, zn, xk)
        Xzn = np.where(acc2, Xzn, Xk)
        tn = np.where(acc, tn, 1.0)
        x[a], Xx[a], z[a], Xz[a], tk[a] = xk, Xk, zn, Xzn, tn
        F[a] = np.where(acc, Fn, Fa)
        n_iter[a] = it
        if trace and a[0] == 0:
            hist.append(F[0])
        if it % check_every == 0:
            r = kkt_residuals(design, Ya, x[a], lam)
            resid[a] = r
            done = r < tol[a]
            converged[a[done]] = True
            idx = a[~done]
    if idx.size:
        resid[idx] = kkt_residuals(design, Y[idx], x[idx], lam)
        ok = resid[idx] < tol[idx]
        converged[idx[ok]] = True
    return x, n_iter, resid, converged, hist


def extract_subgradient(design: GroupedDesign, y, beta_hat, lam: float):
    """``S = (n lam W)^-1 X^T (y - X beta_hat)``; works row-wise on batches."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    y = np.asarray(y, dtype=float)
    beta_hat = np.asarray(beta_hat, dtype=float)
    X = design.X
    resid = y - beta_hat @ X.T
    return (resid @ X) / (design.n * lam * design.w)


def _zero_small_groups(design: GroupedDesign, Beta):
    if design.alpha == 1:
        Beta[np.abs(Beta) < ACTIVE_TOL] = 0.0
        return Beta
    part = design.partition
    gam = part.group_norms(Beta)
    small = gam < ACTIVE_TOL
    if np.any(small):
        Beta[small[:, part.group_of]] = 0.0
    return Beta


def _polish(design: GroupedDesign, y, beta, lam, max_newton: int = 30):
    """Newton refinement of the active-set stationarity equations.

    Proximal-gradient output is accurate to the KKT tolerance only; the
    refinement drives active blocks to machine precision so that
    ``b_(j) = gamma_j eta(S_(j))`` reproduces ``beta_hat`` tightly. The
    result is kept only if it lowers the KKT residual without changing the
    active set or signs.
    """
    part = design.partition
    if design.alpha == 1:
        idx = np.flatnonzero(beta)
    else:
        act = np.flatnonzero(part.group_norms(beta) > 0)
        idx = np.concatenate([part.groups[j] for j in act]) if act.size else np.zeros(0, int)
    if idx.size == 0 or (design.alpha == 1 and idx.size > design.n):
        return beta
    X = design.X
    c = X[:, idx].T @ y / design.n
    P = design.psi[np.ix_(idx, idx)]
    w = design.w[idx]
    b = beta[idx].copy()
    try:
        if design.alpha == 1:
            sgn = np.sign(b)
            b = np.linalg.solve(P, c - lam * w * sgn)
            if np.any(np.sign(b) != sgn):
                return beta
        else:
            gi = part.group_of[idx]
            blocks = [np.flatnonzero(gi == j) for j in np.unique(gi)]
            for _ in range(max_newton):
                nb = np.empty_like(b)
                for bl in blocks:
                    nb[bl] = np.linalg.norm(b[bl])
                if np.any(nb == 0):
                    return beta
                u = b / nb
                g = P @ b - c + lam * w * u
                if np.abs(g).max() < 1e-15 * (1.0 + np.abs(c).max()):
                    break
                Hs = P.copy()
                for bl in blocks:
                    ub = u[bl]
                    Hs[np.ix_(bl, bl)] += lam * w[bl][0] * (np.eye(bl.size) - np.outer(ub, ub)) / nb[bl][0]
                b = b - np.linalg.solve(Hs, g)
    except np.linalg.LinAlgError:
        return beta
    out = beta.copy()
    out[idx] = b
    if design.alpha == 2:
        if np.any((part.group_norms(out) > 0) != (part.group_norms(beta) > 0)):
            return beta
    old = kkt_residuals(design, y[None, :], beta[None, :], lam)[0]
    new = kkt_residuals(design, y[None, :], out[None, :], lam)[0]
    return out if new <= old else beta


def _make_fit(design, y, beta, lam, resid, tol, n_iter, trace=None):
    part = design.partition
    q = design.alpha
    gamma = part.group_norms(beta, q)
    S = extract_subgradient(design, y, beta, lam)
    X = design.X
    r = y - X @ beta
    obj = 0.5 * r @ r / design.n + lam * float(_penalty(design, beta[None, :])[0])
    return BlockLassoFit(
        beta_hat=beta,
        S=S,
        lam=float(lam),
        alpha=design.alpha,
        active=tuple(int(j) for j in np.flatnonzero(gamma > 0)),
        gamma_hat=gamma,
        kkt_residual=float(resid),
        kkt_tol=float(tol),
        objective=float(obj),
        n_iter=int(n_iter),
        y=np.asarray(y, dtype=float).copy(),
        objective_trace=None if trace is None else np.asarray(trace),
    )


def solve_block_lasso(
    design: GroupedDesign,
    y,
    lam: float,
    beta_init=None,
    *,
    max_iter: int = 50000,
    trace: bool = False,
    polish: bool = True,
) -> BlockLassoFit:
    """Minimize ``||y - X b||^2 / (2n) + lam * sum_j w_j ||b_(j)||_alpha``.

    Raises
    ------
    ConvergenceError
        If the KKT residual is still above ``1e-9 (1 + ||X^T y / n||_inf)``
        after ``max_iter`` iterations.

    Notes
    -----
    With ``polish`` the proximal-gradient solution is refined by Newton
    steps on the active set (see ``_polish``).
    """
    y = np.asarray(y, dtype=float).ravel()
    Beta, it, resid, conv, hist = solve_batch(design, y[None, :], lam, beta_init, max_iter=max_iter, trace=trace)
    tol = kkt_tolerance(design, y[None, :])[0]
    if not conv[0]:
        raise ConvergenceError(
            f"block Lasso did not converge in {max_iter} iterations (KKT residual {resid[0]:.3e}, tol {tol:.3e})",
            residual=float(resid[0]),
        )
    beta = _zero_small_groups(design, Beta)[0]
    if polish:
        beta = _polish(design, y, beta, lam)
        resid = kkt_residuals(design, y[None, :], beta[None, :], lam)
    return _make_fit(design, y, beta, lam, resid[0], tol, it[0], hist)


def solve_many(design: GroupedDesign, Y, lam: float, *, max_iter: int = 50000):
    """Batch solve returning ``(Beta, S, converged)`` arrays."""
    Beta, _, resid, conv, _ = solve_batch(design, Y, lam, max_iter=max_iter)
    Beta = _zero_small_groups(design, Beta)
    S = extract_subgradient(design, Y, Beta, lam)
    return Beta, S, conv


def lambda_max(design: GroupedDesign, y) -> float:
    """Smallest lambda at which the zero vector solves the problem."""
    c = design.X.T @ np.asarray(y, dtype=float) / design.n
    if design.alpha == 1:
        return float(np.max(np.abs(c) / design.w))
    return float(np.max(design.partition.group_norms(c, design.alpha_star) / design.weights))


def _active_count(design, fit):
    if design.alpha == 1:
        return int(np.count_nonzero(fit.gamma_hat))
    return len(fit.active)


def _bracket_entry(design, y, c, rel_tol, max_bisect):
    """Bisect for the lambda at which the active count first reaches ``c``.

    Returns ``(lo, count_lo, hi, count_hi)`` with ``count_lo >= c``,
    ``count_hi < c`` and ``hi / lo - 1 < rel_tol``.
    """
    hi = lambda_max(design, y)
    if hi <= 0:
        raise LambdaSelectionError("y is orthogonal to every group; no lambda activates a group")
    count_hi = 0
    lo = hi
    beta = None
    for _ in range(60):
        lo = lo / 2
        fit_lo = solve_block_lasso(design, y, lo, beta, polish=False)
        beta = fit_lo.beta_hat
        count_lo = _active_count(design, fit_lo)
        if count_lo >= c:
            break
        hi, count_hi = lo, count_lo
    else:
        raise LambdaSelectionError(f"fewer than {c} groups active down to lambda = {lo:.3e}")
    for _ in range(max_bisect):
        if hi / lo - 1.0 < rel_tol:
            break
        mid = np.sqrt(lo * hi)
        fit = solve_block_lasso(design, y, mid, fit_lo.beta_hat, polish=False)
        cm = _active_count(design, fit)
        if cm >= c:
            lo, count_lo, fit_lo = mid, cm, fit
        else:
            hi, count_hi = mid, cm
    return lo, count_lo, hi, count_hi


def select_lambda_by_active_groups(
    design: GroupedDesign,
    y,
    k: int,
    *,
    rule: str = "entry",
    rel_tol: float = 1e-4,
    max_bisect: int = 60,
) -> float:
    """Choose lambda so that the fit has exactly ``k`` active groups.

    ``rule="entry"`` returns the lambda at which the ``k``-th group enters
    the path: exactly ``k`` groups are active there and fewer than ``k``
    at ``lam * (1 + rel_tol)``. ``rule="smallest"`` returns the smallest
    lambda on the path with exactly ``k`` active groups, just above the
    entry of group ``k + 1``. Both brackets start from the all-zero
    threshold and are halved until the target count is reached, then
    bisected with warm starts.

    Raises
    ------
    LambdaSelectionError
        When the count jumps past ``k`` so that no lambda gives exactly
        ``k`` active groups.
    """
    if not 1 <= k <= design.J:
        raise ValueError("k must lie in 1..J")
    if rule not in ("entry", "smallest"):
        raise ValueError("rule must be 'entry' or 'smallest'")
    if rule == "entry":
        lo, count_lo, hi, count_hi = _bracket_entry(design, y, k, rel_tol, max_bisect)
        if count_lo != k:
            raise LambdaSelectionError(
                f"active-group count jumps from {count_hi} to {count_lo} between "
                f"lambda = {hi:.6g} and {lo:.6g}; no lambda gives exactly {k}"
            )
        lam = lo
    else:
        if k == design.J:
            raise LambdaSelectionError("with k = J the smallest such lambda is not attained")
        lo, count_lo, hi, count_hi = _bracket_entry(design, y, k + 1, rel_tol, max_bisect)
        if count_hi != k:
            raise LambdaSelectionError(
                f"active-group count jumps from {count_hi} to {count_lo} between "
                f"lambda = {hi:.6g} and {lo:.6g}; no lambda gives exactly {k}"
            )
        lam = hi
    logger.debug("selected lambda %.6g with %d active groups (%s rule)", lam, k, rule)
    return float(lam)


def uniqueness_certificate(design: GroupedDesign, fit: BlockLassoFit, band: float = 1e-7) -> UniquenessReport:
    """Check ``null(Z) = {0}`` on the equicorrelation set.

    ``E`` collects the groups whose scaled residual correlation reaches
    lambda (coordinates when alpha = 1); ``Z_j = X_(j) eta(S_(j))``.
    """
    X = design.X
    lam = fit.lam
    c = X.T @ (fit.y - X @ fit.beta_hat) / design.n
    if design.alpha == 1:
        corr = np.abs(c) / design.w
        E = tuple(int(k) for k in np.flatnonzero(np.abs(corr - lam) < band * lam))
        Z = X[:, list(E)] * np.sign(fit.S[list(E)])[None, :] if E else np.zeros((design.n, 0))
        n_active = int(np.count_nonzero(fit.beta_hat))
        bound = min(design.n, design.p)
    else:
        part = design.partition
        qs = design.alpha_star
        corr = np.array([lp_norm(c[g], qs) for g in part.groups]) / design.weights
        E = tuple(int(j) for j in np.flatnonzero(np.abs(corr - lam) < band * lam))
        rho = design.rho
        cols = [X[:, part.groups[j]] @ eta(fit.S[part.groups[j]], rho) for j in E]
        Z = np.column_stack(cols) if cols else np.zeros((design.n, 0))
        n_active = len(fit.active)
        bound = min(design.n, design.J)
    if Z.shape[1] == 0:
        rank, certified = 0, True
    else:
        sv = np.linalg.svd(Z, compute_uv=False)
        rank = int(np.sum(sv > 1e-8 * sv[0])) if sv[0] > 0 else 0
        certified = rank == Z.shape[1]
    return UniquenessReport(E=E, Z=Z, rank_Z=rank, certified=certified, active_bound_ok=n_active <= bound)
