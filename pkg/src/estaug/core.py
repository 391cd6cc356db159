"""Grouped design matrices, the power map between dual unit spheres, and
the linear-algebra factors shared by the solver and the density code."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

RANK_RTOL = 1e-10


class EstaugError(Exception):
    """Base class for errors raised by this package."""


class RankDeficientError(EstaugError):
    pass


class SingularityError(EstaugError):
    pass


def _check_finite(v):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("input contains non-finite values")
    return v


def conjugate_exponent(alpha: float) -> float:
    """Return alpha* with 1/alpha + 1/alpha* = 1 (inf for alpha = 1)."""
    if alpha == 1:
        return np.inf
    if np.isinf(alpha):
        return 1.0
    return alpha / (alpha - 1.0)


def rho_of(alpha: float) -> float:
    """Exponent of the power map, alpha*/alpha = 1/(alpha - 1)."""
    if alpha <= 1:
        raise ValueError("rho is defined for alpha > 1 only")
    return 1.0 / (alpha - 1.0)


def eta(v, rho: float):
    """Componentwise ``sgn(x) |x|**rho``.

    For ``v`` on the unit l_{alpha*} sphere the image lies on the unit
    l_alpha sphere.
    """
    v = _check_finite(v)
    if rho <= 0:
        raise ValueError("rho must be positive")
    if rho == 1:
        return v.copy()
    return np.sign(v) * np.abs(v) ** rho


def eta_inv(v, rho: float):
    v = _check_finite(v)
    if rho <= 0:
        raise ValueError("rho must be positive")
    if rho == 1:
        return v.copy()
    return np.sign(v) * np.abs(v) ** (1.0 / rho)


def eta_prime(x, rho: float):
    """Derivative ``rho |x|**(rho - 1)``; diverges at 0 when rho < 1."""
    x = _check_finite(x)
    if rho <= 0:
        raise ValueError("rho must be positive")
    if rho == 1:
        return np.ones_like(x)
    if rho < 1 and np.any(x == 0):
        raise SingularityError(
            "eta'(0) is infinite for rho < 1; the point lies on a measure-zero boundary"
        )
    return rho * np.abs(x) ** (rho - 1.0)


def lp_norm(v, q: float) -> float:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    if np.isinf(q):
        return float(np.max(np.abs(v)))
    return float(np.sum(np.abs(v) ** q) ** (1.0 / q))


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint groups covering ``0..p-1`` with positive weights.

    Groups are stored as integer index arrays. When ``weights`` is omitted
    each group gets ``sqrt(p_j)``.
    """

    groups: tuple
    weights: np.ndarray

    def __init__(self, groups: Sequence[Sequence[int]], weights=None):
        gs = tuple(np.asarray(g, dtype=int).ravel() for g in groups)
        if not gs:
            raise ValueError("at least one group is required")
        if any(g.size == 0 for g in gs):
            raise ValueError("groups must be non-empty")
        allidx = np.concatenate(gs)
        p = allidx.size
        if not np.array_equal(np.sort(allidx), np.arange(p)):
            raise ValueError("groups must be disjoint and cover 0..p-1")
        if weights is None:
            w = np.sqrt([g.size for g in gs]).astype(float)
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.size == 1 and len(gs) > 1:
                w = np.full(len(gs), float(w[0]))
        if w.size != len(gs):
            raise ValueError("need one weight per group")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "groups", gs)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], weights=None) -> "GroupPartition":
        """Consecutive groups with the given sizes."""
        bounds = np.cumsum([0, *sizes])
        return cls([np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])], weights)

    @classmethod
    def singletons(cls, p: int, weights=None) -> "GroupPartition":
        return cls([[k] for k in range(p)], weights if weights is not None else np.ones(p))

    @property
    def J(self) -> int:
        return len(self.groups)

    @property
    def p(self) -> int:
        return int(sum(g.size for g in self.groups))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups])

    @cached_property
    def group_of(self) -> np.ndarray:
        """Group index of every coordinate."""
        out = np.empty(self.p, dtype=int)
        for j, g in enumerate(self.groups):
            out[g] = j
        return out

    @cached_property
    def indicator(self) -> np.ndarray:
        """p x J 0/1 membership matrix."""
        G = np.zeros((self.p, self.J))
        G[np.arange(self.p), self.group_of] = 1.0
        return G

    @property
    def coord_weights(self) -> np.ndarray:
        """Diagonal of W."""
        return self.weights[self.group_of]

    @property
    def is_singleton(self) -> bool:
        return bool(np.all(self.sizes == 1))

    def group_norms(self, v, q: float = 2.0) -> np.ndarray:
        """Block norms ``||v_(j)||_q`` for a vector or for each row of a matrix."""
        v = np.asarray(v, dtype=float)
        a = np.abs(v)
        if np.isinf(q):
            out = np.zeros(v.shape[:-1] + (self.J,))
            for j, g in enumerate(self.groups):
                out[..., j] = a[..., g].max(axis=-1)
            return out
        if q == 2:
            return np.sqrt((a * a) @ self.indicator)
        if q == 1:
            return a @ self.indicator
        return ((a**q) @ self.indicator) ** (1.0 / q)

    def __eq__(self, other):
        if not isinstance(other, GroupPartition):
            return NotImplemented
        return (
            self.J == other.J
            and all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups))
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GroupedDesign:
    """Design matrix with its group structure and cached factors.

    Attributes
    ----------
    X : (n, p) array
    partition : GroupPartition
    alpha : float
        Block-norm index in [1, inf). Fitting is available for 1 and 2 only.
    psi : (p, p) array
        Gram matrix ``X.T X / n``.
    B : (n, p) array
        ``sqrt(n) * pinv(X.T)``; maps ``row(X)`` to coordinates with respect
        to the basis ``X.T / sqrt(n)``.
    Q : (p, max(p - n, 0)) array
        Orthonormal basis of ``null(X W^-1)``.
    """

    X: np.ndarray
    partition: GroupPartition
    alpha: float = 2.0
    psi: np.ndarray = field(init=False, repr=False)
    B: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)
    lipschitz: float = field(init=False)
    rank: int = field(init=False)

    def __post_init__(self):
        X = _check_finite(self.X)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        n, p = X.shape
        if self.partition.p != p:
            raise ValueError(f"partition covers {self.partition.p} coordinates, X has {p} columns")
        alpha = float(self.alpha)
        if not (alpha >= 1 and np.isfinite(alpha)):
            raise ValueError("alpha must lie in [1, inf)")
        X = X.copy()
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "alpha", alpha)

        sv = np.linalg.svd(X, compute_uv=False)
        tol = RANK_RTOL * (sv[0] if sv.size else 0.0)
        rank = int(np.sum(sv > tol))
        if rank < min(n, p):
            raise RankDeficientError(
                f"rank(X) = {rank} < min(n, p) = {min(n, p)}: every min(n, p) columns of X "
                "must be linearly independent"
            )
        object.__setattr__(self, "rank", rank)

        psi = X.T @ X / n
        psi = 0.5 * (psi + psi.T)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "lipschitz", float(sv[0] ** 2 / n))
        object.__setattr__(self, "B", np.sqrt(n) * np.linalg.pinv(X.T, rcond=RANK_RTOL))

        XW = X / self.partition.coord_weights[None, :]
        _, s2, vt = np.linalg.svd(XW, full_matrices=True)
        r2 = int(np.sum(s2 > RANK_RTOL * s2[0]))
        object.__setattr__(self, "Q", vt[r2:].T.copy())

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def J(self) -> int:
        return self.partition.J

    @property
    def weights(self) -> np.ndarray:
        return self.partition.weights

    @property
    def w(self) -> np.ndarray:
        """Diagonal of W, one entry per coordinate."""
        return self.partition.coord_weights

    @property
    def alpha_star(self) -> float:
        return conjugate_exponent(self.alpha)

    @property
    def rho(self) -> float:
        return rho_of(self.alpha)

    @property
    def high_dimensional(self) -> bool:
        """True when ``p >= n``, where the density lives in noise coordinates."""
        return self.p >= self.n

    @cached_property
    def psi_pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.psi, rcond=RANK_RTOL, hermitian=True)

    def lasso_view(self) -> "GroupedDesign":
        """The same penalty written with singleton groups and alpha = 2.

        For alpha = 1 the block penalty is a weighted l1 norm, so every
        coordinate becomes its own group carrying its group's weight.
        """
        if self.alpha != 1:
            raise ValueError("lasso_view applies to alpha = 1 designs")
        return self._singleton_view

    @cached_property
    def _singleton_view(self) -> "GroupedDesign":
        return GroupedDesign(self.X, GroupPartition.singletons(self.p, self.w), 2.0)

    def with_weights(self, weights) -> "GroupedDesign":
        return GroupedDesign(self.X, GroupPartition(self.partition.groups, weights), self.alpha)


def build_design(X, partition, alpha: float = 2.0, weights=None) -> GroupedDesign:
    """Validate ``X`` and the partition and cache the shared factors.

    ``partition`` may be a :class:`GroupPartition`, a list of group sizes,
    or a list of index lists.
    """
    if not isinstance(partition, GroupPartition):
        partition = list(partition)
        if all(np.ndim(g) == 0 for g in partition):
            partition = GroupPartition.from_sizes([int(g) for g in partition], weights)
        else:
            partition = GroupPartition(partition, weights)
    elif weights is not None:
        partition = GroupPartition(partition.groups, weights)
    return GroupedDesign(np.asarray(X, dtype=float), partition, alpha)
