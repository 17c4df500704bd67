"""Shared numerical kernels.

Modified Bessel function of the second kind, (pivoted) Cholesky
factorization with triangular solves, a restartable Nelder-Mead driver,
and reference-distribution helpers (standard normal, Student-t,
F-Snedecor). Everything is a pure function of its arguments and safe to
call concurrently.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize, special


class NumericsError(Exception):
    """Base class for numerical-kernel failures."""


class NotPositiveDefinite(NumericsError):
    """Cholesky factorization failed even after a single jitter attempt.

    Usually signals a degenerate station configuration, e.g. duplicated
    locations combined with a vanishing nugget.
    """


class NotPSD(NumericsError):
    """A residual pivot is significantly negative: not positive semi-definite."""


class NonFiniteObjective(NumericsError):
    """Objective returned a non-finite value at the starting point."""


class UnderflowWarning(RuntimeWarning):
    """A special-function result underflowed to zero."""


# Relative tolerance for treating an "approximately symmetric" input as
# symmetric, and the single-shot jitter scale for near-singular factorizations.
SYMMETRY_RTOL = 1e-10
JITTER_RTOL = 1e-8


def bessel_k(nu, x):
    """Modified Bessel function of the second kind, K_nu(x).

    Parameters
    ----------
    nu : float or array_like
        Order, > 0.
    x : float or array_like
        Argument, > 0. For x beyond ~700 the result underflows to 0; the
        value 0 is returned and an :class:`UnderflowWarning` is emitted.

    Returns
    -------
    float or ndarray
        K_nu(x), broadcast over the inputs.
    """
    nu_arr = np.asarray(nu, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if np.any(nu_arr <= 0.0) or not np.all(np.isfinite(nu_arr)):
        raise ValueError("bessel_k: order nu must be finite and > 0")
    if np.any(x_arr <= 0.0) or not np.all(np.isfinite(x_arr)):
        raise ValueError("bessel_k: argument x must be finite and > 0")
    out = special.kv(nu_arr, x_arr)
    if np.any(out == 0.0):
        warnings.warn("bessel_k underflowed to 0 for large x", UnderflowWarning,
                      stacklevel=2)
    if np.any(~np.isfinite(out)):
        warnings.warn("bessel_k overflowed for extreme (nu, x)", RuntimeWarning,
                      stacklevel=2)
    if np.isscalar(nu) and np.isscalar(x):
        return float(out)
    return out


def _require_symmetric(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale > 0.0 and np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
        raise ValueError(f"{name}: input matrix is not symmetric")
    return a


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular Cholesky factor with its log-determinant."""

    lower: np.ndarray
    logdet: float

    def solve(self, b):
        """Solve A x = b through the factor (two triangular solves)."""
        y = linalg.solve_triangular(self.lower, b, lower=True)
        return linalg.solve_triangular(self.lower.T, y, lower=False)


def cholesky(a) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix as L L^T.

    If the plain factorization fails, a single additive jitter of
    ``1e-8 * trace(a)/n`` is tried before raising
    :class:`NotPositiveDefinite`.
    """
    a = _require_symmetric(a, "cholesky")
    try:
        lower = linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        n = a.shape[0]
        jitter = JITTER_RTOL * np.trace(a) / n
        if jitter <= 0.0:
            raise NotPositiveDefinite("matrix is not positive definite") from None
        try:
            lower = linalg.cholesky(a + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            raise NotPositiveDefinite(
                "matrix is not positive definite (even after jitter)") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(lower))))
    return CholeskyFactor(lower=lower, logdet=logdet)


@dataclass(frozen=True)
class PivotedCholeskyFactor:
    """Greedy-pivoted Cholesky factor P^T A P = U^T U.

    ``permutation[k]`` is the original index chosen at pivot step ``k``;
    ``rank`` counts the positive pivots. The matrix G = P U^T satisfies
    G G^T = A and is what decorrelation solves go through.
    """

    permutation: np.ndarray
    upper: np.ndarray
    rank: int

    def decorrelate(self, r):
        """Solve G z = r with G = P U^T (requires full rank)."""
        if self.rank < self.upper.shape[0]:
            raise NotPSD("matrix is rank deficient; cannot decorrelate")
        rp = np.asarray(r, dtype=float)[self.permutation]
        return linalg.solve_triangular(self.upper.T, rp, lower=True)


def pivoted_cholesky(a) -> PivotedCholeskyFactor:
    """Pivoted Cholesky factorization of a symmetric PSD matrix.

    Pivots greedily on the largest remaining diagonal entry, so the pivot
    sequence is non-increasing. Stops early on rank deficiency (residual
    pivots below ``1e-10 * max diag``); raises :class:`NotPSD` if a
    residual diagonal entry falls below ``-1e-8 * max diag``.
    """
    a = _require_symmetric(a, "pivoted_cholesky")
    n = a.shape[0]
    work = a.copy()
    perm = np.arange(n)
    max_diag = max(float(np.max(np.diag(work))), 0.0) if n else 0.0
    neg_tol = -1e-8 * max_diag
    rank_tol = 1e-10 * max_diag
    rank = n
    for k in range(n):
        d = np.diag(work)[k:]
        if np.min(d) < neg_tol:
            raise NotPSD("residual diagonal entry is significantly negative")
        j = k + int(np.argmax(d))
        if work[j, j] <= rank_tol:
            rank = k
            # residual block is numerically zero; keep the factor columns
            work[k:, k:] = 0.0
            break
        if j != k:
            work[[k, j], :] = work[[j, k], :]
            work[:, [k, j]] = work[:, [j, k]]
            perm[[k, j]] = perm[[j, k]]
        pivot = math.sqrt(work[k, k])
        work[k, k] = pivot
        work[k + 1:, k] /= pivot
        col = work[k + 1:, k]
        work[k + 1:, k + 1:] -= np.outer(col, col)
        work[k, k + 1:] = 0.0
    upper = np.tril(work).T
    return PivotedCholeskyFactor(permutation=perm, upper=upper, rank=rank)


@dataclass(frozen=True)
class OptimizerOptions:
    """Settings for the Nelder-Mead driver.

    ``max_evals`` is the function-evaluation budget per restart;
    ``restarts`` > 1 re-runs from deterministically jittered copies of the
    starting point (jitter stream seeded by ``seed``) and returns the best
    result, ties broken by lowest restart index.
    """

    max_evals: int = 2000
    simplex_tolerance: float = 1e-8
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if not self.simplex_tolerance > 0.0:
            raise ValueError("simplex_tolerance must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def nelder_mead(objective, x0, opts: OptimizerOptions):
    """Minimize a scalar function of a real vector, derivative-free.

    Returns ``(x_best, f_best)`` with ``f_best <= objective(x0)``. Each
    restart terminates when the simplex spread falls below
    ``opts.simplex_tolerance`` or after ``opts.max_evals`` evaluations.
    Deterministic for fixed ``(x0, opts.seed)``.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = float(objective(x0))
    if not math.isfinite(f0):
        raise NonFiniteObjective("objective is not finite at the starting point")

    def guarded(x):
        v = float(objective(x))
        # NaN would corrupt simplex ordering; +inf is rejected cleanly.
        return math.inf if math.isnan(v) else v

    rng = np.random.default_rng(opts.seed)
    starts = [x0]
    for _ in range(opts.restarts - 1):
        starts.append(x0 + rng.normal(scale=0.25 * (np.abs(x0) + 1.0)))

    best_x, best_f = x0, f0
    for start in starts:
        # scipy's default simplex barely perturbs zero coordinates; a
        # floored step keeps every direction searchable from the start
        steps = np.maximum(0.05 * np.abs(start), 0.25)
        simplex = np.vstack([start, start + np.diag(steps)])
        res = optimize.minimize(
            guarded, start, method="Nelder-Mead",
            options={
                "maxfev": opts.max_evals,
                "xatol": opts.simplex_tolerance,
                "fatol": opts.simplex_tolerance,
                "initial_simplex": simplex,
                "adaptive": len(start) > 2,
                "disp": False,
            },
        )
        if float(res.fun) < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
    return best_x, best_f


def f_cdf(x, d1: int, d2: int) -> float:
    """CDF of the F-Snedecor distribution via the regularized incomplete beta."""
    if d1 < 1 or d2 < 1:
        raise ValueError("f_cdf: degrees of freedom must be >= 1")
    if x < 0.0:
        raise ValueError("f_cdf: x must be >= 0")
    if x == 0.0:
        return 0.0
    z = d1 * x / (d1 * x + d2)
    return float(special.betainc(0.5 * d1, 0.5 * d2, z))


def f_sf(x, d1: int, d2: int) -> float:
    """Upper-tail probability of F(d1, d2), computed in the complementary
    form for accuracy far in the tail."""
    if d1 < 1 or d2 < 1:
        raise ValueError("f_sf: degrees of freedom must be >= 1")
    if x < 0.0:
        raise ValueError("f_sf: x must be >= 0")
    return float(special.betainc(0.5 * d2, 0.5 * d1, d2 / (d1 * x + d2)))


def std_normal_quantile(p: float) -> float:
    """Quantile of the standard normal distribution."""
    if not 0.0 < p < 1.0:
        raise ValueError("std_normal_quantile: p must lie in (0, 1)")
    return float(special.ndtri(p))


def student_t_quantile(p: float, df: float) -> float:
    """Quantile of the Student-t distribution with ``df`` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError("student_t_quantile: p must lie in (0, 1)")
    if df < 1:
        raise ValueError("student_t_quantile: df must be >= 1")
    return float(special.stdtrit(df, p))
