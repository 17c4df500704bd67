"""Posterior prediction of the actual field and conditional simulation.

Everything here conditions the marginal Gaussian model on one event's
training pairs. The coefficient uncertainty is kept (the prior scale B
is finite), so far from the data predictions revert to the regression
mean with an inflated basis-term variance instead of collapsing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import correlation_block, rotate_array
from .dataio import GridField
from .inference import ModelFit, basis_matrix
from .numerics import pivoted_cholesky, std_normal_quantile, student_t_quantile

# degrees of freedom above which Gaussian quantiles replace Student-t
GAUSSIAN_DF = 30


@dataclass(frozen=True)
class PosteriorField:
    """Joint posterior at a set of target records.

    ``space`` is "actual_field" for the latent field Z and "measurement"
    when the independent measurement-error variance is added back.
    ``covariance`` is None for diagonal-only predictions; ``variance``
    always holds the diagonal. ``df`` = K - q drives interval quantiles.
    """

    event: str
    locations: np.ndarray
    intensities: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None
    df: int
    space: str
    extrapolated: np.ndarray | None = None
    cell_index: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.mean)
        if not (len(self.locations) == len(self.intensities)
                == len(self.variance) == n):
            raise ValueError("posterior component lengths disagree")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("posterior mean must be finite")
        if self.covariance is not None and self.covariance.shape != (n, n):
            raise ValueError("covariance shape mismatch")
        if self.space not in ("actual_field", "measurement"):
            raise ValueError(f"unknown space {self.space!r}")

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def interval(self, level: float = 0.95, law: str = "auto"):
        """Central interval bounds per target.

        ``law`` is "gauss", "t", or "auto" (t for df <= 30, else
        Gaussian).
        """
        if not 0.0 < level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if law == "auto":
            law = "t" if self.df <= GAUSSIAN_DF else "gauss"
        p = 0.5 * (1.0 + level)
        if law == "gauss":
            zq = std_normal_quantile(p)
        elif law == "t":
            zq = student_t_quantile(p, max(self.df, 1))
        else:
            raise ValueError(f"unknown interval law {law!r}")
        half = zq * self.sd
        return self.mean - half, self.mean + half


@dataclass(frozen=True)
class FieldRealization:
    """One simulated draw of the actual field at the posterior's targets."""

    event: str
    values: np.ndarray
    seed: int


def _normalize_targets(targets):
    """Accept [(location, x), ...], an (n, 3) array, or (loc, x) arrays."""
    if isinstance(targets, tuple) and len(targets) == 2:
        loc, x = targets
        return np.atleast_2d(np.asarray(loc, dtype=float)), \
            np.atleast_1d(np.asarray(x, dtype=float))
    arr = np.asarray(targets, dtype=object)
    if isinstance(targets, np.ndarray) and targets.ndim == 2 and targets.shape[1] == 3:
        t = np.asarray(targets, dtype=float)
        return t[:, :2].copy(), t[:, 2].copy()
    loc = np.array([[float(t[0][0]), float(t[0][1])] for t in arr])
    x = np.array([float(t[1]) for t in arr])
    return loc, x


def _conditional(fit: ModelFit, event: str, loc, x, full_cov: bool,
                 add_noise: bool):
    ef = fit.event(event)
    theta, prior = fit.theta, fit.prior
    loc = np.atleast_2d(np.asarray(loc, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if loc.shape[0] != x.shape[0] or loc.shape[1] != 2:
        raise ValueError("targets must supply (n, 2) locations and n intensities")

    loc_t = rotate_array(loc, theta.omega)
    t_mat = correlation_block(theta, loc_t, x, ef.locations_rot, ef.x)
    h_t = basis_matrix(x, prior.q)
    mean = h_t @ ef.beta_hat + t_mat @ ef.weights

    ainv_tt = ef.A_factor.solve(t_mat.T)
    r = h_t - t_mat @ ef.Ainv_H
    # the record-level nugget splits into measurement error (never part
    # of Z) and micro-scale field variance (diagonal of Z only)
    nugget_z = max(theta.lambda2 - prior.sigmaY ** 2 / ef.sigma_hat2, 0.0)
    noise = prior.sigmaY ** 2 if add_noise else 0.0

    if full_cov:
        c_t = correlation_block(theta, loc_t, x, loc_t, x)
        cov = c_t - t_mat @ ainv_tt + r @ ef.Bstar @ r.T
        cov[np.diag_indices_from(cov)] += nugget_z
        cov *= ef.sigma_hat2
        cov[np.diag_indices_from(cov)] += noise
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
    else:
        var = (1.0 + nugget_z
               - np.einsum("ij,ji->i", t_mat, ainv_tt)
               + np.einsum("ij,ij->i", r @ ef.Bstar, r))
        var = ef.sigma_hat2 * np.clip(var, 0.0, None) + noise
        cov = None
    df = ef.K - prior.q
    return loc, x, mean, var, cov, df


def posterior_field(fit: ModelFit, event: str, targets,
                    full_cov: bool = False) -> PosteriorField:
    """Posterior of the actual field Z at target (location, intensity) records.

    The mean is H_t beta_hat + T A^{-1} (y - H beta_hat); the covariance
    is sigma_hat2 times the conditioned correlation, including the
    coefficient-uncertainty term through B*.
    """
    loc, x = _normalize_targets(targets)
    loc, x, mean, var, cov, df = _conditional(fit, event, loc, x, full_cov,
                                              add_noise=False)
    return PosteriorField(event=event, locations=loc, intensities=x,
                          mean=mean, variance=var, covariance=cov, df=df,
                          space="actual_field")


def predictive_measurements(fit: ModelFit, event: str, targets,
                            full_cov: bool = True) -> PosteriorField:
    """Predictive distribution of held-out measurements Y = Z + noise.

    Identical to :func:`posterior_field` except the measurement-error
    variance is added to the diagonal.
    """
    loc, x = _normalize_targets(targets)
    loc, x, mean, var, cov, df = _conditional(fit, event, loc, x, full_cov,
                                              add_noise=True)
    return PosteriorField(event=event, locations=loc, intensities=x,
                          mean=mean, variance=var, covariance=cov, df=df,
                          space="measurement")


def sample_field(posterior: PosteriorField, n: int, seed: int):
    """Draw ``n`` joint realizations from a full-covariance posterior.

    Uses the pivoted factor G with G G^T = covariance, so rank-deficient
    (even zero) covariances sample exactly. Deterministic in
    (posterior, n, seed).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if posterior.covariance is None:
        raise ValueError("sample_field requires a full-covariance posterior")
    factor = pivoted_cholesky(posterior.covariance)
    m = len(posterior.mean)
    g = np.zeros((m, m))
    g[factor.permutation, :] = factor.upper.T
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, m))
    draws = posterior.mean + z @ g.T
    return [FieldRealization(event=posterior.event, values=draws[i], seed=seed)
            for i in range(n)]


def predict_grid(fit: ModelFit, event: str, grid: GridField,
                 full_cov: bool = False) -> PosteriorField:
    """Posterior of the actual field at every non-missing grid cell.

    Cells at or below the event's fitting threshold are still predicted
    but marked in ``extrapolated``; ``cell_index`` maps targets back to
    row-major grid positions.
    """
    ef = fit.event(event)
    centers = grid.cell_centers()
    vals = grid.values.ravel()
    valid = np.flatnonzero(np.isfinite(vals))
    if valid.size == 0:
        raise ValueError("grid has no non-missing cells")
    loc = centers[valid]
    x = vals[valid]
    loc, x, mean, var, cov, df = _conditional(fit, event, loc, x, full_cov,
                                              add_noise=False)
    return PosteriorField(event=event, locations=loc, intensities=x,
                          mean=mean, variance=var, covariance=cov, df=df,
                          space="actual_field",
                          extrapolated=x <= ef.dataset.threshold,
                          cell_index=valid)


def _scatter(grid: GridField, pf: PosteriorField, values) -> GridField:
    flat = np.full(grid.n1 * grid.n2, np.nan)
    idx = pf.cell_index if pf.cell_index is not None else np.arange(len(values))
    flat[idx] = values
    return GridField(event=grid.event, n1=grid.n1, n2=grid.n2,
                     origin=grid.origin, spacing=grid.spacing,
                     values=flat.reshape(grid.n1, grid.n2),
                     coordinate_system=grid.coordinate_system)


def export_grids(pf: PosteriorField, grid: GridField):
    """Grid-shaped views of a grid prediction.

    Returns a dict of GridFields: posterior mean, posterior SD, mean
    minus simulated, mean over simulated, and the extrapolation mask
    (1 where the simulated value was at or below the fit threshold).
    """
    if pf.cell_index is None:
        raise ValueError("posterior was not produced by predict_grid")
    sim = grid.values.ravel()[pf.cell_index]
    out = {
        "mean": _scatter(grid, pf, pf.mean),
        "sd": _scatter(grid, pf, pf.sd),
        "diff": _scatter(grid, pf, pf.mean - sim),
        "ratio": _scatter(grid, pf, pf.mean / sim),
        "extrapolated": _scatter(grid, pf, pf.extrapolated.astype(float)),
    }
    return out


def points_csv_rows(pf: PosteriorField, level: float = 0.95,
                    law: str = "auto"):
    """Header and formatted rows for the point-prediction CSV export."""
    lo, hi = pf.interval(level=level, law=law)
    pct = round(level * 100)
    header = ["event", "s1", "s2", "x_sim", "post_mean", "post_sd",
              f"lo{pct}", f"hi{pct}"]
    rows = []
    for i in range(len(pf.mean)):
        rows.append([pf.event,
                     f"{pf.locations[i, 0]:.6g}", f"{pf.locations[i, 1]:.6g}",
                     f"{pf.intensities[i]:.6g}", f"{pf.mean[i]:.6g}",
                     f"{pf.sd[i]:.6g}", f"{lo[i]:.6g}", f"{hi[i]:.6g}"])
    return header, rows
