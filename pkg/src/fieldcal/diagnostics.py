"""Model adequacy diagnostics.

Two families: a binned semivariogram comparing empirical residual
dependence against the fitted correlation model, and held-out
validation checks (standardized errors, pivoted decorrelated errors,
and a Mahalanobis statistic referenced to an F distribution).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .covariance import _matern_values, correlation_matrix_arrays, rotate_array
from .dataio import EventDataset
from .inference import ModelFit, basis_matrix
from .numerics import cholesky, f_sf, pivoted_cholesky, std_normal_quantile
from .prediction import predictive_measurements

BIN_VARIABLES = ("h1", "h2", "delta_intensity")


class EmptyBin(Exception):
    """A semivariogram bin received no pairs; reduce the bin count."""


@dataclass(frozen=True)
class VariogramTable:
    """Binned empirical vs model semivariances with Monte Carlo bounds."""

    binning_variable: str
    bin_edges: np.ndarray
    bin_center: np.ndarray
    empirical: np.ndarray
    model: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        nb = len(self.empirical)
        if not (len(self.model) == len(self.lower95) == len(self.upper95)
                == len(self.counts) == len(self.bin_center) == nb):
            raise ValueError("variogram columns must share one length")
        if len(self.bin_edges) != nb + 1:
            raise ValueError("bin_edges must have bins+1 entries")
        if np.any(self.counts < 1):
            raise ValueError("every bin must contain at least one pair")
        if (np.any(self.lower95 > self.model)
                or np.any(self.model > self.upper95)):
            raise ValueError("bounds must bracket the model column")

    @property
    def bins(self) -> int:
        return len(self.empirical)

    def fraction_inside(self) -> float:
        """Share of empirical bins falling inside the 95% bounds."""
        ok = (self.empirical >= self.lower95) & (self.empirical <= self.upper95)
        return float(np.mean(ok))


def _pair_values(dataset: EventDataset, fit: ModelFit, variable: str):
    theta = fit.theta
    loc_t = rotate_array(dataset.locations, theta.omega)
    h1 = pdist(loc_t[:, :1], "cityblock")
    h2 = pdist(loc_t[:, 1:], "cityblock")
    dx = pdist(dataset.x[:, None], "cityblock")
    if variable == "h1":
        v = h1
    elif variable == "h2":
        v = h2
    elif variable == "delta_intensity":
        v = dx
    else:
        raise ValueError(f"binning variable must be one of {BIN_VARIABLES}")
    smooth = (_matern_values(h1, theta.phi1, theta.nu1)
              * _matern_values(h2, theta.phi2, theta.nu2)
              * np.exp(-(dx / theta.phiX) ** 2))
    return v, smooth, loc_t


def _bin_assignment(v: np.ndarray, bins: int):
    edges = np.quantile(v, np.linspace(0.0, 1.0, bins + 1))
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    if np.any(counts == 0):
        raise EmptyBin(
            f"{int(np.sum(counts == 0))} of {bins} bins received no pairs; reduce bins")
    return edges, idx, counts


def _bin_means(values: np.ndarray, idx: np.ndarray, bins: int,
               counts: np.ndarray) -> np.ndarray:
    return np.bincount(idx, weights=values, minlength=bins) / counts


def semivariogram(dataset: EventDataset, fit: ModelFit, variable: str,
                  bins: int, reps: int = 200, seed: int = 0) -> VariogramTable:
    """Equal-count binned semivariogram of regression residuals.

    Pairs are formed within the event only and binned on ``variable``
    (rotated-axis separation h1/h2 or intensity gap). The model column
    averages sigma_hat2 * (1 + lambda2 - c) over each bin's pairs; the
    95% bounds come from ``reps`` parametric simulations of the residual
    field under the fitted model, re-binned identically.
    """
    if len(dataset) < 2:
        raise ValueError("semivariogram needs at least 2 observations")
    if bins < 3:
        raise ValueError("bins must be >= 3")
    ef = fit.event(dataset.event)
    theta = fit.theta
    e = dataset.y - basis_matrix(dataset.x, fit.prior.q) @ ef.beta_hat

    v, smooth, loc_t = _pair_values(dataset, fit, variable)
    edges, idx, counts = _bin_assignment(v, bins)
    emp_pairs = 0.5 * pdist(e[:, None], "cityblock") ** 2
    model_pairs = ef.sigma_hat2 * (1.0 + theta.lambda2 - smooth)

    empirical = _bin_means(emp_pairs, idx, bins, counts)
    model = _bin_means(model_pairs, idx, bins, counts)
    center = _bin_means(v, idx, bins, counts)

    # parametric MC: residual fields drawn from the fitted marginal model
    a_mat = correlation_matrix_arrays(theta, loc_t, dataset.x,
                                      include_nugget=True)
    lower_factor = cholesky(a_mat).lower * np.sqrt(ef.sigma_hat2)
    rng = np.random.default_rng(seed)
    sims = np.empty((reps, bins))
    for r in range(reps):
        e_star = lower_factor @ rng.standard_normal(len(dataset))
        sims[r] = _bin_means(0.5 * pdist(e_star[:, None], "cityblock") ** 2,
                             idx, bins, counts)
    lower = np.quantile(sims, 0.025, axis=0)
    upper = np.quantile(sims, 0.975, axis=0)
    # MC quantiles should straddle the model mean; clamp the rare
    # finite-rep excursions so the table contract always holds
    lower = np.minimum(lower, model)
    upper = np.maximum(upper, model)

    return VariogramTable(binning_variable=variable, bin_edges=edges,
                          bin_center=center, empirical=empirical, model=model,
                          lower95=lower, upper95=upper, counts=counts)


def _check_training(fit: ModelFit, train: EventDataset):
    ef = fit.event(train.event)
    same = (ef.K == len(train)
            and np.allclose(ef.dataset.x, train.x)
            and np.allclose(ef.dataset.y, train.y))
    if not same:
        raise ValueError("fit was not built from the supplied training data")
    return ef


def standardized_errors(fit: ModelFit, train: EventDataset,
                        validation: EventDataset) -> np.ndarray:
    """Held-out residuals scaled by their own predictive SD.

    Under a well-specified model these are approximately independent
    standard normal (marginally), so about 5% should fall outside
    +/-1.96.
    """
    _check_training(fit, train)
    pf = predictive_measurements(fit, validation.event,
                                 (validation.locations, validation.x),
                                 full_cov=False)
    return (validation.y - pf.mean) / pf.sd


def pivoted_errors(fit: ModelFit, train: EventDataset,
                   validation: EventDataset):
    """Decorrelated held-out errors, in pivot order.

    Solves G e = (Y - m) with G from the pivoted Cholesky factor of the
    joint predictive covariance. Returns (errors, original_indices):
    ``original_indices[k]`` is the validation row the k-th error belongs
    to. Jointly standard normal under the model.
    """
    if len(validation) < 2:
        raise ValueError("pivoted_errors needs at least 2 validation points")
    _check_training(fit, train)
    pf = predictive_measurements(fit, validation.event,
                                 (validation.locations, validation.x),
                                 full_cov=True)
    factor = pivoted_cholesky(pf.covariance)
    epc = factor.decorrelate(validation.y - pf.mean)
    return epc, factor.permutation.copy()


def mahalanobis_test(fit: ModelFit, train: EventDataset,
                     validation: EventDataset):
    """Joint calibration test of the held-out predictive distribution.

    D = (Y - m)^T V^{-1} (Y - m) / n_holdout is referenced to
    F(n_holdout, K - q); returns (D, upper-tail p-value).
    """
    ef = _check_training(fit, train)
    q = fit.prior.q
    df2 = ef.K - q
    if df2 <= 0:
        raise ValueError("training degrees of freedom must be positive")
    pf = predictive_measurements(fit, validation.event,
                                 (validation.locations, validation.x),
                                 full_cov=True)
    resid = validation.y - pf.mean
    n_tilde = len(resid)
    d_mh = float(resid @ cholesky(pf.covariance).solve(resid)) / n_tilde
    p = f_sf(d_mh, n_tilde, df2)
    return d_mh, p


@dataclass(frozen=True)
class ValidationReport:
    """Bundle of the held-out validation diagnostics for one event."""

    standardized_errors: np.ndarray
    pivoted_errors: np.ndarray
    pivot_indices: np.ndarray
    qq_pairs: np.ndarray           # (n, 2): theoretical, observed
    mahalanobis: float
    mahalanobis_raw: float         # unscaled sum of squared standardized errors
    mahalanobis_pvalue: float
    df_pair: tuple

    def __post_init__(self):
        n = len(self.standardized_errors)
        if not (len(self.pivoted_errors) == len(self.pivot_indices)
                == len(self.qq_pairs) == n):
            raise ValueError("report vectors must share the holdout length")
        if not 0.0 <= self.mahalanobis_pvalue <= 1.0:
            raise ValueError("p-value must lie in [0, 1]")


def validation_report(fit: ModelFit, train: EventDataset,
                      validation: EventDataset) -> ValidationReport:
    """Run all held-out diagnostics and package the results."""
    std = standardized_errors(fit, train, validation)
    epc, piv = pivoted_errors(fit, train, validation)
    d_mh, p = mahalanobis_test(fit, train, validation)
    n = len(std)
    theo = np.array([std_normal_quantile((i - 0.5) / n) for i in range(1, n + 1)])
    qq = np.column_stack([theo, np.sort(epc)])
    ef = fit.event(train.event)
    return ValidationReport(standardized_errors=std, pivoted_errors=epc,
                            pivot_indices=piv, qq_pairs=qq,
                            mahalanobis=d_mh,
                            mahalanobis_raw=float(np.sum(std ** 2)),
                            mahalanobis_pvalue=p,
                            df_pair=(n, ef.K - fit.prior.q))


def variogram_csv_rows(table: VariogramTable):
    """Header and rows for the long-format variogram export."""
    header = ["variable", "bin_mid", "empirical", "model", "lo", "hi", "count"]
    rows = []
    for k in range(table.bins):
        rows.append([table.binning_variable, f"{table.bin_center[k]:.6g}",
                     f"{table.empirical[k]:.6g}", f"{table.model[k]:.6g}",
                     f"{table.lower95[k]:.6g}", f"{table.upper95[k]:.6g}",
                     str(int(table.counts[k]))])
    return header, rows
