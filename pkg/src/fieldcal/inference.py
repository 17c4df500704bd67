"""Conjugate per-event regression statistics and hyperparameter fitting.

The marginal model for one event is y = H beta + eta with
eta ~ N(0, sigma2 * A), A the nugget-augmented correlation matrix, and a
normal inverse-gamma prior on (beta, sigma2). Those integrals are
closed-form, so the hyperparameters theta are the only thing fitted
numerically; a single theta is shared across all events.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .covariance import Hyperparameters, correlation_matrix_arrays, rotate_array
from .dataio import EventDataset
from .numerics import (CholeskyFactor, NotPositiveDefinite, OptimizerOptions,
                       cholesky, nelder_mead)

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-10
NU_BOUNDS = (0.05, 30.0)
LOG_PARAM_BOUND = 30.0

FIT_MAGIC = "FIELDCALFIT v1"


class TooFewObservations(Exception):
    """An event has too few pairs to identify the regression."""


class OptimizationFailed(Exception):
    """No finite objective value was found."""


class UnknownEvent(KeyError):
    """Requested event is not part of the fit."""


class ArtifactError(Exception):
    """A fit artifact file is malformed or inconsistent."""


class FitWarning(UserWarning):
    """Soft model-adequacy complaints raised during fitting."""


@dataclass(frozen=True)
class PriorSpec:
    """Normal inverse-gamma prior and measurement-error scale.

    ``b`` and ``B`` are the prior mean and scale of the regression
    coefficients, ``a`` and ``d`` the inverse-gamma hyperparameters for
    sigma2, ``sigmaY`` the fixed measurement error SD, and
    ``basis_degree`` the polynomial degree of the mean (q = degree + 1).
    """

    b: np.ndarray
    B: np.ndarray
    a: float = 0.0
    d: float = 0.0
    sigmaY: float = 3.0
    basis_degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float))
        q = self.basis_degree + 1
        if self.b.shape != (q,):
            raise ValueError(f"prior b must have length {q}")
        if self.B.shape != (q, q):
            raise ValueError(f"prior B must be {q}x{q}")
        if self.a < 0.0 or self.d < 0.0:
            raise ValueError("a and d must be >= 0")
        if not self.sigmaY > 0.0:
            raise ValueError("sigmaY must be > 0")

    @property
    def q(self) -> int:
        return self.basis_degree + 1


def default_prior() -> PriorSpec:
    """Quadratic basis centered on the identity map y = x."""
    return PriorSpec(b=np.array([0.0, 1.0, 0.0]),
                     B=np.diag([0.1, 1.0, 1.0]),
                     a=0.0, d=0.0, sigmaY=3.0, basis_degree=2)


def basis(x: float, q: int) -> np.ndarray:
    """Polynomial regression basis (1), (1, x) or (1, x, x^2)."""
    if q not in (1, 2, 3):
        raise ValueError(f"unsupported basis size q={q}")
    return np.array([float(x) ** k for k in range(q)])


def basis_matrix(x, q: int) -> np.ndarray:
    if q not in (1, 2, 3):
        raise ValueError(f"unsupported basis size q={q}")
    x = np.asarray(x, dtype=float)
    return np.column_stack([x ** k for k in range(q)])


@dataclass(frozen=True)
class EventFit:
    """Closed-form posterior summaries for one event at fixed theta."""

    event: str
    beta_hat: np.ndarray
    sigma_hat2: float
    A_factor: CholeskyFactor
    Bstar: np.ndarray
    weights: np.ndarray           # A^{-1} (y - H beta_hat)
    K: int
    df: float                     # K + d
    # cached pieces reused by prediction and the theta objective
    dataset: EventDataset
    H: np.ndarray
    locations_rot: np.ndarray
    Ainv_H: np.ndarray
    S: float
    logdet_Bstar: float
    sigma_floored: bool

    @property
    def x(self) -> np.ndarray:
        return self.dataset.x

    @property
    def y(self) -> np.ndarray:
        return self.dataset.y


def event_statistics(dataset: EventDataset, theta: Hyperparameters,
                     prior: PriorSpec) -> EventFit:
    """Conjugate update for one event at fixed hyperparameters.

    Computes B* = (B^{-1} + H^T A^{-1} H)^{-1}, the posterior coefficient
    mean beta_hat = B* (B^{-1} b + H^T A^{-1} y), and the scale estimate
    sigma_hat2 = S / (K + d) with
    S = a + b^T B^{-1} b + y^T A^{-1} y - beta_hat^T (B*)^{-1} beta_hat,
    floored at 1e-10.
    """
    K = len(dataset)
    q = prior.q
    if K <= q:
        raise TooFewObservations(
            f"event {dataset.event}: K={K} pairs but basis has q={q} coefficients")
    y = dataset.y
    loc_t = rotate_array(dataset.locations, theta.omega)
    a_mat = correlation_matrix_arrays(theta, loc_t, dataset.x, include_nugget=True)
    a_factor = cholesky(a_mat)
    h = basis_matrix(dataset.x, q)

    ainv_y = a_factor.solve(y)
    ainv_h = a_factor.solve(h)
    b_factor = cholesky(prior.B)
    binv = b_factor.solve(np.eye(q))
    bstar_inv = binv + h.T @ ainv_h
    bstar_inv = 0.5 * (bstar_inv + bstar_inv.T)
    bstar_factor = cholesky(bstar_inv)
    beta_hat = bstar_factor.solve(binv @ prior.b + h.T @ ainv_y)
    bstar = bstar_factor.solve(np.eye(q))
    bstar = 0.5 * (bstar + bstar.T)

    s = (prior.a + float(prior.b @ binv @ prior.b) + float(y @ ainv_y)
         - float(beta_hat @ bstar_inv @ beta_hat))
    raw_sigma2 = s / (K + prior.d)
    floored = raw_sigma2 < SIGMA2_FLOOR
    sigma_hat2 = max(raw_sigma2, SIGMA2_FLOOR)
    weights = ainv_y - ainv_h @ beta_hat

    return EventFit(event=dataset.event, beta_hat=beta_hat,
                    sigma_hat2=sigma_hat2, A_factor=a_factor, Bstar=bstar,
                    weights=weights, K=K, df=K + prior.d, dataset=dataset,
                    H=h, locations_rot=loc_t, Ainv_H=ainv_h, S=s,
                    logdet_Bstar=-bstar_factor.logdet, sigma_floored=floored)


def _event_log_evidence(ef: EventFit, prior: PriorSpec) -> float:
    # log of the (beta, sigma2)-marginalized likelihood for one event,
    # up to a theta-independent constant
    return (-(ef.K + prior.d) * 0.5 * math.log(ef.sigma_hat2)
            - 0.5 * ef.A_factor.logdet + 0.5 * ef.logdet_Bstar)


def log_posterior_theta(datasets, theta: Hyperparameters,
                        prior: PriorSpec) -> float:
    """Log posterior of theta under a flat hyperprior, up to a constant.

    Sums the per-event marginalized evidences. Returns -inf when an
    event's correlation matrix fails to factorize or the scale estimate
    collapses to its floor.
    """
    total = 0.0
    for ds in datasets:
        try:
            ef = event_statistics(ds, theta, prior)
        except NotPositiveDefinite:
            return -math.inf
        if ef.sigma_floored:
            return -math.inf
        total += _event_log_evidence(ef, prior)
    return total


@dataclass(frozen=True)
class ModelFit:
    """Fitted hyperparameters with per-event conjugate summaries."""

    theta: Hyperparameters
    events: tuple
    prior: PriorSpec
    log_posterior: float

    def __post_init__(self):
        if not self.events:
            raise ValueError("ModelFit requires at least one event")

    def event(self, event_id: str) -> EventFit:
        for ef in self.events:
            if ef.event == event_id:
                return ef
        raise UnknownEvent(event_id)

    def event_ids(self):
        return [ef.event for ef in self.events]


def _wrap_angle(w: float) -> float:
    # the likelihood is pi-periodic in omega, so fold into (-pi/2, pi/2]
    r = (w + math.pi / 2) % math.pi - math.pi / 2
    if r == -math.pi / 2:
        r = math.pi / 2
    return r


def _pack(theta: Hyperparameters) -> np.ndarray:
    vals = [theta.lambda2, theta.phi1, theta.phi2, theta.nu1, theta.nu2,
            theta.phiX]
    return np.array([theta.omega] + [math.log(max(v, 1e-12)) for v in vals])


def _unpack(z: np.ndarray):
    logs = z[1:]
    if np.any(np.abs(logs) > LOG_PARAM_BOUND):
        return None
    lam2, phi1, phi2, nu1, nu2, phix = np.exp(logs)
    if not (NU_BOUNDS[0] <= nu1 <= NU_BOUNDS[1]
            and NU_BOUNDS[0] <= nu2 <= NU_BOUNDS[1]):
        return None
    return Hyperparameters(omega=_wrap_angle(float(z[0])), lambda2=float(lam2),
                           phi1=float(phi1), phi2=float(phi2),
                           nu1=float(nu1), nu2=float(nu2), phiX=float(phix))


def default_theta0(datasets) -> Hyperparameters:
    """Data-driven starting point: ranges at 20% of the spatial and
    intensity extents, middling smoothness, small nugget, no rotation."""
    loc = np.vstack([ds.locations for ds in datasets])
    x = np.concatenate([ds.x for ds in datasets])
    span = loc.max(axis=0) - loc.min(axis=0)
    diag = float(np.hypot(span[0], span[1]))
    phi0 = max(0.2 * diag, 1e-3)
    phix0 = max(0.2 * float(x.max() - x.min()), 1e-3)
    return Hyperparameters(omega=0.0, lambda2=0.1, phi1=phi0, phi2=phi0,
                           nu1=1.5, nu2=1.5, phiX=phix0)


def fit(datasets, prior: PriorSpec, opts: OptimizerOptions,
        theta0: Hyperparameters | None = None) -> ModelFit:
    """Maximize the theta posterior and assemble the fitted model.

    Positive parameters are optimized on the log scale; omega is
    optimized raw and folded into (-pi/2, pi/2]. Events whose implied
    nugget variance cannot cover the measurement-error variance are
    reported through a :class:`FitWarning`.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("fit requires at least one event dataset")
    for ds in datasets:
        if len(ds) <= prior.q:
            raise TooFewObservations(
                f"event {ds.event}: K={len(ds)} pairs but q={prior.q}")
    if theta0 is None:
        theta0 = default_theta0(datasets)

    def objective(z):
        theta = _unpack(np.asarray(z, dtype=float))
        if theta is None:
            return math.inf
        lp = log_posterior_theta(datasets, theta, prior)
        return -lp if math.isfinite(lp) else math.inf

    z0 = _pack(theta0)
    if not math.isfinite(objective(z0)):
        raise OptimizationFailed(
            "objective is not finite at the starting hyperparameters")
    z_best, f_best = nelder_mead(objective, z0, opts)
    theta_hat = _unpack(z_best)
    if theta_hat is None or not math.isfinite(f_best):
        raise OptimizationFailed("optimizer did not find a finite optimum")

    events = tuple(event_statistics(ds, theta_hat, prior) for ds in datasets)
    bad = [ef.event for ef in events
           if prior.sigmaY ** 2 > theta_hat.lambda2 * ef.sigma_hat2]
    if bad:
        warnings.warn(
            "fitted nugget cannot cover the measurement-error variance "
            f"(sigmaY^2 > lambda2*sigma_hat2) for event(s): {', '.join(bad)}",
            FitWarning, stacklevel=2)
    return ModelFit(theta=theta_hat, events=events, prior=prior,
                    log_posterior=-f_best)


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def save_fit(fit_result: ModelFit, path) -> None:
    """Serialize a ModelFit as versioned text.

    Stores theta, the prior, and each event's training pairs at full
    float precision, so reloading reproduces every statistic exactly.
    """
    p = fit_result.prior
    lines = [FIT_MAGIC]
    th = fit_result.theta
    lines.append("theta " + " ".join(_fmt(v) for v in (
        th.omega, th.lambda2, th.phi1, th.phi2, th.nu1, th.nu2, th.phiX)))
    lines.append(f"prior_q {p.q}")
    lines.append("prior_b " + " ".join(_fmt(v) for v in p.b))
    lines.append("prior_B " + " ".join(_fmt(v) for v in p.B.ravel()))
    lines.append(f"prior_a {_fmt(p.a)}")
    lines.append(f"prior_d {_fmt(p.d)}")
    lines.append(f"prior_sigmaY {_fmt(p.sigmaY)}")
    lines.append(f"log_posterior {_fmt(fit_result.log_posterior)}")
    lines.append(f"events {len(fit_result.events)}")
    for ef in fit_result.events:
        ds = ef.dataset
        lines.append(f"event {ef.K} {_fmt(ds.threshold)} {ef.event}")
        lines.append("beta " + " ".join(_fmt(v) for v in ef.beta_hat))
        lines.append(f"sigma2 {_fmt(ef.sigma_hat2)}")
        for k in range(ef.K):
            lines.append(" ".join(_fmt(v) for v in (
                ds.locations[k, 0], ds.locations[k, 1], ds.x[k], ds.y[k])))
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_fit(path) -> ModelFit:
    """Reload a fit artifact; statistics are recomputed from the stored
    pairs and verified against the stored summaries."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n")]
    it = iter([ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")])

    def take(keyword, count=None):
        try:
            parts = next(it).split()
        except StopIteration:
            raise ArtifactError(f"{path}: truncated artifact, expected {keyword}") from None
        if parts[0] != keyword:
            raise ArtifactError(f"{path}: expected {keyword!r}, got {parts[0]!r}")
        if count is not None and len(parts) != count + 1:
            raise ArtifactError(f"{path}: {keyword} needs {count} fields")
        return parts[1:]

    magic = next(it, "")
    if magic.strip() != FIT_MAGIC:
        raise ArtifactError(f"{path}: not a {FIT_MAGIC} artifact")
    try:
        tvals = [float(v) for v in take("theta", 7)]
        theta = Hyperparameters(*tvals)
        q = int(take("prior_q", 1)[0])
        b = np.array([float(v) for v in take("prior_b", q)])
        bmat = np.array([float(v) for v in take("prior_B", q * q)]).reshape(q, q)
        a = float(take("prior_a", 1)[0])
        d = float(take("prior_d", 1)[0])
        sigma_y = float(take("prior_sigmaY", 1)[0])
        stored_lp = float(take("log_posterior", 1)[0])
        n_events = int(take("events", 1)[0])
        prior = PriorSpec(b=b, B=bmat, a=a, d=d, sigmaY=sigma_y,
                          basis_degree=q - 1)
        events = []
        for _ in range(n_events):
            head = take("event")
            if len(head) < 3:
                raise ArtifactError(f"{path}: malformed event line")
            k = int(head[0])
            u = float(head[1])
            event_id = " ".join(head[2:])
            beta_stored = np.array([float(v) for v in take("beta", q)])
            sigma2_stored = float(take("sigma2", 1)[0])
            rows = np.empty((k, 4))
            for r in range(k):
                try:
                    vals = next(it).split()
                except StopIteration:
                    raise ArtifactError(f"{path}: truncated data block") from None
                if len(vals) != 4:
                    raise ArtifactError(f"{path}: bad data row in event {event_id}")
                rows[r] = [float(v) for v in vals]
            ds = EventDataset(event=event_id, locations=rows[:, :2].copy(),
                              x=rows[:, 2].copy(), y=rows[:, 3].copy(),
                              threshold=u)
            ef = event_statistics(ds, theta, prior)
            if (not np.allclose(ef.beta_hat, beta_stored, rtol=1e-6, atol=1e-9)
                    or not math.isclose(ef.sigma_hat2, sigma2_stored,
                                        rel_tol=1e-6, abs_tol=1e-12)):
                raise ArtifactError(
                    f"{path}: stored summaries disagree with recomputation "
                    f"for event {event_id}")
            events.append(ef)
        if take("end", 0) != []:
            raise ArtifactError(f"{path}: malformed end marker")
    except (ValueError, IndexError) as exc:
        raise ArtifactError(f"{path}: {exc}") from None
    lp = sum(_event_log_evidence(ef, prior) for ef in events)
    if not math.isclose(lp, stored_lp, rel_tol=1e-6, abs_tol=1e-6):
        log.debug("stored log_posterior %.6g differs from recomputed %.6g",
                  stored_lp, lp)
    return ModelFit(theta=theta, events=tuple(events), prior=prior,
                    log_posterior=lp)
