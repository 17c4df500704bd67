"""Coordinate rotation and the composite correlation model.

Correlation between two data records is zero across events. Within an
event it is the product of a per-axis Matern kernel in rotated
coordinates and a Gaussian kernel in simulated intensity, plus a nugget
that attaches only to a record's correlation with itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import kv

# Two locations closer than this (per coordinate) count as coincident for
# the nugget branch.
COINCIDENCE_TOL = 1e-9


@dataclass(frozen=True)
class Hyperparameters:
    """Correlation hyperparameters shared by all events.

    Parameters
    ----------
    omega : float
        Rotation angle in radians, in (-pi/2, pi/2].
    lambda2 : float
        Nugget variance ratio, >= 0 (dimensionless).
    phi1, phi2 : float
        Spatial ranges along the rotated axes, > 0.
    nu1, nu2 : float
        Matern smoothness along the rotated axes, > 0.
    phiX : float
        Intensity range in m/s, > 0.
    """

    omega: float
    lambda2: float
    phi1: float
    phi2: float
    nu1: float
    nu2: float
    phiX: float

    def __post_init__(self):
        if not -math.pi / 2 < self.omega <= math.pi / 2:
            raise ValueError("omega must lie in (-pi/2, pi/2]")
        if self.lambda2 < 0.0:
            raise ValueError("lambda2 must be >= 0")
        for name in ("phi1", "phi2", "nu1", "nu2", "phiX"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")

    def as_dict(self):
        return {
            "omega": self.omega, "lambda2": self.lambda2,
            "phi1": self.phi1, "phi2": self.phi2,
            "nu1": self.nu1, "nu2": self.nu2, "phiX": self.phiX,
        }


@dataclass(frozen=True)
class SpacePoint:
    """A location in transformed (rotated) coordinates."""

    s1: float
    s2: float

    def __post_init__(self):
        if not (math.isfinite(self.s1) and math.isfinite(self.s2)):
            raise ValueError("coordinates must be finite")


@dataclass(frozen=True)
class KernelPoint:
    """One data record as seen by the correlation function."""

    event: str
    location: SpacePoint
    intensity: float

    def __post_init__(self):
        if not math.isfinite(self.intensity):
            raise ValueError("intensity must be finite")


def rotate_coords(s_star, omega: float) -> SpacePoint:
    """Rotate a raw grid coordinate pair by ``omega``: s = T s*."""
    c, s = math.cos(omega), math.sin(omega)
    a, b = float(s_star[0]), float(s_star[1])
    return SpacePoint(s1=c * a - s * b, s2=s * a + c * b)


def rotate_array(loc, omega: float) -> np.ndarray:
    """Rotate an (n, 2) coordinate array by ``omega``."""
    loc = np.asarray(loc, dtype=float)
    c, s = math.cos(omega), math.sin(omega)
    t = np.array([[c, -s], [s, c]])
    return loc @ t.T


def _matern_values(h, phi: float, nu: float):
    """Matern correlation on an array of nonnegative lags."""
    h = np.asarray(h, dtype=float)
    z = (math.sqrt(2.0 * nu) / phi) * h
    coef = 2.0 ** (1.0 - nu) / math.gamma(nu)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore",
                     under="ignore"):
        out = coef * z ** nu * kv(nu, z)
    out = np.asarray(out, dtype=float)
    # kv overflows for tiny z at large nu (true value ~1) and the product
    # degenerates to 0*inf far in the tail (true value ~0).
    bad = ~np.isfinite(out)
    if np.any(bad):
        out[bad & (z < 1.0)] = 1.0
        out[bad & (z >= 1.0)] = 0.0
    out[z == 0.0] = 1.0
    return np.clip(out, 0.0, 1.0)


def matern_1d(h, phi: float, nu: float):
    """Matern correlation at lag ``h`` with range ``phi``, smoothness ``nu``.

    Uses the sqrt(2 nu) h / phi argument convention, so nu = 0.5 gives
    exp(-h/phi). The zero-lag value is exactly 1.
    """
    if not phi > 0.0:
        raise ValueError("matern_1d: phi must be > 0")
    if not nu > 0.0:
        raise ValueError("matern_1d: nu must be > 0")
    if np.isscalar(h):
        if h < 0.0:
            raise ValueError("matern_1d: h must be >= 0")
        return float(_matern_values(np.array([h]), phi, nu)[0])
    return _matern_values(h, phi, nu)


def intensity_kernel(x, x_prime, phiX: float):
    """Gaussian correlation in simulated intensity: exp{-((x-x')/phiX)^2}."""
    if not phiX > 0.0:
        raise ValueError("intensity_kernel: phiX must be > 0")
    d = (np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float)) / phiX
    out = np.exp(-d * d)
    if np.isscalar(x) and np.isscalar(x_prime):
        return float(out)
    return out


def same_record(p: KernelPoint, q: KernelPoint) -> bool:
    """Whether two kernel points describe the same data record.

    Coincident means same event, locations within 1e-9 per coordinate,
    and identical intensity. Distinct stations that merely share
    coordinates are not the same record and get smooth correlation 1
    without the nugget.
    """
    return (p.event == q.event
            and abs(p.location.s1 - q.location.s1) <= COINCIDENCE_TOL
            and abs(p.location.s2 - q.location.s2) <= COINCIDENCE_TOL
            and p.intensity == q.intensity)


def composite_correlation(p: KernelPoint, q: KernelPoint,
                          theta: Hyperparameters) -> float:
    """Composite correlation between two records (locations pre-rotated)."""
    if p.event != q.event:
        return 0.0
    if same_record(p, q):
        return 1.0 + theta.lambda2
    h1 = abs(p.location.s1 - q.location.s1)
    h2 = abs(p.location.s2 - q.location.s2)
    return (matern_1d(h1, theta.phi1, theta.nu1)
            * matern_1d(h2, theta.phi2, theta.nu2)
            * intensity_kernel(p.intensity, q.intensity, theta.phiX))


def correlation_matrix_arrays(theta: Hyperparameters, loc, x,
                              include_nugget: bool) -> np.ndarray:
    """Within-event correlation matrix from coordinate and intensity arrays.

    ``loc`` is (n, 2) in rotated coordinates, ``x`` the simulated
    intensities. Rows are distinct records: the nugget goes on the
    diagonal only.
    """
    loc = np.asarray(loc, dtype=float)
    x = np.asarray(x, dtype=float)
    n = loc.shape[0]
    diag = 1.0 + theta.lambda2 if include_nugget else 1.0
    if n == 1:
        return np.array([[diag]])
    h1 = pdist(loc[:, :1], "cityblock")
    h2 = pdist(loc[:, 1:], "cityblock")
    dx = pdist(x[:, None], "cityblock")
    v = (_matern_values(h1, theta.phi1, theta.nu1)
         * _matern_values(h2, theta.phi2, theta.nu2)
         * np.exp(-(dx / theta.phiX) ** 2))
    m = squareform(v)
    np.fill_diagonal(m, diag)
    return m


def correlation_block(theta: Hyperparameters, loc_a, x_a, loc_b, x_b) -> np.ndarray:
    """Smooth (nugget-free) cross-correlation matrix between two point sets.

    Both coordinate sets must already be rotated and belong to the same
    event; shape (len(a), len(b)).
    """
    loc_a = np.atleast_2d(np.asarray(loc_a, dtype=float))
    loc_b = np.atleast_2d(np.asarray(loc_b, dtype=float))
    x_a = np.atleast_1d(np.asarray(x_a, dtype=float))
    x_b = np.atleast_1d(np.asarray(x_b, dtype=float))
    h1 = cdist(loc_a[:, :1], loc_b[:, :1], "cityblock")
    h2 = cdist(loc_a[:, 1:], loc_b[:, 1:], "cityblock")
    dx = cdist(x_a[:, None], x_b[:, None], "cityblock")
    return (_matern_values(h1, theta.phi1, theta.nu1)
            * _matern_values(h2, theta.phi2, theta.nu2)
            * np.exp(-(dx / theta.phiX) ** 2))


def _split_points(points: Sequence[KernelPoint]):
    events = [p.event for p in points]
    loc = np.array([[p.location.s1, p.location.s2] for p in points])
    x = np.array([p.intensity for p in points])
    return events, loc, x


def correlation_matrix(points: Sequence[KernelPoint], theta: Hyperparameters,
                       include_nugget: bool) -> np.ndarray:
    """Correlation matrix over a sequence of records.

    With the nugget the diagonal is 1 + lambda2, without it 1;
    off-diagonal entries are the smooth composite correlation either way.
    Entries between records of different events are exactly zero.
    """
    events, loc, x = _split_points(points)
    n = len(points)
    m = np.zeros((n, n))
    idx = np.arange(n)
    for ev in dict.fromkeys(events):
        sel = idx[np.array([e == ev for e in events])]
        m[np.ix_(sel, sel)] = correlation_matrix_arrays(
            theta, loc[sel], x[sel], include_nugget)
    return m


def cross_correlation_vector(target: KernelPoint,
                             points: Sequence[KernelPoint],
                             theta: Hyperparameters) -> np.ndarray:
    """Smooth correlations between a target record and a sequence of records.

    Never includes the nugget, even where the target coincides with a
    data record; this is the prediction weight vector.
    """
    events, loc, x = _split_points(points)
    tloc = np.array([[target.location.s1, target.location.s2]])
    tx = np.array([target.intensity])
    v = correlation_block(theta, tloc, tx, loc, x)[0]
    mask = np.array([e == target.event for e in events], dtype=float)
    return v * mask
