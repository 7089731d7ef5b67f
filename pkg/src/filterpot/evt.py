"""Generalized Pareto distribution evaluation and maximum-likelihood fitting.

The fit reduces the two-parameter GPD likelihood to a one-dimensional root
search in theta = shape/scale: every sign change of the stationarity function
on its bounded admissible interval is bracketed on a dense grid, refined by
bisection, and mapped back to a (shape, scale) candidate. The exponential
candidate theta = 0 is always added, and the candidate with the highest
log-likelihood wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ParameterError

# Shapes this close to zero are evaluated on the exponential branch; the
# general formula loses all precision there to cancellation.
SHAPE_ZERO_TOL = 1e-9

# Root scan: grid density over the admissible theta interval, and the
# bisection stopping rule applied to each bracketed sign change.
GRID_POINTS = 1000
BISECT_RESIDUAL_TOL = 1e-10
BISECT_MAX_ITER = 200


@dataclass(frozen=True)
class GpdParams:
    """Zero-location GPD. scale > 0; shape < 0 puts the right endpoint at
    -scale/shape, shape >= 0 has unbounded support."""

    scale: float
    shape: float

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise ParameterError(f"scale must be a positive real, got {self.scale!r}")
        if not math.isfinite(self.shape):
            raise ParameterError(f"shape must be finite, got {self.shape!r}")

    @property
    def right_endpoint(self) -> float:
        if self.shape < -SHAPE_ZERO_TOL:
            return -self.scale / self.shape
        return math.inf


@dataclass(frozen=True)
class FitDiagnostics:
    """Bookkeeping for one fit.

    grimshaw_residual is |stationarity function| at the winning theta (0.0 by
    convention for the theta = 0 candidate); num_candidate_roots counts the
    bracketed nonzero roots that were refined and scored.
    """

    log_likelihood: float
    grimshaw_residual: float
    num_candidate_roots: int
    num_excesses: int
    degenerate: bool = False


def gpd_cdf(x: float, params: GpdParams) -> float:
    """P(X <= x) for the zero-location GPD.

    Saturates at exactly 1.0 at and beyond the right endpoint when shape < 0.
    """
    x = float(x)
    if not (x >= 0.0):
        raise ParameterError(f"gpd_cdf requires x >= 0, got {x!r}")
    if abs(params.shape) < SHAPE_ZERO_TOL:
        return -math.expm1(-x / params.scale)
    z = params.shape * x / params.scale
    if z <= -1.0:
        return 1.0
    return -math.expm1(-math.log1p(z) / params.shape)


def gpd_log_likelihood(excesses, params: GpdParams) -> float:
    """Log-likelihood of positive excesses under ``params``.

    Returns -inf (not an error) when any observation falls outside the
    distribution's support.
    """
    x = np.asarray(excesses, dtype=float)
    n = x.size
    if n == 0:
        raise InsufficientDataError("log-likelihood of an empty sample")
    if np.any(x <= 0.0) or not np.all(np.isfinite(x)):
        return -math.inf
    if abs(params.shape) < SHAPE_ZERO_TOL:
        return float(-n * math.log(params.scale) - x.sum() / params.scale)
    t = 1.0 + params.shape * x / params.scale
    if np.any(t <= 0.0):
        return -math.inf
    return float(
        -n * math.log(params.scale) - (1.0 + 1.0 / params.shape) * np.log(t).sum()
    )


def gpd_quantile(p: float, params: GpdParams) -> float:
    """Inverse CDF for p in [0, 1)."""
    p = float(p)
    if not (0.0 <= p < 1.0):
        raise ParameterError(f"quantile level must be in [0, 1), got {p!r}")
    if abs(params.shape) < SHAPE_ZERO_TOL:
        return -params.scale * math.log1p(-p)
    return (params.scale / params.shape) * (math.expm1(-params.shape * math.log1p(-p)))


def _grimshaw_value(x: np.ndarray, theta: float) -> float:
    """Stationarity function whose nonzero roots are likelihood candidates:
    mean(1/(1+theta*x)) * (1 + mean(log(1+theta*x))) - 1."""
    s = 1.0 + theta * x
    return float(np.mean(1.0 / s) * (1.0 + np.mean(np.log(s))) - 1.0)


def _grid_values(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    out = np.empty(grid.size)
    # Chunked so the (grid, n) temporaries stay around ~16 MB.
    chunk = max(1, 2_000_000 // max(x.size, 1))
    for i in range(0, grid.size, chunk):
        s = grid[i : i + chunk, None] * x[None, :] + 1.0
        out[i : i + chunk] = (1.0 / s).mean(axis=1) * (
            1.0 + np.log(s).mean(axis=1)
        ) - 1.0
    return out


def _bisect_root(x: np.ndarray, lo: float, hi: float, f_lo: float) -> float:
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            return mid
        f_mid = _grimshaw_value(x, mid)
        if abs(f_mid) < BISECT_RESIDUAL_TOL:
            return mid
        if (f_lo < 0.0) == (f_mid < 0.0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _scan_roots(x: np.ndarray) -> list[float]:
    """All bracketed roots of the stationarity function.

    theta must exceed -1/max(x) for 1 + theta*x to stay positive; the upper
    bound is Grimshaw's 2*(mean - min)/min^2. The lower endpoint is nudged
    inside the open interval by 1e-8/max(x). theta = 0 is always a root and
    is excluded here (the caller adds the exponential candidate itself), so
    the scan covers the two half-intervals on either side of a +-1e-8/max(x)
    gap around zero: uniformly on the bounded negative side, log-uniformly on
    the positive side, whose upper bound can sit many decades above the
    likelihood maximizer.
    """
    x_max = float(x.max())
    x_min = float(x.min())
    x_mean = float(x.mean())
    gap = 1e-8 / x_max
    theta_lo = (-1.0 + 1e-8) / x_max
    theta_hi = 2.0 * (x_mean - x_min) / (x_min * x_min)
    half = GRID_POINTS // 2
    segments = []
    if theta_lo < -gap:
        segments.append(np.linspace(theta_lo, -gap, half))
    if theta_hi > gap:
        segments.append(np.geomspace(gap, theta_hi, half))
    roots = []
    for grid in segments:
        values = _grid_values(x, grid)
        for i in range(grid.size - 1):
            a, b = values[i], values[i + 1]
            if a == 0.0:
                roots.append(float(grid[i]))
            elif (a < 0.0) != (b < 0.0) and b != 0.0:
                roots.append(_bisect_root(x, float(grid[i]), float(grid[i + 1]), a))
        if values[-1] == 0.0:
            roots.append(float(grid[-1]))
    return roots


def fit_gpd(excesses) -> tuple[GpdParams, FitDiagnostics]:
    """Maximum-likelihood GPD fit of positive excesses.

    An all-equal sample cannot bound the root interval; it gets the
    exponential fit (scale = the common value) with the degenerate flag set
    so callers can treat it as uninformative rather than fail.
    """
    x = np.asarray(excesses, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    if x.size < 2:
        raise InsufficientDataError(
            f"GPD fit requires at least 2 excesses, got {x.size}"
        )
    if not np.all(np.isfinite(x)) or np.any(x <= 0.0):
        raise ParameterError("excesses must be finite and strictly positive")

    x_mean = float(x.mean())
    if float(x.max()) == float(x.min()):
        params = GpdParams(scale=x_mean, shape=0.0)
        ll = gpd_log_likelihood(x, params)
        return params, FitDiagnostics(ll, 0.0, 0, int(x.size), degenerate=True)

    best_params = GpdParams(scale=x_mean, shape=0.0)
    best_ll = gpd_log_likelihood(x, best_params)
    best_residual = 0.0

    roots = _scan_roots(x)
    for theta in roots:
        if theta == 0.0:
            continue
        shape = float(np.log1p(theta * x).mean())
        if shape == 0.0:
            continue
        scale = shape / theta
        if not (math.isfinite(scale) and scale > 0.0):
            continue
        params = GpdParams(scale=scale, shape=shape)
        ll = gpd_log_likelihood(x, params)
        if ll > best_ll:
            best_params = params
            best_ll = ll
            best_residual = abs(_grimshaw_value(x, theta))

    diag = FitDiagnostics(
        log_likelihood=best_ll,
        grimshaw_residual=best_residual,
        num_candidate_roots=len(roots),
        num_excesses=int(x.size),
    )
    return best_params, diag
