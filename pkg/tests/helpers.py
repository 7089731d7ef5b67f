"""Independent oracles shared by the test modules.

These deliberately avoid the code paths they check: GPD fits are compared
against a brute-force likelihood grid, the normal survival function against
numerical quadrature, sampling uses the textbook inverse-CDF formula, and
quantiles are recomputed from sorted order statistics.
"""

import math

import numpy as np
from scipy.integrate import quad

from filterpot.evt import GpdParams, gpd_log_likelihood

GRID_SHAPES = np.linspace(-0.5, 1.0, 200)
GRID_SCALES = np.linspace(0.1, 3.0, 200)


def grid_search_gpd_mle(x, shapes=GRID_SHAPES, scales=GRID_SCALES):
    """Brute-force max log-likelihood over a (shape, scale) grid.

    Returns (best_ll, best_shape, best_scale). Uses the closed-form GPD
    log-likelihood directly, not the fitting code.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    best = (-np.inf, None, None)
    for shape in shapes:
        if abs(shape) < 1e-12:
            lls = -n * np.log(scales) - x.sum() / scales
        else:
            t = 1.0 + shape * x[None, :] / scales[:, None]
            with np.errstate(invalid="ignore", divide="ignore"):
                logs = np.where(t > 0.0, np.log(np.maximum(t, 1e-300)), np.nan)
            lls = -n * np.log(scales) - (1.0 + 1.0 / shape) * logs.sum(axis=1)
            lls = np.where(np.isnan(lls), -np.inf, lls)
        i = int(np.argmax(lls))
        if lls[i] > best[0]:
            best = (float(lls[i]), float(shape), float(scales[i]))
    return best


def sample_gpd(rng, n, scale, shape):
    """Inverse-CDF sampling with the textbook quantile formula."""
    u = rng.uniform(size=n)
    if shape == 0.0:
        return -scale * np.log1p(-u)
    return (scale / shape) * ((1.0 - u) ** (-shape) - 1.0)


def normal_sf_quadrature(z, upper=40.0):
    """P(Z > z) by adaptive quadrature of the normal density."""
    density = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    value, _ = quad(density, z, upper, limit=200)
    return value


def quantile_linear_oracle(values, q):
    """Linear interpolation between closest order statistics, from scratch."""
    xs = sorted(float(v) for v in values)
    pos = (len(xs) - 1) * q
    lo = math.floor(pos)
    hi = math.ceil(pos)
    if lo == hi:
        return xs[lo]
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def loglik_at(x, scale, shape):
    return gpd_log_likelihood(x, GpdParams(scale=scale, shape=shape))
