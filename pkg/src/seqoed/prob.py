"""Log-space probability primitives: Gaussians, truncated Gaussians, mixtures.

Conventions used across the package:

* everything is float64;
* densities are handled in log space, and mixture densities receive a small
  *density-space* floor added outside the component sum, so that far-tail
  evaluations return a large negative number (``ln(floor)``) instead of
  ``-inf`` — downstream reward arithmetic stays finite;
* the normal CDF is computed through the (complementary) error function,
  with a log-space asymptotic series once ``erfc`` underflows, so truncated
  densities stay meaningful even for pathological (mean far outside the
  support) components;
* truncated sampling inverts the CDF analytically and falls back to bisection
  on the log-CDF whenever the analytic inverse loses precision in a tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)

#: Density floor used by mixture/flow predictors; ln(1e-27).
DENSITY_FLOOR = 1e-27
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian parameters (arrays broadcast against each other)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")


@dataclass(frozen=True)
class TruncatedGaussianParams:
    """Diagonal Gaussian restricted to the box [lower, upper]."""

    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("mean", "std", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower must be strictly below upper")


class DiscreteDist:
    """Finite distribution over ``{0, ..., K-1}`` with validated probabilities."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1:
            raise ValueError("probs must be a vector")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        total = probs.sum()
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"probabilities sum to {total}, not 1")
        self.probs = probs / total

    def __len__(self):
        return self.probs.size

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(self.probs.size, size=size, p=self.probs)

    def log_prob(self, idx):
        p = self.probs[np.asarray(idx)]
        with np.errstate(divide="ignore"):
            return np.log(p)


# ---------------------------------------------------------------------------
# Normal CDF machinery
# ---------------------------------------------------------------------------


def normal_cdf(x):
    """Standard normal CDF via the complementary error function."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * sp.erfc(-x / _SQRT2)


def normal_quantile(p):
    """Inverse standard normal CDF."""
    return sp.ndtri(p)


def normal_log_cdf(x):
    """ln Phi(x), stable over the whole real line.

    For ``x > -37`` the direct ``ln(erfc(-x/sqrt(2))/2)`` is exact to double
    precision; below that ``erfc`` underflows and an asymptotic tail series
    ``ln phi(x) - ln|x| + ln(1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8)`` takes over
    (relative error < 1e-14 at the handover point).
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    if np.any(pos):
        out[pos] = np.log1p(-0.5 * sp.erfc(x[pos] / _SQRT2))
    direct = (x > -37.0) & ~pos
    if np.any(direct):
        with np.errstate(divide="ignore"):
            out[direct] = np.log(0.5 * sp.erfc(-x[direct] / _SQRT2))
    tail = x <= -37.0
    if np.any(tail):
        t = x[tail]
        inv2 = 1.0 / (t * t)
        series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)))
        out[tail] = -0.5 * t * t - 0.5 * _LOG_2PI - np.log(-t) + np.log(series)
    return out


def log_diff_exp(log_a, log_b):
    """ln(exp(log_a) - exp(log_b)) for log_a >= log_b, elementwise, stable."""
    log_a = np.asarray(log_a, dtype=np.float64)
    log_b = np.asarray(log_b, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        diff = log_b - log_a
        # -inf inputs for log_b mean "subtract zero".
        diff = np.where(np.isneginf(log_b), -np.inf, diff)
        out = log_a + np.log1p(-np.exp(diff))
        out = np.where(diff >= 0.0, -np.inf, out)
        out = np.where(np.isneginf(log_a), -np.inf, out)
    return out


def truncnorm_log_normalizer(alpha, beta):
    """ln( Phi(beta) - Phi(alpha) ) for standardized bounds ``alpha < beta``.

    Branches keep full precision everywhere:

    * support straddling zero: ``erf`` terms have opposite signs, no
      cancellation, evaluate in linear space;
    * both bounds on one side: reflect into the lower tail and subtract in
      log space via :func:`log_diff_exp` of :func:`normal_log_cdf` values.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    alpha, beta = np.broadcast_arrays(alpha, beta)
    out = np.empty(alpha.shape, dtype=np.float64)

    straddle = (alpha < 0.0) & (beta > 0.0)
    if np.any(straddle):
        a, b = alpha[straddle], beta[straddle]
        z = 0.5 * (sp.erf(b / _SQRT2) - sp.erf(a / _SQRT2))
        out[straddle] = np.log(z)
    upper_tail = alpha >= 0.0
    if np.any(upper_tail):
        a, b = alpha[upper_tail], beta[upper_tail]
        out[upper_tail] = log_diff_exp(normal_log_cdf(-a), normal_log_cdf(-b))
    lower_tail = beta <= 0.0
    if np.any(lower_tail):
        a, b = alpha[lower_tail], beta[lower_tail]
        out[lower_tail] = log_diff_exp(normal_log_cdf(b), normal_log_cdf(a))
    return out


# ---------------------------------------------------------------------------
# Log densities
# ---------------------------------------------------------------------------


def gaussian_logpdf(x, mean, std):
    """Elementwise ln N(x; mean, std^2); inputs broadcast."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    z = (x - mean) / std
    return -0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI


def truncnorm_logpdf(x, mean, std, lower, upper, floor=LOG_DENSITY_FLOOR):
    """Elementwise log density of a Gaussian truncated to ``[lower, upper]``.

    Outside the support the configured log-space ``floor`` is returned
    (pass ``floor=-np.inf`` for the strict density).
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    alpha = (lower - mean) / std
    beta = (upper - mean) / std
    log_z = truncnorm_log_normalizer(alpha, beta)
    core = gaussian_logpdf(x, mean, std) - log_z
    inside = (x >= lower) & (x <= upper)
    out = np.where(inside, core, floor)
    # Degenerate normalizer (support carries no double-precision mass):
    # the density is a boundary spike; report the floor rather than +/-inf.
    out = np.where(np.isneginf(log_z) & inside, floor, out)
    return out


def _per_dim_logpdf(x, means, stds, lower=None, upper=None):
    """Per-dimension component log densities with optional box truncation.

    ``x`` has shape (..., D); ``means``/``stds`` have shape (..., K, D);
    result has shape (..., K, D).  ``lower``/``upper`` are per-dimension
    bounds (length D) with non-finite entries meaning "untruncated".
    """
    x = np.asarray(x, dtype=np.float64)
    xe = x[..., None, :]
    if lower is None and upper is None:
        return gaussian_logpdf(xe, means, stds)
    lo = np.full(x.shape[-1], -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    hi = np.full(x.shape[-1], np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    trunc = np.isfinite(lo) | np.isfinite(hi)
    if not np.any(trunc):
        return gaussian_logpdf(xe, means, stds)
    lo_f = np.where(np.isfinite(lo), lo, -1e308)
    hi_f = np.where(np.isfinite(hi), hi, 1e308)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.where(
            trunc,
            truncnorm_logpdf(xe, means, stds, lo_f, hi_f, floor=-np.inf),
            gaussian_logpdf(xe, means, stds),
        )
    return out


def gmm_logpdf(x, weights, means, stds, lower=None, upper=None, floor=DENSITY_FLOOR):
    """Log density of a diagonal Gaussian mixture with a density-space floor.

    Parameters
    ----------
    x : array (..., D)
    weights : array (..., K)
        Nonnegative mixture weights summing to one over the last axis.
    means, stds : array (..., K, D)
    lower, upper : optional per-dimension bounds (length D)
        Finite entries truncate every component in that dimension.
    floor : float or None
        Density-space floor added *outside* the component sum:
        ``ln( sum_i w_i N_i(x) + floor )``.  ``None`` disables it.

    Returns
    -------
    array (...,) of log densities.
    """
    weights = np.asarray(weights, dtype=np.float64)
    comp = _per_dim_logpdf(x, np.asarray(means, np.float64), np.asarray(stds, np.float64), lower, upper)
    comp = comp.sum(axis=-1)  # (..., K)
    with np.errstate(divide="ignore"):
        logw = np.where(weights > 0, np.log(np.maximum(weights, 1e-300)), -np.inf)
    scores = logw + comp
    m = np.max(scores, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.squeeze(m, -1) + np.log(np.sum(np.exp(scores - m), axis=-1))
    lse = np.where(np.isnan(lse), -np.inf, lse)
    if floor is None:
        return lse
    return np.logaddexp(lse, math.log(floor))


def truncnorm_sample(mean, std, lower, upper, rng: np.random.Generator, size=None):
    """Draw from a truncated Gaussian by inverse CDF, with bisection fallback.

    The analytic inverse ``mean + std * ndtri(Phi(alpha) + u Z)`` is exact
    away from the tails; samples that land outside the support or go
    non-finite (possible when the support carries < ~1e-15 CDF mass) are
    recomputed by bisecting the log-CDF, which is stable arbitrarily far out.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if size is None:
        size = np.broadcast_shapes(mean.shape, std.shape, lower.shape, upper.shape)
    mean, std, lower, upper = (np.broadcast_to(a, size) for a in (mean, std, lower, upper))
    u = rng.uniform(size=size)

    alpha = (lower - mean) / std
    beta = (upper - mean) / std
    cdf_a = normal_cdf(alpha)
    cdf_b = normal_cdf(beta)
    with np.errstate(invalid="ignore"):
        x = mean + std * sp.ndtri(cdf_a + u * (cdf_b - cdf_a))
    bad = ~np.isfinite(x) | (x < lower) | (x > upper)
    if np.any(bad):
        x = np.array(x, copy=True)
        x[bad] = _bisect_truncnorm(
            alpha[bad], beta[bad], u[bad]
        ) * std[bad] + mean[bad]
        x[bad] = np.clip(x[bad], lower[bad], upper[bad])
    return x


def _bisect_truncnorm(alpha, beta, u):
    """Solve Phi(t) = Phi(alpha) + u (Phi(beta) - Phi(alpha)) on [alpha, beta]."""
    log_z = truncnorm_log_normalizer(alpha, beta)
    degenerate = np.isneginf(log_z)
    with np.errstate(divide="ignore"):
        log_target = np.logaddexp(normal_log_cdf(alpha), np.log(np.maximum(u, 1e-300)) + log_z)
    lo = np.array(alpha, copy=True)
    hi = np.array(beta, copy=True)
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        go_right = normal_log_cdf(mid) < log_target
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    out = 0.5 * (lo + hi)
    # Zero usable mass: park at the boundary nearest the mode.
    out = np.where(degenerate, np.where(alpha > 0, alpha, beta), out)
    return out


def gmm_sample(weights, means, stds, rng: np.random.Generator, n=None, lower=None, upper=None):
    """Draw samples from a (possibly box-truncated) diagonal Gaussian mixture.

    ``weights`` (K,), ``means``/``stds`` (K, D) define one mixture; returns
    shape (n, D) (or (D,) when ``n`` is None).  For conditional batches call
    per row.
    """
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    squeeze = n is None
    n_draw = 1 if squeeze else int(n)
    comp = rng.choice(weights.size, size=n_draw, p=weights / weights.sum())
    mu = means[comp]
    sig = stds[comp]
    d = means.shape[-1]
    lo = np.full(d, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    hi = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    trunc = np.isfinite(lo) | np.isfinite(hi)
    out = np.empty((n_draw, d))
    plain = ~trunc
    if np.any(plain):
        out[:, plain] = mu[:, plain] + sig[:, plain] * rng.standard_normal((n_draw, int(plain.sum())))
    if np.any(trunc):
        idx = np.where(trunc)[0]
        out[:, idx] = truncnorm_sample(
            mu[:, idx], sig[:, idx],
            np.broadcast_to(np.where(np.isfinite(lo[idx]), lo[idx], -1e308), (n_draw, idx.size)),
            np.broadcast_to(np.where(np.isfinite(hi[idx]), hi[idx], 1e308), (n_draw, idx.size)),
            rng,
            size=(n_draw, idx.size),
        )
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Discrete helpers
# ---------------------------------------------------------------------------


def kl_discrete(p, q):
    """KL(p || q) for probability vectors; errors on support violations.

    Zero-probability entries of ``p`` contribute zero regardless of ``q``;
    an entry with ``p > 0`` and ``q == 0`` violates absolute continuity and
    raises ``ValueError``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("p and q must have matching shapes")
    active = p > 0
    if np.any(q[active] <= 0):
        raise ValueError("KL undefined: q assigns zero mass where p is positive")
    out = np.zeros_like(p)
    out[active] = p[active] * (np.log(p[active]) - np.log(q[active]))
    return float(out.sum())


def logmeanexp(values, axis=None):
    """ln( mean( exp(values) ) ), stable."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size if axis is None else values.shape[axis]
    return sp.logsumexp(values, axis=axis) - math.log(n)
