"""Hot numerical kernels: numba ``@njit`` implementations with numpy fallbacks.

Two kernel families live here because they dominate non-BLAS runtime:

* Euler-Maruyama integration of the stochastic epidemic model (per-path
  scalar loops over ~1e4 steps, embarrassingly parallel over paths);
* batched Gaussian-mixture log-densities and their parameter gradients
  (the per-iteration reward recomputation and predictor updates).

Backend selection: the environment variable ``SEQOED_NUMBA`` (default on)
picks the numba path when numba imports; ``SEQOED_NUMBA=0`` — or an absent
numba — selects the pure-numpy fallback.  Every public function also accepts
``backend="numba"|"numpy"`` for explicit control (used by the equivalence
tests and ``benchmarks/bench_kernels.py``).

Both backends share the same arithmetic expression trees.  The SDE stepper
uses only IEEE-exact operations (+, -, *, /, sqrt, min, max) on noise drawn
*outside* the kernel, so the two backends produce byte-identical paths; the
mixture kernels use ``log``/``exp``/``erf`` whose libm vs. vectorized
implementations may differ in the last ulp, so those agree to ~1e-14
relative rather than exactly.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import prob

_flag = os.environ.get("SEQOED_NUMBA", "1").strip().lower()
_WANT_NUMBA = _flag not in ("0", "false", "off", "no")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled via SEQOED_NUMBA")
    import numba as nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in tests
    nb = None
    HAS_NUMBA = False

DEFAULT_BACKEND = "numba" if HAS_NUMBA else "numpy"

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


def _resolve_backend(backend):
    if backend is None:
        backend = DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    return backend


# ---------------------------------------------------------------------------
# Epidemic SDE paths
# ---------------------------------------------------------------------------


def _sir_paths_numpy(beta, rho, s0, i0, population, dt, save_every, noise):
    n, n_steps, _ = noise.shape
    n_save = n_steps // save_every
    out = np.empty((n, n_save + 1, 2), dtype=np.float64)
    s = np.full(n, s0, dtype=np.float64)
    i = np.full(n, i0, dtype=np.float64)
    out[:, 0, 0] = s
    out[:, 0, 1] = i
    idx = 1
    for j in range(n_steps):
        inf_rate = beta * s * i / population
        rec_rate = rho * i
        sq_inf = np.sqrt(np.maximum(inf_rate * dt, 0.0))
        sq_rec = np.sqrt(np.maximum(rec_rate * dt, 0.0))
        n1 = noise[:, j, 0]
        n2 = noise[:, j, 1]
        s = s - inf_rate * dt - sq_inf * n1
        i = i + inf_rate * dt - rec_rate * dt + sq_inf * n1 - sq_rec * n2
        s = np.minimum(np.maximum(s, 0.0), population)
        i = np.minimum(np.maximum(i, 0.0), population - s)
        if (j + 1) % save_every == 0:
            out[:, idx, 0] = s
            out[:, idx, 1] = i
            idx += 1
    return out


if HAS_NUMBA:

    @nb.njit(cache=True, parallel=True)
    def _sir_paths_numba(beta, rho, s0, i0, population, dt, save_every, noise):
        n, n_steps, _ = noise.shape
        n_save = n_steps // save_every
        out = np.empty((n, n_save + 1, 2), dtype=np.float64)
        for p in nb.prange(n):
            s = s0
            i = i0
            out[p, 0, 0] = s
            out[p, 0, 1] = i
            idx = 1
            for j in range(n_steps):
                inf_rate = beta[p] * s * i / population
                rec_rate = rho[p] * i
                sq_inf = math.sqrt(max(inf_rate * dt, 0.0))
                sq_rec = math.sqrt(max(rec_rate * dt, 0.0))
                n1 = noise[p, j, 0]
                n2 = noise[p, j, 1]
                s = s - inf_rate * dt - sq_inf * n1
                i = i + inf_rate * dt - rec_rate * dt + sq_inf * n1 - sq_rec * n2
                s = min(max(s, 0.0), population)
                i = min(max(i, 0.0), population - s)
                if (j + 1) % save_every == 0:
                    out[p, idx, 0] = s
                    out[p, idx, 1] = i
                    idx += 1
        return out


def sir_paths(beta, rho, s0, i0, population, dt, save_every, noise, backend=None):
    """Integrate susceptible/infected SDE paths with shared standard-normal noise.

    Parameters
    ----------
    beta, rho : array (n,)
        Per-path contact and recovery rates (linear scale).
    s0, i0, population : float
        Initial susceptible/infected counts and total population.
    dt : float
        Integration step.
    save_every : int
        Record the state every ``save_every`` steps (plus the initial state).
    noise : array (n, n_steps, 2)
        Pre-drawn standard normals; ``n_steps`` must be a multiple of
        ``save_every``.  Pass zeros for the deterministic limit.

    Returns
    -------
    array (n, n_steps // save_every + 1, 2) of (S, I) at the saved times.
    """
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[2] != 2 or noise.shape[0] != beta.size:
        raise ValueError("noise must have shape (n, n_steps, 2) matching beta")
    if noise.shape[1] % save_every != 0:
        raise ValueError("n_steps must be a multiple of save_every")
    fn = _sir_paths_numba if _resolve_backend(backend) == "numba" else _sir_paths_numpy
    return fn(beta, rho, float(s0), float(i0), float(population), float(dt), int(save_every), noise)


# ---------------------------------------------------------------------------
# Mixture log-density kernels
# ---------------------------------------------------------------------------


def _log_ndtr_scalar_expr(x):
    # Shared branch structure; see prob.normal_log_cdf for the derivation.
    if x >= 0.0:
        return math.log1p(-0.5 * math.erfc(x / _SQRT2))
    if x > -37.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    inv2 = 1.0 / (x * x)
    series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)))
    return -0.5 * x * x - 0.5 * _LOG_2PI - math.log(-x) + math.log(series)


def _log_diff_exp_scalar_expr(la, lb):
    if lb == -math.inf:
        return la
    if lb >= la:
        return -math.inf
    return la + math.log1p(-math.exp(lb - la))


def _trunc_log_z_scalar_expr(alpha, beta):
    if alpha < 0.0 and beta > 0.0:
        return math.log(0.5 * (math.erf(beta / _SQRT2) - math.erf(alpha / _SQRT2)))
    if alpha >= 0.0:
        return _log_diff_exp_scalar_expr(_log_ndtr_scalar_expr(-alpha), _log_ndtr_scalar_expr(-beta))
    return _log_diff_exp_scalar_expr(_log_ndtr_scalar_expr(beta), _log_ndtr_scalar_expr(alpha))


def _gmm_terms_numpy(x, weights, means, stds, lower, upper):
    """Per-component log densities plus per-dimension derivative ingredients."""
    n, k, d = means.shape
    xe = x[:, None, :]
    z = (xe - means) / stds
    logpdf = -0.5 * z * z - np.log(stds) - 0.5 * _LOG_2PI
    dmu = z / stds
    dsig = (z * z - 1.0) / stds
    trunc = np.isfinite(lower) | np.isfinite(upper)
    if np.any(trunc):
        lo = np.where(np.isfinite(lower), lower, -1e308)
        hi = np.where(np.isfinite(upper), upper, 1e308)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            alpha = (lo - means) / stds
            beta = (hi - means) / stds
            log_z = prob.truncnorm_log_normalizer(alpha, beta)
            log_phi_a = -0.5 * alpha * alpha - 0.5 * _LOG_2PI
            log_phi_b = -0.5 * beta * beta - 0.5 * _LOG_2PI
            finite_z = np.isfinite(log_z)
            ra = np.where(finite_z, np.exp(np.where(finite_z, log_phi_a - log_z, 0.0)), 0.0)
            rb = np.where(finite_z, np.exp(np.where(finite_z, log_phi_b - log_z, 0.0)), 0.0)
            inside = (xe >= lo) & (xe <= hi)
            t_logpdf = np.where(inside & finite_z, logpdf - log_z, -np.inf)
            t_dmu = dmu - (ra - rb) / stds
            t_dsig = dsig - (alpha * ra - beta * rb) / stds
            logpdf = np.where(trunc, t_logpdf, logpdf)
            dmu = np.where(trunc, np.where(inside & finite_z, t_dmu, 0.0), dmu)
            dsig = np.where(trunc, np.where(inside & finite_z, t_dsig, 0.0), dsig)
    return logpdf, dmu, dsig


def _gmm_reduce_numpy(weights, comp_sum, log_floor):
    with np.errstate(divide="ignore"):
        logw = np.where(weights > 0, np.log(np.maximum(weights, 1e-300)), -np.inf)
    scores = logw + comp_sum
    m = np.max(scores, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = m[:, 0] + np.log(np.sum(np.exp(scores - m), axis=1))
    lse = np.where(np.isnan(lse), -np.inf, lse)
    if log_floor == -math.inf:
        return lse, scores
    return np.logaddexp(lse, log_floor), scores


def _gmm_logpdf_numpy(x, weights, means, stds, lower, upper, log_floor):
    logpdf, _, _ = _gmm_terms_numpy(x, weights, means, stds, lower, upper)
    logq, _ = _gmm_reduce_numpy(weights, logpdf.sum(axis=2), log_floor)
    return logq


def _gmm_grads_numpy(x, weights, means, stds, lower, upper, log_floor):
    logpdf, dmu, dsig = _gmm_terms_numpy(x, weights, means, stds, lower, upper)
    comp_sum = logpdf.sum(axis=2)
    logq, scores = _gmm_reduce_numpy(weights, comp_sum, log_floor)
    with np.errstate(invalid="ignore"):
        resp = np.exp(scores - logq[:, None])
        d_w = np.exp(comp_sum - logq[:, None])
    resp = np.where(np.isnan(resp), 0.0, resp)
    d_w = np.where(np.isnan(d_w), 0.0, d_w)
    d_mu = resp[:, :, None] * dmu
    d_sig = resp[:, :, None] * dsig
    return logq, d_w, d_mu, d_sig


if HAS_NUMBA:
    _log_ndtr_nb = nb.njit(cache=True)(_log_ndtr_scalar_expr)
    _log_diff_exp_nb = nb.njit(cache=True)(_log_diff_exp_scalar_expr)

    @nb.njit(cache=True)
    def _trunc_log_z_nb(alpha, beta):
        if alpha < 0.0 and beta > 0.0:
            return math.log(0.5 * (math.erf(beta / _SQRT2) - math.erf(alpha / _SQRT2)))
        if alpha >= 0.0:
            return _log_diff_exp_nb(_log_ndtr_nb(-alpha), _log_ndtr_nb(-beta))
        return _log_diff_exp_nb(_log_ndtr_nb(beta), _log_ndtr_nb(alpha))

    @nb.njit(cache=True)
    def _gmm_core_numba(x, weights, means, stds, lower, upper, log_floor, want_grads):
        n, k, d = means.shape
        logq = np.empty(n, dtype=np.float64)
        d_w = np.zeros((n, k), dtype=np.float64)
        d_mu = np.zeros((n, k, d), dtype=np.float64)
        d_sig = np.zeros((n, k, d), dtype=np.float64)
        comp = np.empty(k, dtype=np.float64)
        for row in range(n):
            m_best = -math.inf
            for ki in range(k):
                total = 0.0
                for di in range(d):
                    mu = means[row, ki, di]
                    sig = stds[row, ki, di]
                    xv = x[row, di]
                    z = (xv - mu) / sig
                    lp = -0.5 * z * z - math.log(sig) - 0.5 * _LOG_2PI
                    lo = lower[di]
                    hi = upper[di]
                    if lo > -math.inf or hi < math.inf:
                        lo_f = lo if lo > -math.inf else -1e308
                        hi_f = hi if hi < math.inf else 1e308
                        alpha = (lo_f - mu) / sig
                        beta = (hi_f - mu) / sig
                        log_z = _trunc_log_z_nb(alpha, beta)
                        if xv < lo_f or xv > hi_f or log_z == -math.inf:
                            lp = -math.inf
                        else:
                            lp = lp - log_z
                        if want_grads:
                            if log_z == -math.inf or lp == -math.inf:
                                d_mu[row, ki, di] = 0.0
                                d_sig[row, ki, di] = 0.0
                            else:
                                log_phi_a = -0.5 * alpha * alpha - 0.5 * _LOG_2PI
                                log_phi_b = -0.5 * beta * beta - 0.5 * _LOG_2PI
                                ra = math.exp(log_phi_a - log_z)
                                rb = math.exp(log_phi_b - log_z)
                                d_mu[row, ki, di] = z / sig - (ra - rb) / sig
                                d_sig[row, ki, di] = (z * z - 1.0) / sig - (alpha * ra - beta * rb) / sig
                    elif want_grads:
                        d_mu[row, ki, di] = z / sig
                        d_sig[row, ki, di] = (z * z - 1.0) / sig
                    total += lp
                comp[ki] = total
                w = weights[row, ki]
                lw = math.log(max(w, 1e-300)) if w > 0 else -math.inf
                score = lw + total
                if score > m_best:
                    m_best = score
            if m_best == -math.inf:
                m_best = 0.0
            acc = 0.0
            for ki in range(k):
                w = weights[row, ki]
                lw = math.log(max(w, 1e-300)) if w > 0 else -math.inf
                acc += math.exp(lw + comp[ki] - m_best)
            lse = m_best + math.log(acc) if acc > 0.0 else -math.inf
            if log_floor == -math.inf:
                lq = lse
            elif lse == -math.inf:
                lq = log_floor
            elif lse > log_floor:
                lq = lse + math.log1p(math.exp(log_floor - lse))
            else:
                lq = log_floor + math.log1p(math.exp(lse - log_floor))
            logq[row] = lq
            if want_grads:
                for ki in range(k):
                    w = weights[row, ki]
                    lw = math.log(max(w, 1e-300)) if w > 0 else -math.inf
                    if comp[ki] == -math.inf:
                        d_w[row, ki] = 0.0
                        for di in range(d):
                            d_mu[row, ki, di] = 0.0
                            d_sig[row, ki, di] = 0.0
                        continue
                    resp = math.exp(lw + comp[ki] - lq)
                    d_w[row, ki] = math.exp(comp[ki] - lq)
                    for di in range(d):
                        d_mu[row, ki, di] = resp * d_mu[row, ki, di]
                        d_sig[row, ki, di] = resp * d_sig[row, ki, di]
        return logq, d_w, d_mu, d_sig


def _prep_gmm_args(x, weights, means, stds, lower, upper):
    x = np.ascontiguousarray(x, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    stds = np.ascontiguousarray(stds, dtype=np.float64)
    n, k, d = means.shape
    if x.shape != (n, d) or weights.shape != (n, k) or stds.shape != (n, k, d):
        raise ValueError("inconsistent batch shapes for mixture kernel")
    lo = np.full(d, -np.inf) if lower is None else np.ascontiguousarray(lower, dtype=np.float64)
    hi = np.full(d, np.inf) if upper is None else np.ascontiguousarray(upper, dtype=np.float64)
    return x, weights, means, stds, lo, hi


def gmm_logpdf_batch(x, weights, means, stds, lower=None, upper=None,
                     floor=prob.DENSITY_FLOOR, backend=None):
    """Conditional-mixture log densities for a batch of rows.

    ``x`` (n, D), ``weights`` (n, K), ``means``/``stds`` (n, K, D); per-row
    mixtures.  Returns (n,).  Matches :func:`seqoed.prob.gmm_logpdf`.
    """
    x, weights, means, stds, lo, hi = _prep_gmm_args(x, weights, means, stds, lower, upper)
    log_floor = -math.inf if floor is None else math.log(floor)
    if _resolve_backend(backend) == "numba":
        logq, _, _, _ = _gmm_core_numba(x, weights, means, stds, lo, hi, log_floor, False)
        return logq
    return _gmm_logpdf_numpy(x, weights, means, stds, lo, hi, log_floor)


def gmm_logpdf_grads(x, weights, means, stds, lower=None, upper=None,
                     floor=prob.DENSITY_FLOOR, backend=None):
    """Log densities plus gradients w.r.t. weights, means, and stds.

    Returns ``(logq (n,), d_weights (n,K), d_means (n,K,D), d_stds (n,K,D))``
    where the derivatives are of ``logq`` per row.
    """
    x, weights, means, stds, lo, hi = _prep_gmm_args(x, weights, means, stds, lower, upper)
    log_floor = -math.inf if floor is None else math.log(floor)
    if _resolve_backend(backend) == "numba":
        return _gmm_core_numba(x, weights, means, stds, lo, hi, log_floor, True)
    return _gmm_grads_numpy(x, weights, means, stds, lo, hi, log_floor)
