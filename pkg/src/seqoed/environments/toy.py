"""Finite tabular design problems, exactly enumerable.

Everything is an atom: candidate models, per-model parameter values,
designs, observations, and (optionally) a per-model deterministic predictive
quantity.  These problems exist so that posteriors, expected utilities, and
estimator identities can be computed exactly by enumeration and compared
against the production code paths.

Continuous design vectors are accepted and snapped to the nearest design
atom, which lets the full actor-critic stack run unchanged on a finite
problem.
"""

from __future__ import annotations

import numpy as np

from .base import Environment, EnvironmentSpec, GroundTruth, PredictorRanges


class DiscreteToyEnv(Environment):
    """Tabular problem.

    Parameters
    ----------
    model_prior : (M,) probabilities.
    theta_priors : list of (T_m,) probabilities per model.
    theta_values : list of (T_m,) distinct parameter values per model.
    like_tables : list of (T_m, D, Y) arrays; ``like_tables[m][t, d]`` is the
        observation distribution over the Y observation atoms.
    design_values : (D,) distinct design atom positions.
    obs_values : (Y,) distinct observation atom values.
    horizon : episode length (small; everything is enumerated over Y^horizon).
    qoi_values : optional list of (T_m,) per-model predictive values.
    """

    has_explicit_likelihood = True

    def __init__(self, model_prior, theta_priors, theta_values, like_tables,
                 design_values, obs_values, horizon=2, qoi_values=None):
        self.model_prior = np.asarray(model_prior, dtype=np.float64)
        self.theta_priors = [np.asarray(p, dtype=np.float64) for p in theta_priors]
        self.theta_values = [np.asarray(v, dtype=np.float64) for v in theta_values]
        self.like_tables = [np.asarray(t, dtype=np.float64) for t in like_tables]
        self.design_values = np.asarray(design_values, dtype=np.float64)
        self.obs_values = np.asarray(obs_values, dtype=np.float64)
        self.qoi_values = None if qoi_values is None else \
            [np.asarray(z, dtype=np.float64) for z in qoi_values]

        m_count = self.model_prior.size
        if not np.isclose(self.model_prior.sum(), 1.0, atol=1e-12):
            raise ValueError("model prior must sum to 1")
        for m in range(m_count):
            if not np.isclose(self.theta_priors[m].sum(), 1.0, atol=1e-12):
                raise ValueError("theta prior must sum to 1")
            t_m, d_count, y_count = self.like_tables[m].shape
            if t_m != self.theta_priors[m].size or d_count != self.design_values.size \
                    or y_count != self.obs_values.size:
                raise ValueError("likelihood table shape mismatch")
            if not np.allclose(self.like_tables[m].sum(axis=2), 1.0, atol=1e-12):
                raise ValueError("likelihood rows must sum to 1")
            if len(np.unique(self.theta_values[m])) != t_m:
                raise ValueError("theta values must be distinct per model")

        pad = max(1.0, 0.25 * np.ptp(self.design_values))
        self.spec = EnvironmentSpec(
            name="discrete-toy",
            n_models=m_count,
            theta_dims=tuple(1 for _ in range(m_count)),
            design_dim=1,
            obs_dim=1,
            horizon=int(horizon),
            design_lower=np.array([self.design_values.min() - pad]),
            design_upper=np.array([self.design_values.max() + pad]),
            qoi_dims=None if self.qoi_values is None else tuple(1 for _ in range(m_count)),
        )

    # -- atom lookups ----------------------------------------------------------

    def design_index(self, design) -> int:
        return int(np.argmin(np.abs(self.design_values - np.asarray(design).reshape(-1)[0])))

    def obs_index(self, obs) -> int:
        return int(np.argmin(np.abs(self.obs_values - np.asarray(obs).reshape(-1)[0])))

    def theta_index(self, m, theta) -> int:
        val = np.asarray(theta).reshape(-1)[0]
        idx = int(np.argmin(np.abs(self.theta_values[m] - val)))
        if not np.isclose(self.theta_values[m][idx], val, atol=1e-9):
            raise ValueError(f"{val} is not a parameter atom of model {m}")
        return idx

    # -- environment interface ---------------------------------------------------

    def sample_prior(self, rng, n):
        truths = []
        ms = rng.choice(self.model_prior.size, size=n, p=self.model_prior)
        for m in ms:
            t = rng.choice(self.theta_priors[m].size, p=self.theta_priors[m])
            truth = GroundTruth(m=int(m), theta=np.array([self.theta_values[m][t]]),
                                extra={"theta_index": int(t)})
            if self.qoi_values is not None:
                truth.qoi = np.array([self.qoi_values[m][t]])
            truths.append(truth)
        return truths

    def sample_theta(self, m, rng, n):
        idx = rng.choice(self.theta_priors[m].size, size=n, p=self.theta_priors[m])
        return self.theta_values[m][idx][:, None]

    def log_prior_model(self, m):
        return np.log(self.model_prior[np.asarray(m)])

    def log_prior_theta(self, m, theta):
        theta = np.atleast_2d(theta)
        idx = [self.theta_index(m, row) for row in theta]
        return np.log(self.theta_priors[m][idx])

    def log_prior_qoi(self, m, z):
        if self.qoi_values is None:
            return None
        z = np.atleast_2d(z)
        out = np.empty(z.shape[0])
        for i, row in enumerate(z):
            mass = self.theta_priors[m][np.isclose(self.qoi_values[m], row[0], atol=1e-9)].sum()
            out[i] = np.log(mass) if mass > 0 else -np.inf
        return out

    def observe(self, truth, design, history, rng):
        d_idx = self.design_index(design)
        t_idx = truth.extra["theta_index"]
        y_idx = rng.choice(self.obs_values.size, p=self.like_tables[truth.m][t_idx, d_idx])
        return np.array([self.obs_values[y_idx]])

    def predict_qoi(self, truth):
        if self.qoi_values is None:
            return None
        return np.array([self.qoi_values[truth.m][truth.extra["theta_index"]]])

    def log_likelihood(self, m, theta, designs, observations):
        theta = np.atleast_2d(theta)
        d_idx = [self.design_index(d) for d in np.atleast_2d(designs)]
        y_idx = [self.obs_index(y) for y in np.atleast_2d(observations)]
        out = np.zeros(theta.shape[0])
        for i, row in enumerate(theta):
            t = self.theta_index(m, row)
            out[i] = sum(np.log(self.like_tables[m][t, d, y]) for d, y in zip(d_idx, y_idx))
        return out

    # -- predictor ranges ----------------------------------------------------------

    def _ranges(self, values_per_model):
        all_vals = np.concatenate(values_per_model)
        lo, hi = all_vals.min(), all_vals.max()
        span = max(hi - lo, 1.0)
        return PredictorRanges(
            mean_low=np.array([lo - 0.5 * span]),
            mean_high=np.array([hi + 0.5 * span]),
            std_low=np.array([1e-3]),
            std_high=np.array([2.0 * span]),
        )

    def param_ranges(self, m):
        return self._ranges(self.theta_values)

    def qoi_ranges(self, m):
        return self._ranges(self.qoi_values)


def make_discrete_toy(rng, n_models=2, n_theta=3, n_obs=3, n_designs=2,
                      horizon=2, with_qoi=True, concentration=2.0):
    """Random small tabular problem with strictly positive tables.

    Probabilities are Dirichlet draws floored away from zero so every
    posterior stays absolutely continuous w.r.t. its prior.
    """
    def positive_probs(size):
        p = rng.dirichlet(np.full(size, concentration))
        p = np.maximum(p, 0.05)
        return p / p.sum()

    model_prior = positive_probs(n_models)
    theta_priors, theta_values, like_tables, qoi_values = [], [], [], []
    for m in range(n_models):
        t_m = int(rng.integers(2, n_theta + 1))
        theta_priors.append(positive_probs(t_m))
        theta_values.append(np.sort(rng.choice(np.arange(-10, 11), size=t_m, replace=False)
                                    .astype(np.float64)))
        like_tables.append(np.stack([
            np.stack([positive_probs(n_obs) for _ in range(n_designs)])
            for _ in range(t_m)
        ]))
        # injective per-model predictive map
        qoi_values.append(np.sort(rng.choice(np.arange(20, 60), size=t_m, replace=False)
                                  .astype(np.float64)))
    return DiscreteToyEnv(
        model_prior, theta_priors, theta_values, like_tables,
        design_values=np.arange(n_designs, dtype=np.float64),
        obs_values=np.arange(n_obs, dtype=np.float64),
        horizon=horizon,
        qoi_values=qoi_values if with_qoi else None,
    )
