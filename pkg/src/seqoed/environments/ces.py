"""Constant-elasticity-of-substitution consumer preference elicitation.

A participant with latent taste parameters compares two baskets of three
goods and reports a preference strength on (0, 1).  The utility of a basket
``x`` is ``U(x) = (sum_i x_i^rho b_i)^(1/rho)``; the response passes the
scaled utility difference through a noisy sigmoid and is clipped away from
the endpoints, making the observation density implicit (point masses at the
clip boundaries).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .. import prob
from .base import Environment, EnvironmentSpec, GroundTruth, PredictorRanges

CLIP_EPS = 2.0 ** -22


class CesEnv(Environment):
    """Single-model basket-comparison problem with four latent parameters
    ``theta = (rho, b1, b2, ln u)``; ``b3 = 1 - b1 - b2`` is implied."""

    has_explicit_likelihood = False

    def __init__(self, horizon=10, tau=0.005, basket_max=100.0,
                 log_u_mean=1.0, log_u_std=3.0):
        self.tau = float(tau)
        self.log_u_mean = float(log_u_mean)
        self.log_u_std = float(log_u_std)
        self.spec = EnvironmentSpec(
            name="ces",
            n_models=1,
            theta_dims=(4,),
            design_dim=6,
            obs_dim=1,
            horizon=int(horizon),
            design_lower=np.zeros(6),
            design_upper=np.full(6, float(basket_max)),
        )

    # -- prior ---------------------------------------------------------------

    def sample_prior(self, rng, n):
        rho = rng.uniform(0.0, 1.0, size=n)              # Beta(1,1)
        b = rng.dirichlet(np.ones(3), size=n)            # flat Dirichlet
        log_u = self.log_u_mean + self.log_u_std * rng.standard_normal(n)
        return [GroundTruth(m=0, theta=np.array([rho[i], b[i, 0], b[i, 1], log_u[i]]))
                for i in range(n)]

    def sample_theta(self, m, rng, n):
        rho = rng.uniform(0.0, 1.0, size=n)
        b = rng.dirichlet(np.ones(3), size=n)
        log_u = self.log_u_mean + self.log_u_std * rng.standard_normal(n)
        return np.column_stack([rho, b[:, 0], b[:, 1], log_u])

    def log_prior_theta(self, m, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        rho, b1, b2, log_u = theta.T
        inside = (rho >= 0) & (rho <= 1) & (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1)
        # Beta(1,1) density 1; flat Dirichlet(1,1,1) density Gamma(3) = 2 on
        # the open simplex in (b1, b2); Gaussian on ln u.
        base = math.log(2.0) + prob.gaussian_logpdf(log_u, self.log_u_mean, self.log_u_std)
        return np.where(inside, base, prob.LOG_DENSITY_FLOOR)

    # -- simulation ------------------------------------------------------------

    @staticmethod
    def _basket_utility(rho, weights, basket):
        """(sum_i x_i^rho b_i)^(1/rho) with rho in (0, 1]."""
        rho = np.maximum(rho, 1e-12)
        inner = (basket ** rho[..., None] * weights).sum(axis=-1)
        return np.maximum(inner, 1e-300) ** (1.0 / rho)

    def _response_moments(self, theta, design):
        theta = np.atleast_2d(theta)
        design = np.asarray(design, dtype=np.float64)
        rho, b1, b2, log_u = theta.T
        weights = np.stack([b1, b2, 1.0 - b1 - b2], axis=-1)
        x, x_alt = design[..., :3], design[..., 3:]
        u = np.exp(log_u)
        mean = u * (self._basket_utility(rho, weights, x)
                    - self._basket_utility(rho, weights, x_alt))
        spread = self.tau * u * (1.0 + np.linalg.norm(x - x_alt, axis=-1))
        return mean, spread

    def observe(self, truth, design, history, rng):
        mean, spread = self._response_moments(truth.theta[None, :], design)
        eta = mean[0] + spread[0] * rng.standard_normal()
        return np.array([np.clip(expit(eta), CLIP_EPS, 1.0 - CLIP_EPS)])

    def observe_batch(self, truths, designs, stage, rng):
        theta = np.stack([t.theta for t in truths])
        mean, spread = self._response_moments(theta, designs)
        eta = mean + spread * rng.standard_normal(len(truths))
        return np.clip(expit(eta), CLIP_EPS, 1.0 - CLIP_EPS)[:, None]

    # -- predictor ranges ---------------------------------------------------------

    def param_ranges(self, m):
        return PredictorRanges(
            mean_low=np.array([-1.0, -1.0, -1.0, -17.0]),
            mean_high=np.array([2.0, 2.0, 2.0, 19.0]),
            std_low=np.full(4, 1e-5),
            std_high=np.full(4, 3.0),
            lower=np.array([0.0, 0.0, 0.0, -np.inf]),
            upper=np.array([1.0, 1.0, 1.0, np.inf]),
        )
