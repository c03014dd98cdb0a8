"""Contaminant source location with intensity measurements.

Unknown point sources sit in the plane with standard-normal priors on their
coordinates; a sensor placed at ``d`` reads a noisy superposition of
inverse-square signals

    mu(theta, d) = background + sum_i 1 / (eps + ||theta_i - d||^2),
    ln y ~ N(ln mu, sigma^2).

The candidate models differ in how many sources are present.  An optional
predictive quantity of interest is the net flux of the superposed field
through a vertical wall, reduced to a scalar via a log-magnitude transform.
"""

from __future__ import annotations

import math

import numpy as np

from .. import prob
from .base import Environment, EnvironmentSpec, GroundTruth, PredictorRanges


def field_intensity(theta, designs, background=0.1, eps=1e-4):
    """Signal strength for parameter rows at one or more sensor positions.

    ``theta`` (L, 2 s) holds s stacked source coordinates per row;
    ``designs`` (..., 2).  Returns shape (L, ...) broadcast over designs.
    """
    theta = np.asarray(theta, dtype=np.float64)
    designs = np.asarray(designs, dtype=np.float64)
    l_rows = theta.shape[0]
    sources = theta.reshape(l_rows, -1, 2)                    # (L, s, 2)
    d_flat = designs.reshape(-1, 2)                            # (Q, 2)
    diff = sources[:, :, None, :] - d_flat[None, None, :, :]   # (L, s, Q, 2)
    sq = (diff * diff).sum(axis=-1)                            # (L, s, Q)
    mu = background + (1.0 / (eps + sq)).sum(axis=1)           # (L, Q)
    return mu.reshape((l_rows,) + designs.shape[:-1])


def wall_flux(theta, wall_x=6.0, eps=1e-4):
    """Net horizontal flux of the superposed field through the line x = wall_x.

    For each source the closed-form through-wall flux depends only on the
    signed horizontal distance ``dx = theta_x - wall_x``:
    ``-pi * dx / (eps + dx^2)^{3/2}``, summed over sources.
    """
    theta = np.asarray(theta, dtype=np.float64)
    sources = theta.reshape(theta.shape[0], -1, 2)
    dx = sources[:, :, 0] - wall_x
    return (-math.pi * dx / (eps + dx * dx) ** 1.5).sum(axis=1)


class SourceLocationEnv(Environment):
    """Locate 1..M point sources; optionally target the wall-flux QoI.

    Parameters
    ----------
    source_counts : tuple of int
        One entry per candidate model (e.g. ``(1, 2, 3)``; ``(2,)`` for the
        single-model variant with two sources).
    horizon : int
        Number of experiments per episode.
    with_qoi : bool
        Expose the log-magnitude wall flux as a predictive target.
    movement_cost : float
        Optional per-stage penalty ``-movement_cost * ||d_k - d_{k-1}||``;
        the first stage is unpenalized unless ``initial_position`` is set.
    """

    has_explicit_likelihood = True

    def __init__(self, source_counts=(1, 2, 3), horizon=10, noise_std=0.5,
                 background=0.1, eps=1e-4, design_bound=4.0, wall_x=6.0,
                 with_qoi=False, movement_cost=0.0, initial_position=None,
                 qoi_floor=1e-27):
        source_counts = tuple(int(c) for c in source_counts)
        if any(c < 1 for c in source_counts):
            raise ValueError("each model needs at least one source")
        self.source_counts = source_counts
        self.noise_std = float(noise_std)
        self.background = float(background)
        self.eps = float(eps)
        self.wall_x = float(wall_x)
        self.with_qoi = bool(with_qoi)
        self.movement_cost = float(movement_cost)
        self.initial_position = None if initial_position is None else \
            np.asarray(initial_position, dtype=np.float64)
        self.qoi_floor = float(qoi_floor)
        self.spec = EnvironmentSpec(
            name="source-location",
            n_models=len(source_counts),
            theta_dims=tuple(2 * c for c in source_counts),
            design_dim=2,
            obs_dim=1,
            horizon=int(horizon),
            design_lower=np.full(2, -float(design_bound)),
            design_upper=np.full(2, float(design_bound)),
            qoi_dims=tuple(1 for _ in source_counts) if with_qoi else None,
        )

    # -- prior -----------------------------------------------------------------

    def sample_prior(self, rng, n):
        ms = rng.integers(0, self.spec.n_models, size=n)
        truths = []
        for m in ms:
            theta = rng.standard_normal(self.spec.theta_dims[m])
            t = GroundTruth(m=int(m), theta=theta)
            if self.with_qoi:
                t.qoi = self.predict_qoi(t)
            truths.append(t)
        return truths

    def log_prior_theta(self, m, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        return prob.gaussian_logpdf(theta, 0.0, 1.0).sum(axis=1)

    def sample_theta(self, m, rng, n):
        return rng.standard_normal((n, self.spec.theta_dims[m]))

    # -- simulation --------------------------------------------------------------

    def observe(self, truth, design, history, rng):
        mu = field_intensity(truth.theta[None, :], np.asarray(design),
                             self.background, self.eps)[0]
        return np.array([mu * math.exp(self.noise_std * rng.standard_normal())])

    def observe_batch(self, truths, designs, stage, rng):
        out = np.empty((len(truths), 1))
        noise = rng.standard_normal(len(truths))
        for i, t in enumerate(truths):
            mu = field_intensity(t.theta[None, :], designs[i],
                                 self.background, self.eps)[0]
            out[i, 0] = mu * math.exp(self.noise_std * noise[i])
        return out

    def predict_qoi(self, truth):
        j = wall_flux(truth.theta[None, :], self.wall_x, self.eps)[0]
        return np.array([math.log(abs(j) + self.qoi_floor)])

    def qoi_of_theta(self, m, theta):
        """Vectorized predictive quantity: (L, 2s) parameter rows -> (L,)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        j = wall_flux(theta, self.wall_x, self.eps)
        return np.log(np.abs(j) + self.qoi_floor)

    def log_likelihood(self, m, theta, designs, observations):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        mu = field_intensity(theta, np.asarray(designs), self.background, self.eps)
        log_y = np.log(np.asarray(observations, dtype=np.float64)[:, 0])
        # lognormal density of y: N(ln y; ln mu, sigma^2) - ln y
        lp = prob.gaussian_logpdf(log_y[None, :], np.log(mu), self.noise_std)
        return (lp - log_y[None, :]).sum(axis=1)

    # -- rewards / encodings ------------------------------------------------------

    def non_ig_reward(self, stage, design, prev_design):
        if self.movement_cost == 0.0:
            return 0.0
        if prev_design is None:
            if self.initial_position is None:
                return 0.0
            prev_design = self.initial_position
        return -self.movement_cost * float(np.linalg.norm(design - prev_design))

    obs_net_scale = staticmethod(np.log)

    # -- predictor ranges -----------------------------------------------------------

    def param_ranges(self, m):
        d = self.spec.theta_dims[m]
        return PredictorRanges(
            mean_low=np.full(d, -6.0), mean_high=np.full(d, 6.0),
            std_low=np.full(d, 1e-5), std_high=np.full(d, 1.0),
        )

    def qoi_ranges(self, m):
        return PredictorRanges(
            mean_low=np.full(1, -6.0), mean_high=np.full(1, 6.0),
            std_low=np.full(1, 1e-5), std_high=np.full(1, 2.0),
        )
