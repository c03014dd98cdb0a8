"""Policy-quality estimators: contrastive EIG bounds and the variational bound.

All estimators roll the deterministic policy out without exploration noise,
compute one value per episode, and report the sample mean with its standard
error (sample std / sqrt(n)).  The contrastive estimators need an explicit
likelihood; they compare each episode's generating-sample likelihood against
an averaged likelihood over prior draws, which lower-bounds the expected
information gain and is capped at ``ln(L+1)`` per episode.  Likelihoods are
aggregated in log space throughout — products over all stages would
underflow 64-bit floats otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .agent import rollout
from .rewards import RewardWeights, variational_point_rewards


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo mean with standard error over per-episode values."""

    mean: float
    se: float
    n: int

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(mean=float(values.mean()), se=se, n=n)

    def to_dict(self):
        return {"mean": self.mean, "se": self.se, "n": self.n}


# Contrastive budget used by the reference experiments; desk-scale runs use
# far less and should surface the gap in their output metadata.
REFERENCE_L = 1_000_000


@dataclass(frozen=True)
class PceConfig:
    """Contrastive estimation budget.

    ``l_contrastive`` prior draws per episode (``L``); marginalized
    multi-model estimates give each model ``l_per_model`` draws (default
    ``max(1, L // n_models)``).  ``exact_marginal`` replaces the sampled
    contrast with a weighted enumeration over parameter atoms — only possible
    for finite-support problems — leaving outer rollout noise as the sole
    Monte Carlo error.
    """

    l_contrastive: int = 10_000
    n_episode: int = 2000
    l_per_model: int | None = None
    exact_marginal: bool = False

    def __post_init__(self):
        if self.l_contrastive < 0 or self.n_episode < 1:
            raise ValueError("need l_contrastive >= 0 and n_episode >= 1")
        if self.l_per_model is not None and self.l_per_model < 1:
            raise ValueError("per-model contrastive count must be >= 1")

    def resolved_l_per_model(self, n_models):
        if self.l_per_model is not None:
            return self.l_per_model
        return max(1, self.l_contrastive // n_models)


def _require_contrastable(env):
    if not env.has_explicit_likelihood:
        raise ValueError("contrastive estimation needs an explicit likelihood")
    if getattr(env, "has_nuisance", False):
        raise ValueError("contrastive estimation cannot marginalize nuisance "
                         "parameters; use the variational bound instead")


def _atom_support(env, m):
    """(values, log_weights) of a finite parameter support."""
    priors = getattr(env, "theta_priors", None)
    values = getattr(env, "theta_values", None)
    if priors is None or values is None:
        raise ValueError("exact marginalization needs a finite parameter support")
    return values[m].reshape(-1, 1), np.log(priors[m])


def _log_marginal_exact(env, m, designs, obs):
    atoms, log_w = _atom_support(env, m)
    return logsumexp(env.log_likelihood(m, atoms, designs, obs) + log_w)


def pce_eig_values(env, policy, cfg: PceConfig, rng) -> np.ndarray:
    """Per-episode contrastive lower-bound values on the parameter EIG.

    Per episode: ``ln p(I_N | m, theta_true)`` minus the log of the average
    likelihood over the true draw plus ``L`` fresh prior draws, all
    conditioned on the episode's model.  Each value is at most ``ln(L+1)``.
    """
    _require_contrastable(env)
    batch = rollout(env, policy, cfg.n_episode, rng)
    values = np.empty(cfg.n_episode)
    for i in range(cfg.n_episode):
        m = int(batch.m[i])
        theta_true = batch.theta[i, :env.spec.theta_dims[m]][None, :]
        designs = batch.designs[i]
        obs = batch.observations[i]
        ll_true = env.log_likelihood(m, theta_true, designs, obs)[0]
        if cfg.exact_marginal:
            denom = _log_marginal_exact(env, m, designs, obs)
        elif cfg.l_contrastive == 0:
            denom = ll_true
        else:
            contrast = env.sample_theta(m, rng, cfg.l_contrastive)
            ll = env.log_likelihood(m, contrast, designs, obs)
            denom = logsumexp(np.concatenate([[ll_true], ll])) \
                - np.log(cfg.l_contrastive + 1.0)
        values[i] = ll_true - denom
    return values


def pce_eig(env, policy, cfg: PceConfig, rng) -> Estimate:
    """Mean and standard error of :func:`pce_eig_values`."""
    return Estimate.from_values(pce_eig_values(env, policy, cfg, rng))


def pce_stagewise(env, policy, cfg: PceConfig, rng, stages=None) -> dict:
    """Contrastive parameter-EIG estimates after each design prefix.

    One shared rollout; each episode draws one contrast set and re-scores it
    against every history prefix, so the per-stage curves are positively
    correlated and stage ``horizon`` reproduces :func:`pce_eig_values`
    exactly under the same generator state.  Stage 0 (no data) is always 0.
    Returns ``{stage: Estimate}``.
    """
    _require_contrastable(env)
    horizon = env.spec.horizon
    stages = range(horizon + 1) if stages is None else sorted(set(int(k) for k in stages))
    bad = [k for k in stages if not 0 <= k <= horizon]
    if bad:
        raise ValueError(f"stages {bad} outside 0..{horizon}")
    batch = rollout(env, policy, cfg.n_episode, rng)
    values = {k: np.empty(cfg.n_episode) for k in stages}
    for i in range(cfg.n_episode):
        m = int(batch.m[i])
        theta_true = batch.theta[i, :env.spec.theta_dims[m]][None, :]
        contrast = None
        if not cfg.exact_marginal and cfg.l_contrastive > 0:
            contrast = env.sample_theta(m, rng, cfg.l_contrastive)
        for k in stages:
            designs = batch.designs[i, :k]
            obs = batch.observations[i, :k]
            ll_true = env.log_likelihood(m, theta_true, designs, obs)[0]
            if cfg.exact_marginal:
                denom = _log_marginal_exact(env, m, designs, obs)
            elif contrast is None:
                denom = ll_true
            else:
                ll = env.log_likelihood(m, contrast, designs, obs)
                denom = logsumexp(np.concatenate([[ll_true], ll])) \
                    - np.log(cfg.l_contrastive + 1.0)
            values[k][i] = ll_true - denom
    return {k: Estimate.from_values(values[k]) for k in stages}


def pce_model_eig(env, policy, cfg: PceConfig, rng) -> Estimate:
    """Contrastive estimate of the EIG on the model indicator.

    Marginal likelihoods ``p(I_N | m)`` are inner Monte Carlo averages over
    per-model prior draws (the episode's own draw augments its model's set);
    the per-episode value is ``ln p(I_N | m_true) - ln sum_m P(m) p(I_N | m)``.
    """
    _require_contrastable(env)
    n_models = env.spec.n_models
    if n_models < 2:
        return Estimate.from_values(np.zeros(cfg.n_episode))
    per_model = cfg.resolved_l_per_model(n_models)
    batch = rollout(env, policy, cfg.n_episode, rng)
    log_prior = env.log_prior_model(np.arange(n_models))
    values = np.empty(cfg.n_episode)
    for i in range(cfg.n_episode):
        m_true = int(batch.m[i])
        designs = batch.designs[i]
        obs = batch.observations[i]
        log_marginals = np.empty(n_models)
        for m in range(n_models):
            if cfg.exact_marginal:
                log_marginals[m] = _log_marginal_exact(env, m, designs, obs)
                continue
            draws = env.sample_theta(m, rng, per_model)
            ll = env.log_likelihood(m, draws, designs, obs)
            if m == m_true:
                theta_true = batch.theta[i, :env.spec.theta_dims[m]][None, :]
                ll_true = env.log_likelihood(m, theta_true, designs, obs)
                ll = np.concatenate([ll_true, ll])
            log_marginals[m] = logsumexp(ll) - np.log(ll.size)
        values[i] = log_marginals[m_true] - logsumexp(log_prior + log_marginals)
    return Estimate.from_values(values)


def variational_lower_bound(env, policy, predictors, weights: RewardWeights,
                            n, rng) -> Estimate:
    """MC mean of the weighted variational one-point utility (noise-free)."""
    batch = rollout(env, policy, n, rng)
    rewards = variational_point_rewards(batch, predictors, weights)
    return Estimate.from_values(rewards.episode_total())


def evaluate_stagewise(env, policy, predictors, stages, n, rng,
                       weights: RewardWeights | None = None) -> dict:
    """Cumulative expected utility truncated after each requested stage.

    All stages share one set of noise-free rollouts, so the final stage
    reproduces :func:`variational_lower_bound` on the same rng exactly.
    Stage ``k`` sums reward slots ``0..k-1`` (plus the terminal slot when
    ``k`` is the horizon); nonzero truncation points therefore need a
    predictor at that stage, which the incremental mode alone provides for
    interior stages.  Returns ``{stage: Estimate}``.
    """
    if weights is None:
        weights = RewardWeights()
    horizon = env.spec.horizon
    stages = sorted({int(k) for k in stages})
    bad = [k for k in stages if k < 0 or k > horizon]
    if bad:
        raise ValueError(f"stages {bad} outside 0..{horizon}")
    missing = [k for k in stages if k != 0 and k not in predictors.stages]
    if missing:
        raise ValueError(f"no predictors at stages {missing}")
    batch = rollout(env, policy, n, rng)
    total = variational_point_rewards(batch, predictors, weights).total
    out = {}
    for k in stages:
        values = total[:, :k].sum(axis=1)
        if k == horizon:
            values = values + total[:, horizon]
        out[k] = Estimate.from_values(values)
    return out


# ---------------------------------------------------------------------------
# Grid-posterior diagnostics (goal-oriented designs)
# ---------------------------------------------------------------------------


def cartesian_grid(lower, upper, points_per_dim) -> np.ndarray:
    """Regular grid over a box, flattened to (points^D, D) rows."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.reshape(-1) for a in mesh])


def grid_posterior_qoi_variance(env, m, grid, designs, observations) -> float:
    """Posterior-predictive variance of the scalar QoI over a parameter grid.

    Grid weights follow ``prior x likelihood`` normalized on the grid; the
    environment must expose a vectorized ``qoi_of_theta``.  Smaller variance
    means the observed designs shrank the goal quantity's posterior more.
    """
    log_w = env.log_prior_theta(m, grid) \
        + env.log_likelihood(m, grid, designs, observations)
    w = np.exp(log_w - logsumexp(log_w))
    z = env.qoi_of_theta(m, grid)
    mean = float(w @ z)
    return float(w @ (z - mean) ** 2)
