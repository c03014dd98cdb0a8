"""Stage rewards built from posterior predictors.

Rewards are one-point information-gain estimates: log ratios of predicted
posterior to reference density, evaluated at the episode's own generating
sample.  Two accrual modes exist:

* terminal — the full ratio ``ln q(.|I_N) - ln prior`` lands in the final
  reward slot;
* incremental — each slot ``k`` receives the consecutive-stage ratio
  ``ln q(.|I_{k+1}) - ln q(.|I_k)``, with the stage-0 reference fixed to the
  prior.  Summing the incremental slots telescopes to the terminal value.

Reference priors can be kept or omitted per target.  Omitting a prior term
shifts every episode's total by a quantity independent of the design policy,
so optimization is unaffected; it is the only option for targets whose prior
density is unavailable in closed form (typically the predictive quantity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episodes import EpisodeBatch


@dataclass(frozen=True)
class RewardWeights:
    """Weights on the information-gain targets and prior-term flags."""

    model: float = 0.0
    param: float = 1.0
    qoi: float = 0.0
    keep_model_prior: bool = True
    keep_param_prior: bool = True
    keep_qoi_prior: bool = False

    def __post_init__(self):
        if min(self.model, self.param, self.qoi) < 0:
            raise ValueError("reward weights must be non-negative")
        if max(self.model, self.param, self.qoi) == 0:
            raise ValueError("at least one reward weight must be positive")

    def validate_for(self, env):
        """Consistency rules against an environment's structure."""
        if self.model > 0 and env.spec.n_models < 2:
            raise ValueError("model-indicator gain needs at least two candidate models")
        if self.qoi > 0 and env.spec.qoi_dims is None:
            raise ValueError("environment exposes no predictive quantity of interest")
        if self.param > 0 and self.qoi > 0 and not getattr(env, "has_nuisance", False):
            raise ValueError(
                "combined parameter and predictive-quantity gains double-count "
                "information unless the parameters contain nuisance components")


@dataclass
class StageRewards:
    """Per-episode rewards split by origin; one column per slot ``0..N``."""

    ig: np.ndarray       # information-gain contributions
    non_ig: np.ndarray   # design costs and other problem-specific terms

    @property
    def total(self):
        return self.ig + self.non_ig

    def episode_total(self):
        return self.total.sum(axis=1)


def _target_terms(predictors, weights):
    """Active (label, weight, query, keep_prior) tuples for the predictor set."""
    terms = []
    if weights.model > 0:
        terms.append(("model", weights.model,
                      lambda s, c, b: predictors.log_model(s, c, b.m),
                      weights.keep_model_prior))
    if weights.param > 0:
        terms.append(("parameter", weights.param,
                      lambda s, c, b: predictors.log_param(s, c, b.m, b.theta),
                      weights.keep_param_prior))
    if weights.qoi > 0:
        terms.append(("predictive-quantity", weights.qoi,
                      lambda s, c, b: predictors.log_qoi(s, c, b.m, b.qoi),
                      weights.keep_qoi_prior))
    return terms


def _stage0_reference(label, query, batch, keep_prior):
    if not keep_prior:
        return 0.0
    ref = query(0, None, batch)
    if ref is None:
        raise ValueError(f"no analytic prior density for the {label} target; "
                         f"set the omit-prior flag instead")
    return ref


def variational_point_rewards(batch: EpisodeBatch, predictors, weights: RewardWeights) -> StageRewards:
    """One-point variational rewards for every episode in ``batch``.

    ``predictors`` provides ``mode``, ``encode``, and per-stage log-density
    queries (stage 0 resolving to the prior); the networks' own weights are
    treated as constants.  Returns slot-layout rewards whose non-IG part is
    copied from the batch.
    """
    n, horizon = len(batch), batch.horizon
    ig = np.zeros((n, horizon + 1))
    terms = _target_terms(predictors, weights)
    if predictors.mode == "terminal":
        cond = predictors.encode(batch.designs, batch.observations)
        for label, w, query, keep_prior in terms:
            ref = _stage0_reference(label, query, batch, keep_prior)
            ig[:, horizon] += w * (query(horizon, cond, batch) - ref)
    elif predictors.mode == "incremental":
        prev = [_stage0_reference(label, query, batch, keep_prior)
                for label, _, query, keep_prior in terms]
        for k in range(1, horizon + 1):
            cond = predictors.encode(batch.designs[:, :k], batch.observations[:, :k])
            for i, (_, w, query, _) in enumerate(terms):
                cur = query(k, cond, batch)
                ig[:, k - 1] += w * (cur - prev[i])
                prev[i] = cur
    else:
        raise ValueError(f"unknown reward mode {predictors.mode!r}")
    return StageRewards(ig=ig, non_ig=batch.non_ig.copy())


def stage_returns(rewards: StageRewards, gamma: float) -> np.ndarray:
    """Discounted reward-to-go from each action stage.

    Column ``k`` (of ``N``) is ``sum_{t=k}^{N-1} gamma^{t-k} g_t +
    gamma^{N-k} g_N`` — the Monte Carlo return used as the critic's
    exact-rollout target.
    """
    total = rewards.total
    horizon = total.shape[1] - 1
    out = np.empty((total.shape[0], horizon))
    acc = total[:, horizon].copy()
    for k in range(horizon - 1, -1, -1):
        acc = total[:, k] + gamma * acc
        out[:, k] = acc
    return out
