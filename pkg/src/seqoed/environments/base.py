"""Environment interface for sequential design problems.

An environment owns everything problem-specific: the model/parameter priors,
the observation process, optional predictive quantities of interest, design
bounds, and the value ranges its posterior predictors should cover.  The
training and evaluation code only ever touches this interface.

Histories are stored in raw observation units.  ``obs_net_scale`` is a
monotone per-channel map applied *only* when observations are encoded into
network inputs (e.g. log intensities for signals spanning decades); it never
changes what :meth:`Environment.observe` returns or what replay buffers hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class EnvironmentSpec:
    """Static structure of a design problem."""

    name: str
    n_models: int
    theta_dims: tuple[int, ...]          # parameter dimension per model
    design_dim: int
    obs_dim: int
    horizon: int
    design_lower: np.ndarray             # (horizon, design_dim)
    design_upper: np.ndarray             # (horizon, design_dim)
    qoi_dims: tuple[int, ...] | None = None   # per model; None = no QoI target

    def __post_init__(self):
        lo = np.broadcast_to(np.asarray(self.design_lower, np.float64),
                             (self.horizon, self.design_dim)).copy()
        hi = np.broadcast_to(np.asarray(self.design_upper, np.float64),
                             (self.horizon, self.design_dim)).copy()
        if np.any(lo >= hi):
            raise ValueError("design_lower must be strictly below design_upper")
        if self.n_models != len(self.theta_dims):
            raise ValueError("theta_dims must have one entry per model")
        object.__setattr__(self, "design_lower", lo)
        object.__setattr__(self, "design_upper", hi)


@dataclass
class GroundTruth:
    """One episode's generating sample."""

    m: int                               # model index in [0, n_models)
    theta: np.ndarray                    # (theta_dims[m],)
    qoi: np.ndarray | None = None        # (qoi_dims[m],) once computed
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PredictorRanges:
    """Value ranges a posterior predictor must cover for one target.

    ``mean_low``/``mean_high`` bound the predicted component means,
    ``std_low``/``std_high`` the predicted component standard deviations
    (all length-D arrays); ``lower``/``upper`` are optional hard support
    bounds (entries may be +-inf for unbounded dimensions).
    """

    mean_low: np.ndarray
    mean_high: np.ndarray
    std_low: np.ndarray
    std_high: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


class Environment:
    """Base class; concrete problems override the abstract pieces."""

    spec: EnvironmentSpec

    # -- prior ---------------------------------------------------------------

    def sample_prior(self, rng: np.random.Generator, n: int) -> list[GroundTruth]:
        raise NotImplementedError

    def sample_theta(self, m: int, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` prior parameter draws (n, theta_dims[m]) for one model.

        Needed by contrastive estimators; optional otherwise.
        """
        raise NotImplementedError

    def log_prior_model(self, m) -> np.ndarray:
        """ln P(m); uniform by default."""
        m = np.asarray(m)
        return np.full(m.shape, -np.log(self.spec.n_models), dtype=np.float64)

    def log_prior_theta(self, m: int, theta: np.ndarray) -> np.ndarray | None:
        """ln p(theta | m) for rows of ``theta``; None when unavailable."""
        raise NotImplementedError

    def log_prior_qoi(self, m: int, z: np.ndarray) -> np.ndarray | None:
        """ln p(z | m); usually None (prior-predictive densities are implicit),
        in which case prior terms for the QoI target are omitted everywhere."""
        return None

    # -- simulation ------------------------------------------------------------

    def observe(self, truth: GroundTruth, design: np.ndarray, history, rng) -> np.ndarray:
        """One observation for one episode at ``design``; raw units."""
        raise NotImplementedError

    def observe_batch(self, truths: list[GroundTruth], designs: np.ndarray,
                      stage: int, rng) -> np.ndarray:
        """Vectorized fallback: loop :meth:`observe`; override for speed."""
        return np.stack([self.observe(t, designs[i], None, rng)
                         for i, t in enumerate(truths)])

    def predict_qoi(self, truth: GroundTruth) -> np.ndarray | None:
        """Deterministic quantity of interest for a ground truth, if any."""
        return None

    # -- likelihood (optional; needed by contrastive estimators) -------------

    has_explicit_likelihood = False

    def log_likelihood(self, m: int, theta: np.ndarray, designs: np.ndarray,
                       observations: np.ndarray) -> np.ndarray:
        """ln p(y_{0:k-1} | m, theta, d_{0:k-1}) summed over stages.

        ``theta`` (L, D), ``designs`` (k, design_dim), ``observations``
        (k, obs_dim); returns (L,).  Only for explicit-likelihood problems.
        """
        raise NotImplementedError

    # -- stage rewards unrelated to information gain --------------------------

    def non_ig_reward(self, stage: int, design: np.ndarray,
                      prev_design: np.ndarray | None) -> float:
        return 0.0

    # -- predictor configuration ----------------------------------------------

    def param_ranges(self, m: int) -> PredictorRanges:
        raise NotImplementedError

    def qoi_ranges(self, m: int) -> PredictorRanges:
        raise NotImplementedError

    #: monotone map applied to observations at network-encoding time only
    obs_net_scale: Callable[[np.ndarray], np.ndarray] | None = None

    # -- conveniences ----------------------------------------------------------

    def clip_design(self, design: np.ndarray, stage: int) -> np.ndarray:
        return np.clip(design, self.spec.design_lower[stage], self.spec.design_upper[stage])

    def validate_design(self, design: np.ndarray, stage: int) -> None:
        lo = self.spec.design_lower[stage]
        hi = self.spec.design_upper[stage]
        if np.any(design < lo) or np.any(design > hi):
            raise ValueError(f"design {design} outside bounds at stage {stage}")
