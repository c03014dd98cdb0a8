"""Experiment environments: priors, simulators, and reward hooks."""

from .base import Environment, EnvironmentSpec, GroundTruth, PredictorRanges
from .ces import CesEnv
from .sir import SimBank, SirEnv, simulate_sir_bank
from .source import SourceLocationEnv, field_intensity, wall_flux
from .toy import DiscreteToyEnv, make_discrete_toy

__all__ = [
    "Environment", "EnvironmentSpec", "GroundTruth", "PredictorRanges",
    "CesEnv", "SimBank", "SirEnv", "simulate_sir_bank",
    "SourceLocationEnv", "field_intensity", "wall_flux",
    "DiscreteToyEnv", "make_discrete_toy",
]
