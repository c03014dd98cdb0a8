"""Run configuration: one human-readable JSON tree per experiment.

A run is described by a single file with five sections, all optional except
the environment name::

    {
      "seed": 0,
      "output_dir": "runs/demo",
      "checkpoint_interval": 1000,
      "environment": {"name": "source", "horizon": 5, "source_counts": [1]},
      "train": {"mode": "terminal", "n_update": 500, "weights": {"param": 1.0}},
      "evaluation": {"n_episode": 2000, "l_contrastive": 10000}
    }

Omitted keys take their documented defaults.  :meth:`RunConfig.to_tree`
materializes every default into a complete tree, so the copy written into a
run directory reproduces the run from artifacts alone, and
:func:`config_hash` fingerprints that resolved tree for result records.

Validation is collective: every offending field is reported in one
:class:`ConfigError` rather than failing at the first problem.
"""

from __future__ import annotations

import dataclasses
import hashlib
import inspect
import json
import os
from dataclasses import dataclass

import numpy as np

from .agent import TrainConfig, config_from_dict, config_to_dict
from .environments import (CesEnv, SimBank, SirEnv, SourceLocationEnv,
                           make_discrete_toy)
from .rewards import RewardWeights


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists every offending field."""

    def __init__(self, problems):
        self.problems = [str(p) for p in problems]
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"invalid configuration:\n{lines}")


# ---------------------------------------------------------------------------
# Environment registry: each builder's signature doubles as its schema,
# so unknown keys, required keys, and defaults all come from one place.
# ---------------------------------------------------------------------------


def _env_source(horizon=10, source_counts=(1, 2, 3), noise_std=0.5,
                background=0.1, eps=1e-4, design_bound=4.0, wall_x=6.0,
                with_qoi=False, movement_cost=0.0, initial_position=None,
                qoi_floor=1e-27):
    return SourceLocationEnv(
        source_counts=tuple(int(c) for c in np.atleast_1d(source_counts)),
        horizon=horizon, noise_std=noise_std, background=background, eps=eps,
        design_bound=design_bound, wall_x=wall_x, with_qoi=with_qoi,
        movement_cost=movement_cost, initial_position=initial_position,
        qoi_floor=qoi_floor)


def _env_ces(horizon=10, tau=0.005, basket_max=100.0, log_u_mean=1.0,
             log_u_std=3.0):
    return CesEnv(horizon=horizon, tau=tau, basket_max=basket_max,
                  log_u_mean=log_u_mean, log_u_std=log_u_std)


def _env_sir(bank_path, horizon=10):
    return SirEnv(SimBank.load(bank_path), horizon=horizon)


def _env_toy(seed=0, n_models=2, n_theta=3, n_obs=3, n_designs=2, horizon=2,
             with_qoi=True, concentration=2.0):
    return make_discrete_toy(np.random.default_rng(seed), n_models=n_models,
                             n_theta=n_theta, n_obs=n_obs, n_designs=n_designs,
                             horizon=horizon, with_qoi=with_qoi,
                             concentration=concentration)


ENVIRONMENTS = {
    "source": _env_source,
    "ces": _env_ces,
    "sir": _env_sir,
    "toy": _env_toy,
}


def _resolve_env_section(section, problems):
    """Fill in builder defaults; report unknown/missing keys. Returns a
    JSON-friendly resolved dict (or None if the section is unusable)."""
    if not isinstance(section, dict):
        problems.append("environment: must be a key/value tree")
        return None
    name = section.get("name")
    if name not in ENVIRONMENTS:
        known = ", ".join(sorted(ENVIRONMENTS))
        problems.append(f"environment.name: expected one of {known}, got {name!r}")
        return None
    params = inspect.signature(ENVIRONMENTS[name]).parameters
    resolved = {"name": name}
    usable = True
    for key, value in section.items():
        if key != "name" and key not in params:
            problems.append(f"environment.{key}: unknown parameter for "
                            f"the {name!r} environment")
            usable = False
    for key, param in params.items():
        if key in section:
            resolved[key] = _jsonable(section[key])
        elif param.default is inspect.Parameter.empty:
            problems.append(f"environment.{key}: required for the "
                            f"{name!r} environment")
            usable = False
        else:
            resolved[key] = _jsonable(param.default)
    return resolved if usable else None


def build_environment(section):
    """Construct the environment named by a (resolved or raw) section."""
    problems = []
    resolved = _resolve_env_section(section, problems)
    if resolved is None:
        raise ConfigError(problems)
    kwargs = {k: v for k, v in resolved.items() if k != "name"}
    return ENVIRONMENTS[resolved["name"]](**kwargs)


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


# ---------------------------------------------------------------------------
# Evaluation settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSettings:
    """Estimator budgets used by the evaluate/export commands."""

    n_episode: int = 2000
    l_contrastive: int = 10_000
    l_per_model: int | None = None
    exact_marginal: bool = False
    n_posterior_samples: int = 2000

    def __post_init__(self):
        if self.n_episode < 1:
            raise ValueError("n_episode must be >= 1")
        if self.l_contrastive < 0:
            raise ValueError("l_contrastive must be >= 0")
        if self.l_per_model is not None and self.l_per_model < 1:
            raise ValueError("l_per_model must be >= 1 when given")
        if self.n_posterior_samples < 1:
            raise ValueError("n_posterior_samples must be >= 1")

    def pce_config(self):
        from .evaluation import PceConfig
        return PceConfig(l_contrastive=self.l_contrastive,
                         n_episode=self.n_episode,
                         l_per_model=self.l_per_model,
                         exact_marginal=self.exact_marginal)


# ---------------------------------------------------------------------------
# The run configuration itself
# ---------------------------------------------------------------------------

_TOP_LEVEL = ("seed", "output_dir", "checkpoint_interval",
              "environment", "train", "evaluation")


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved run: environment + training + evaluation + bookkeeping."""

    environment: dict            # resolved section, including "name"
    train: TrainConfig
    evaluation: EvalSettings
    seed: int = 0
    output_dir: str = "run"
    checkpoint_interval: int = 1000

    def build_env(self):
        return build_environment(self.environment)

    def to_tree(self) -> dict:
        """The complete configuration tree with every default materialized."""
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_interval": self.checkpoint_interval,
            "environment": dict(self.environment),
            "train": config_to_dict(self.train),
            "evaluation": dataclasses.asdict(self.evaluation),
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_tree())


def config_hash(tree: dict) -> str:
    """sha256 fingerprint of a configuration tree (canonical JSON form)."""
    canon = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _check_dataclass_keys(section, cls, label, problems):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in section:
        if key not in names:
            problems.append(f"{label}.{key}: unknown field")
    return {k: v for k, v in section.items() if k in names}


def _cross_checks(env, train, problems):
    """Consistency rules that need both the environment and the trainer."""
    try:
        train.weights.validate_for(env)
    except ValueError as exc:
        problems.append(f"train.weights: {exc}")
    for label, weight, used in (
            ("model", train.weights.model,
             env.spec.n_models > 1 if train.use_model is None else train.use_model),
            ("param", train.weights.param, train.use_param),
            ("qoi", train.weights.qoi, train.use_qoi)):
        if weight > 0.0 and not used:
            problems.append(f"train.weights.{label}: weighted target has no "
                            f"predictor (use_{label} is off)")
    if train.use_qoi and env.spec.qoi_dims is None:
        problems.append("train.use_qoi: environment exposes no predictive "
                        "quantity of interest")
    if train.use_param and train.param_family == "flow":
        for m, dim in enumerate(env.spec.theta_dims):
            if dim < 2:
                problems.append(f"train.param_family: coupling flows need a "
                                f">= 2-dimensional target, but model {m} has "
                                f"a {dim}-dimensional parameter")
    if train.use_qoi and train.qoi_family == "flow" and env.spec.qoi_dims:
        for m, dim in enumerate(env.spec.qoi_dims):
            if dim < 2:
                problems.append(f"train.qoi_family: coupling flows need a "
                                f">= 2-dimensional target, but model {m} has "
                                f"a {dim}-dimensional predictive quantity")
    use_model = env.spec.n_models > 1 if train.use_model is None else train.use_model
    if use_model and env.spec.n_models < 2:
        problems.append("train.use_model: environment has a single candidate "
                        "model, so there is no model indicator to learn")


def parse_run_config(tree: dict) -> RunConfig:
    """Validate a raw configuration tree, reporting all problems at once."""
    if not isinstance(tree, dict):
        raise ConfigError(["top level: must be a key/value tree"])
    problems = []
    for key in tree:
        if key not in _TOP_LEVEL:
            problems.append(f"{key}: unknown section")

    seed = tree.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"seed: must be a non-negative integer, got {seed!r}")
        seed = 0
    output_dir = tree.get("output_dir", "run")
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("output_dir: must be a non-empty path string")
        output_dir = "run"
    interval = tree.get("checkpoint_interval", 1000)
    if not isinstance(interval, int) or isinstance(interval, bool) or interval < 1:
        problems.append(f"checkpoint_interval: must be a positive integer, "
                        f"got {interval!r}")
        interval = 1000

    env_resolved = _resolve_env_section(tree.get("environment", {}), problems)
    env = None
    if env_resolved is not None:
        try:
            env = build_environment(env_resolved)
        except ConfigError as exc:
            problems.extend(exc.problems)
        except Exception as exc:  # bad values surface from the constructor
            problems.append(f"environment: {exc}")

    train_section = tree.get("train", {})
    train = None
    if not isinstance(train_section, dict):
        problems.append("train: must be a key/value tree")
    else:
        kwargs = _check_dataclass_keys(train_section, TrainConfig, "train",
                                       problems)
        if isinstance(kwargs.get("weights"), dict):
            kwargs["weights"] = _check_dataclass_keys(
                kwargs["weights"], RewardWeights, "train.weights", problems)
        try:
            train = config_from_dict(kwargs)
        except (TypeError, ValueError) as exc:
            problems.append(f"train: {exc}")

    eval_section = tree.get("evaluation", {})
    evaluation = None
    if not isinstance(eval_section, dict):
        problems.append("evaluation: must be a key/value tree")
    else:
        kwargs = _check_dataclass_keys(eval_section, EvalSettings,
                                       "evaluation", problems)
        try:
            evaluation = EvalSettings(**kwargs)
        except (TypeError, ValueError) as exc:
            problems.append(f"evaluation: {exc}")

    if env is not None and train is not None:
        _cross_checks(env, train, problems)

    if problems:
        raise ConfigError(problems)
    return RunConfig(environment=env_resolved, train=train,
                     evaluation=evaluation, seed=seed, output_dir=output_dir,
                     checkpoint_interval=interval)


def load_run_config(path) -> RunConfig:
    """Parse a configuration file; relative paths inside it (the epidemic
    bank, the output directory) are resolved against the file's directory."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"configuration file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            tree = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    base = os.path.dirname(os.path.abspath(path))
    if isinstance(tree, dict):
        env = tree.get("environment")
        if isinstance(env, dict) and isinstance(env.get("bank_path"), str):
            env["bank_path"] = os.path.normpath(
                os.path.join(base, env["bank_path"]))
        out = tree.get("output_dir")
        if isinstance(out, str) and out:
            tree["output_dir"] = os.path.normpath(os.path.join(base, out))
    return parse_run_config(tree)
