"""Deterministic-policy learning loop: actor, critic, rollouts, training.

One training iteration performs (in order): simulate ``n_episode`` fresh
episodes under the current policy plus exploration noise, push them into the
replay buffer, sample ``n_batch`` stored episodes, take 5 Adam steps on the
posterior predictors, recompute the batch's variational rewards, take 5
critic steps (each followed by a soft target-network update), and one policy
ascent step through the critic's design input.

Every random draw comes from a per-iteration generator derived from the run
seed and the iteration index, so training histories are reproducible and a
checkpoint resume continues the exact same stream.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .episodes import EpisodeBatch, ReplayBuffer
from .posteriors import PredictorSet, encode_policy_input, policy_input_dim
from .rewards import RewardWeights, stage_returns, variational_point_rewards
from .serialization import read_blob, write_blob

# seed-sequence namespaces (spawn-key prefixes)
_NS_INIT = 0
_NS_ITER = 1

HISTORY_COLUMNS = ("iteration", "mean_utility", "critic_loss",
                   "actor_grad_norm", "noise_scale", "psi")


def iteration_rng(seed, iteration):
    """Generator for one training iteration, independent of all others."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_NS_ITER, iteration)))


# ---------------------------------------------------------------------------
# Actor and critic
# ---------------------------------------------------------------------------


class Actor:
    """Deterministic design policy: sigmoid outputs mapped into stage bounds."""

    def __init__(self, net, spec, obs_scale=None):
        self.net = net
        self.spec = spec
        self.obs_scale = obs_scale

    @classmethod
    def create(cls, env, rng, hidden=256):
        spec = env.spec
        net = nn.DenseNet.create(
            [policy_input_dim(spec), hidden, hidden, hidden, spec.design_dim],
            ("relu", "relu", "relu", "sigmoid"), rng)
        return cls(net, spec, env.obs_net_scale)

    def encode(self, stage, designs, observations):
        return encode_policy_input(self.spec, stage, designs, observations,
                                   self.obs_scale)

    def _map(self, stage, squashed):
        lo = self.spec.design_lower[stage]
        span = self.spec.design_upper[stage] - lo
        return lo + span * squashed

    def design(self, stage, designs, observations):
        """Deterministic designs (n, N_d) for stage ``stage`` histories."""
        out, _ = nn.forward(self.net, self.encode(stage, designs, observations))
        return self._map(stage, out)

    def params(self):
        return self.net.params()


class Critic:
    """Action-value net over (actor input, candidate design) pairs."""

    def __init__(self, net, spec, obs_scale=None):
        self.net = net
        self.spec = spec
        self.obs_scale = obs_scale

    @classmethod
    def create(cls, env, rng, hidden=256):
        spec = env.spec
        net = nn.DenseNet.create(
            [policy_input_dim(spec) + spec.design_dim, hidden, hidden, hidden, 1],
            ("relu", "relu", "relu", "identity"), rng)
        return cls(net, spec, env.obs_net_scale)

    def encode(self, stage, designs, observations, candidate):
        hist = encode_policy_input(self.spec, stage, designs, observations,
                                   self.obs_scale)
        return np.concatenate([hist, candidate], axis=1)

    def value(self, stage, designs, observations, candidate):
        out, _ = nn.forward(self.net, self.encode(stage, designs, observations,
                                                  candidate))
        return out[:, 0]

    def copy(self):
        return Critic(self.net.copy(), self.spec, self.obs_scale)

    def params(self):
        return self.net.params()


class UniformRandomPolicy:
    """Baseline policy: designs drawn uniformly inside the stage bounds.

    Owns its generator so evaluations of this baseline are reproducible and
    decoupled from the rollout's observation noise stream.
    """

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))

    def design(self, stage, designs, observations):
        n = designs.shape[0]
        return self.rng.uniform(self.spec.design_lower[stage],
                                self.spec.design_upper[stage],
                                size=(n, self.spec.design_dim))


# ---------------------------------------------------------------------------
# Exploration and rollouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExplorationSchedule:
    """Gaussian design noise with multiplicative per-iteration decay."""

    initial: float = 0.5
    decay: float = 0.9999

    def __post_init__(self):
        if self.initial < 0 or not 0 < self.decay <= 1:
            raise ValueError("noise scale must be >= 0 with decay in (0, 1]")

    def scale(self, iteration):
        return self.initial * self.decay ** iteration


def explore(designs, scale, lower, upper, rng):
    """Perturb designs with N(0, scale^2) noise, clipped back into the box."""
    if scale == 0.0:
        return designs
    noisy = designs + scale * rng.standard_normal(designs.shape)
    return np.clip(noisy, lower, upper)


def rollout(env, actor, n, rng, schedule=None, iteration=0) -> EpisodeBatch:
    """Simulate ``n`` complete episodes under the (possibly perturbed) policy."""
    spec = env.spec
    truths = env.sample_prior(rng, n)
    max_theta = max(spec.theta_dims)
    theta = np.zeros((n, max_theta))
    for i, t in enumerate(truths):
        theta[i, :t.theta.size] = t.theta
    qoi = None
    if spec.qoi_dims is not None:
        qoi = np.zeros((n, max(spec.qoi_dims)))
        for i, t in enumerate(truths):
            z = t.qoi if t.qoi is not None else env.predict_qoi(t)
            qoi[i, :z.size] = z
    designs = np.zeros((n, spec.horizon, spec.design_dim))
    observations = np.zeros((n, spec.horizon, spec.obs_dim))
    non_ig = np.zeros((n, spec.horizon + 1))
    scale = 0.0 if schedule is None else schedule.scale(iteration)
    for k in range(spec.horizon):
        d = actor.design(k, designs[:, :k], observations[:, :k])
        d = explore(d, scale, spec.design_lower[k], spec.design_upper[k], rng)
        designs[:, k] = d
        observations[:, k] = env.observe_batch(truths, d, k, rng)
        prev = designs[:, k - 1] if k else None
        for i in range(n):
            non_ig[i, k] += env.non_ig_reward(k, d[i], None if prev is None else prev[i])
    return EpisodeBatch(m=np.array([t.m for t in truths], dtype=np.int64),
                        theta=theta, qoi=qoi, designs=designs,
                        observations=observations, non_ig=non_ig)


# ---------------------------------------------------------------------------
# Critic regression and the policy gradient
# ---------------------------------------------------------------------------


def critic_targets(batch, rewards, critic_target, actor, gamma, psi):
    """Per-(episode, stage) regression targets blending bootstrap and rollout.

    ``psi`` interpolates between the full Monte Carlo return (0) and the
    one-step bootstrapped target (1); the bootstrap at the final action stage
    folds in the terminal reward directly since the action value beyond stage
    N-1 is zero by definition.
    """
    if not 0.0 <= psi <= 1.0:
        raise ValueError("psi must lie in [0, 1]")
    total = rewards.total
    horizon = total.shape[1] - 1
    monte_carlo = stage_returns(rewards, gamma)
    bootstrap = np.empty_like(monte_carlo)
    for k in range(horizon - 1):
        nxt = actor.design(k + 1, batch.designs[:, :k + 1], batch.observations[:, :k + 1])
        q_next = critic_target.value(k + 1, batch.designs[:, :k + 1],
                                     batch.observations[:, :k + 1], nxt)
        bootstrap[:, k] = total[:, k] + gamma * q_next
    bootstrap[:, horizon - 1] = total[:, horizon - 1] + gamma * total[:, horizon]
    return psi * bootstrap + (1.0 - psi) * monte_carlo


def critic_update(critic, batch, targets, adam, lr):
    """One Adam step on the mean squared error over all (episode, stage) pairs."""
    n, horizon = len(batch), batch.horizon
    count = n * horizon
    loss = 0.0
    grads_total = None
    for k in range(horizon):
        x = critic.encode(k, batch.designs[:, :k], batch.observations[:, :k],
                          batch.designs[:, k])
        out, tape = nn.forward(critic.net, x)
        diff = out[:, 0] - targets[:, k]
        loss += float(diff @ diff)
        grads, _ = nn.backward(critic.net, tape, (2.0 / count) * diff[:, None])
        grads_total = grads if grads_total is None else \
            [a + b for a, b in zip(grads_total, grads)]
    nn.check_finite(grads_total, context="critic update")
    nn.adam_step(critic.params(), grads_total, adam, lr)
    return loss / count


def policy_objective(actor, critic, batch) -> float:
    """Batch-mean critic value of the actor's own designs (ascent target)."""
    n, horizon = len(batch), batch.horizon
    total = 0.0
    for k in range(horizon):
        d = actor.design(k, batch.designs[:, :k], batch.observations[:, :k])
        q = critic.value(k, batch.designs[:, :k], batch.observations[:, :k], d)
        total += float(q.sum()) / n
    return total


def policy_objective_grads(actor, critic, batch):
    """Actor-parameter gradients of :func:`policy_objective`.

    The gradient path runs through the critic's design input only (its
    parameters and the history part of its input are constants here), then
    through the design's affine bound mapping into the actor.
    """
    n, horizon = len(batch), batch.horizon
    spec = actor.spec
    grads_total = None
    for k in range(horizon):
        x_actor = actor.encode(k, batch.designs[:, :k], batch.observations[:, :k])
        squashed, tape_a = nn.forward(actor.net, x_actor)
        d = actor._map(k, squashed)
        x_critic = np.concatenate([x_actor, d], axis=1)
        _, tape_c = nn.forward(critic.net, x_critic)
        _, d_input = nn.backward(critic.net, tape_c, np.full((n, 1), 1.0 / n))
        d_design = d_input[:, -spec.design_dim:]
        span = spec.design_upper[k] - spec.design_lower[k]
        grads, _ = nn.backward(actor.net, tape_a, d_design * span)
        grads_total = grads if grads_total is None else \
            [a + b for a, b in zip(grads_total, grads)]
    nn.check_finite(grads_total, context="policy gradient")
    return grads_total


def policy_gradient_step(actor, critic, batch, adam, lr):
    """One Adam ascent step on the policy objective; returns the grad norm."""
    grads = policy_objective_grads(actor, critic, batch)
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    nn.adam_step(actor.params(), [-g for g in grads], adam, lr)
    return norm


# ---------------------------------------------------------------------------
# Training configuration and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run (defaults at published values)."""

    mode: str = "terminal"
    weights: RewardWeights = field(default_factory=RewardWeights)
    n_update: int = 10001
    n_episode: int = 1000
    n_batch: int = 10000
    buffer_capacity: int = 1_000_000
    predictor_steps: int = 5
    critic_steps: int = 5
    lr_actor: float = 5e-4
    lr_critic: float = 1e-3
    lr_predictor: float = 1e-3
    lr_decay: float = 0.9999
    noise_initial: float = 0.5
    noise_decay: float = 0.9999
    target_rate: float = 0.1
    gamma: float | None = None          # None: 1.0 terminal / 0.9 incremental
    hidden: int = 256
    param_family: str = "gmm"
    qoi_family: str = "gmm"
    n_mixture: int = 8
    n_trans: int = 4
    flow_feature_hidden: tuple | None = None
    use_model: bool | None = None
    use_param: bool = True
    use_qoi: bool = False
    backend: str | None = None

    def __post_init__(self):
        if self.mode not in (PredictorSet.TERMINAL, PredictorSet.INCREMENTAL):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        counts = (self.n_episode, self.n_batch, self.buffer_capacity,
                  self.predictor_steps, self.critic_steps)
        if self.n_update < 0 or min(counts) <= 0:
            raise ValueError("all training counts must be positive")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("discount factor must lie in [0, 1]")
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError("target update rate must lie in (0, 1]")

    @property
    def resolved_gamma(self):
        if self.gamma is not None:
            return self.gamma
        return 1.0 if self.mode == PredictorSet.TERMINAL else 0.9

    def psi(self, iteration):
        if self.mode == PredictorSet.INCREMENTAL:
            return 1.0
        if self.n_update <= 1:
            return 1.0
        return min(1.0, iteration / (self.n_update - 1))

    def schedule(self):
        return ExplorationSchedule(self.noise_initial, self.noise_decay)


@dataclass
class TrainState:
    """Everything that evolves during training (checkpointable)."""

    actor: Actor
    critic: Critic
    critic_target: Critic
    predictors: PredictorSet
    buffer: ReplayBuffer
    adam_actor: nn.AdamState
    adam_critic: nn.AdamState
    iteration: int = 0
    history: list = field(default_factory=list)

    def named_dense_nets(self):
        named = [("actor", self.actor.net), ("critic", self.critic.net),
                 ("critic_target", self.critic_target.net)]
        named.extend(self.predictors.named_dense_nets())
        return named


def init_state(env, config: TrainConfig, seed) -> TrainState:
    config.weights.validate_for(env)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_NS_INIT,)))
    actor = Actor.create(env, rng, hidden=config.hidden)
    critic = Critic.create(env, rng, hidden=config.hidden)
    predictors = PredictorSet.create(
        env, config.mode, rng,
        use_model=config.use_model, use_param=config.use_param,
        use_qoi=config.use_qoi, param_family=config.param_family,
        qoi_family=config.qoi_family, n_mixture=config.n_mixture,
        n_trans=config.n_trans, hidden=config.hidden,
        flow_feature_hidden=config.flow_feature_hidden, backend=config.backend)
    return TrainState(
        actor=actor, critic=critic, critic_target=critic.copy(),
        predictors=predictors, buffer=ReplayBuffer(config.buffer_capacity),
        adam_actor=nn.AdamState.for_params(actor.params()),
        adam_critic=nn.AdamState.for_params(critic.params()))


def train_iteration(env, state: TrainState, config: TrainConfig, seed):
    """Run one full training iteration and append its history row."""
    i = state.iteration
    rng = iteration_rng(seed, i)
    decay = config.lr_decay ** i
    schedule = config.schedule()

    fresh = rollout(env, state.actor, config.n_episode, rng,
                    schedule=schedule, iteration=i)
    state.buffer.add(fresh)
    batch = state.buffer.sample(min(config.n_batch, len(state.buffer)), rng)

    encodings = {k: state.predictors.encode(batch.designs[:, :k],
                                            batch.observations[:, :k])
                 for k in state.predictors.stages}
    for _ in range(config.predictor_steps):
        state.predictors.adam_update(encodings, batch, config.lr_predictor * decay)

    rewards = variational_point_rewards(batch, state.predictors, config.weights)
    mean_utility = float(rewards.episode_total().mean())

    psi = config.psi(i)
    gamma = config.resolved_gamma
    losses = []
    for _ in range(config.critic_steps):
        targets = critic_targets(batch, rewards, state.critic_target,
                                 state.actor, gamma, psi)
        losses.append(critic_update(state.critic, batch, targets,
                                    state.adam_critic, config.lr_critic * decay))
        nn.soft_update(state.critic_target.params(), state.critic.params(),
                       config.target_rate)
    critic_loss = float(np.mean(losses))

    grad_norm = policy_gradient_step(state.actor, state.critic, batch,
                                     state.adam_actor, config.lr_actor * decay)

    row = (float(i), mean_utility, critic_loss, grad_norm,
           float(schedule.scale(i)), float(psi))
    if not np.all(np.isfinite(row)):
        raise FloatingPointError(
            f"non-finite training statistic at iteration {i}: "
            f"{dict(zip(HISTORY_COLUMNS, row))}")
    state.history.append(row)
    state.iteration += 1
    return row


def train(env, config: TrainConfig, seed, state: TrainState | None = None,
          callback=None, until=None) -> TrainState:
    """Run up to ``config.n_update`` iterations (continuing ``state`` if given).

    ``until`` caps the stopping iteration below ``n_update`` (for staged runs);
    schedules always follow ``config.n_update``, so a capped run then resumed
    matches an uninterrupted one exactly.
    """
    if state is None:
        state = init_state(env, config, seed)
    target = config.n_update if until is None else min(until, config.n_update)
    while state.iteration < target:
        row = train_iteration(env, state, config, seed)
        if callback is not None:
            callback(state, row)
    return state


# ---------------------------------------------------------------------------
# History formatting and checkpoints
# ---------------------------------------------------------------------------


def history_csv(history) -> str:
    """Render history rows as CSV (fixed shortest-round-trip float format)."""
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for row in history:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def _adam_entries(state: TrainState):
    entries = [("actor", state.adam_actor), ("critic", state.adam_critic)]
    entries.extend(sorted(state.predictors.adam_states().items()))
    return entries


def save_checkpoint(path, state: TrainState, config: TrainConfig, seed, extra=None):
    """Write the complete training state as a single array blob.

    ``extra`` adds JSON-serializable metadata (e.g. a run-configuration
    fingerprint) to the header without affecting what :func:`load_checkpoint`
    restores.
    """
    arrays, manifest = [], []
    for name, net in state.named_dense_nets():
        params = net.params()
        manifest.append({"name": name, "count": len(params), "spec": net.spec()})
        arrays.extend(params)
    adam_meta = []
    for name, adam in _adam_entries(state):
        adam_meta.append({"name": name, "count": len(adam.m), "t": adam.t})
        arrays.extend(adam.m)
        arrays.extend(adam.v)
    stored = state.buffer.stored_batch()
    buffer_meta = {"size": len(stored) if stored is not None else 0,
                   "position": state.buffer.position,
                   "capacity": state.buffer.capacity,
                   "has_qoi": stored is not None and stored.qoi is not None}
    if stored is not None:
        arrays.extend([stored.m.astype(np.float64), stored.theta,
                       stored.designs, stored.observations, stored.non_ig])
        if stored.qoi is not None:
            arrays.append(stored.qoi)
    history = np.array(state.history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
    arrays.append(history)
    header = {
        "kind": "train-checkpoint",
        "iteration": state.iteration,
        "seed": int(seed),
        "config": config_to_dict(config),
        "nets": manifest,
        "adam": adam_meta,
        "buffer": buffer_meta,
    }
    if extra:
        header.update(extra)
    write_blob(path, header, arrays)


def load_checkpoint(path, env) -> tuple[TrainState, TrainConfig, int]:
    header, arrays = read_blob(path)
    if header.get("kind") != "train-checkpoint":
        raise ValueError(f"{path}: not a training checkpoint")
    config = config_from_dict(header["config"])
    state = init_state(env, config, header["seed"])
    cursor = 0
    for entry, (name, net) in zip(header["nets"], state.named_dense_nets()):
        if entry["name"] != name:
            raise ValueError(f"checkpoint net order mismatch: {entry['name']} != {name}")
        net.set_params(arrays[cursor:cursor + entry["count"]])
        cursor += entry["count"]
    for entry, (name, adam) in zip(header["adam"], _adam_entries(state)):
        if entry["name"] != name:
            raise ValueError(f"checkpoint optimizer order mismatch: {entry['name']} != {name}")
        count = entry["count"]
        adam.m = [np.asarray(a) for a in arrays[cursor:cursor + count]]
        adam.v = [np.asarray(a) for a in arrays[cursor + count:cursor + 2 * count]]
        adam.t = int(entry["t"])
        cursor += 2 * count
    meta = header["buffer"]
    if meta["size"]:
        m, theta, designs, observations, non_ig = arrays[cursor:cursor + 5]
        cursor += 5
        qoi = None
        if meta["has_qoi"]:
            qoi = arrays[cursor]
            cursor += 1
        batch = EpisodeBatch(m=m.astype(np.int64), theta=theta, qoi=qoi,
                             designs=designs, observations=observations,
                             non_ig=non_ig)
        state.buffer.restore(batch, meta["position"])
    state.iteration = int(header["iteration"])
    state.history = [tuple(row) for row in arrays[-1]]
    return state, config, int(header["seed"])


def config_to_dict(config: TrainConfig) -> dict:
    out = {}
    for key, value in vars(config).items():
        if key == "weights":
            out[key] = vars(value).copy()
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    weights = data.pop("weights", None)
    kwargs = dict(data)
    if weights is not None:
        kwargs["weights"] = RewardWeights(**weights)
    if kwargs.get("flow_feature_hidden") is not None:
        kwargs["flow_feature_hidden"] = tuple(kwargs["flow_feature_hidden"])
    return TrainConfig(**kwargs)
