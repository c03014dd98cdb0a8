"""Exact-enumeration oracles for tabular problems.

Everything here is computed by brute force over the finite joint space of a
:class:`~seqoed.environments.toy.DiscreteToyEnv` under a deterministic
tabular policy: posteriors at every history node, exact expected utilities
in four estimator forms, and exact variational utilities for arbitrary
approximate posterior tables.  None of it shares code with the production
reward path, so agreement between the two is evidence, not tautology.

The certified identities:

* the four information-gain estimators — terminal/incremental, each in
  KL form and in one-point (log-ratio at the generating sample) form —
  have identical expected values under the policy;
* the variational expected utility with exact posteriors as the
  approximating distributions equals that common value, and any other
  approximating distribution gives a value no larger (lower bound);
* the joint-atom KL over (model, parameter) pairs decomposes into the
  model-indicator KL plus the model-averaged parameter KL;
* omitting a reference prior term shifts every policy's utility by the
  same constant.

:func:`certify_identities` packages these checks over random problem
instances into a JSON-serializable report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import prob
from .environments.toy import DiscreteToyEnv, make_discrete_toy
from .episodes import EpisodeBatch
from .rewards import RewardWeights

TERMINAL = "terminal"
INCREMENTAL = "incremental"


# ---------------------------------------------------------------------------
# Deterministic tabular policies
# ---------------------------------------------------------------------------


class TabularPolicy:
    """Deterministic design policy: observation-index prefix -> design index.

    Under a deterministic policy the design sequence is a function of the
    observation sequence alone, so the entire reachable history tree is
    indexed by tuples of observation atoms.
    """

    def __init__(self, table, horizon, n_obs):
        self.table = dict(table)
        self.horizon = int(horizon)
        self.n_obs = int(n_obs)
        for prefix in self._all_prefixes():
            if prefix not in self.table:
                raise ValueError(f"policy table missing prefix {prefix}")

    def _all_prefixes(self):
        out, level = [()], [()]
        for _ in range(self.horizon - 1):
            level = [p + (y,) for p in level for y in range(self.n_obs)]
            out.extend(level)
        return out

    def design_index(self, y_prefix) -> int:
        return self.table[tuple(y_prefix)]

    def as_value_policy(self, env: DiscreteToyEnv) -> "TabularValuePolicy":
        """Adapter exposing the rollout-policy protocol (value-space I/O)."""
        return TabularValuePolicy(env, self)

    @classmethod
    def random(cls, env: DiscreteToyEnv, rng) -> "TabularPolicy":
        n_obs, n_designs = env.obs_values.size, env.design_values.size
        table = {}
        prefixes = [()]
        for _ in range(env.spec.horizon):
            for p in prefixes:
                table[p] = int(rng.integers(0, n_designs))
            prefixes = [p + (y,) for p in prefixes for y in range(n_obs)]
        return cls(table, env.spec.horizon, n_obs)

    @classmethod
    def constant(cls, env: DiscreteToyEnv, design_idx=0) -> "TabularPolicy":
        table = {}
        prefixes = [()]
        for _ in range(env.spec.horizon):
            for p in prefixes:
                table[p] = int(design_idx)
            prefixes = [p + (y,) for p in prefixes for y in range(env.obs_values.size)]
        return cls(table, env.spec.horizon, env.obs_values.size)

    @classmethod
    def from_policy_fn(cls, env: DiscreteToyEnv, policy_fn) -> "TabularPolicy":
        """Tabulate a continuous policy by walking the history tree.

        ``policy_fn(stage, designs, observations)`` receives the value-space
        history so far (arrays of shape (k, 1)) and returns a design vector,
        which is snapped to the nearest design atom.
        """
        table = {}

        def walk(prefix, designs, observations):
            k = len(prefix)
            if k == env.spec.horizon:
                return
            d = policy_fn(k, np.array(designs).reshape(k, 1),
                          np.array(observations).reshape(k, 1))
            d_idx = env.design_index(np.asarray(d))
            table[prefix] = d_idx
            for y in range(env.obs_values.size):
                walk(prefix + (y,), designs + [env.design_values[d_idx]],
                     observations + [env.obs_values[y]])

        walk((), [], [])
        return cls(table, env.spec.horizon, env.obs_values.size)


class TabularValuePolicy:
    """Rolls a tabular policy out on the live environment.

    ``design(stage, designs, observations)`` maps each episode's observation
    values back to atom indices, looks the next design atom up in the table,
    and returns its value — the same protocol deterministic network policies
    follow.
    """

    def __init__(self, env: DiscreteToyEnv, policy: TabularPolicy):
        if policy.horizon != env.spec.horizon or policy.n_obs != env.obs_values.size:
            raise ValueError("policy shape does not match environment")
        self.env = env
        self.policy = policy

    def design(self, stage, designs, observations):
        out = np.empty((designs.shape[0], 1))
        for i in range(designs.shape[0]):
            prefix = tuple(self.env.obs_index(y) for y in observations[i])
            out[i, 0] = self.env.design_values[self.policy.design_index(prefix)]
        return out


# ---------------------------------------------------------------------------
# History-tree enumeration
# ---------------------------------------------------------------------------


@dataclass
class NodeTables:
    """Exact distributions at one history node."""

    prefix: tuple
    prob: float                 # marginal probability of reaching this node
    joint: list                 # per model: unnormalized (T_m,) joint weights
    model: np.ndarray           # (M,) model posterior
    theta: list                 # per model: (T_m,) parameter posterior
    z: list | None              # per model: (Z_m,) predictive posterior
    design: int | None          # policy's design here (None at leaves)


class EnumeratedProblem:
    """A tabular environment plus a tabular policy, fully enumerated."""

    def __init__(self, env: DiscreteToyEnv, policy: TabularPolicy):
        if policy.horizon != env.spec.horizon or policy.n_obs != env.obs_values.size:
            raise ValueError("policy shape does not match environment")
        self.env = env
        self.policy = policy
        self.horizon = env.spec.horizon
        self.n_models = env.spec.n_models
        if env.qoi_values is not None:
            self.z_atoms = [np.unique(v) for v in env.qoi_values]
            self.z_index = [np.searchsorted(a, v)
                            for a, v in zip(self.z_atoms, env.qoi_values)]
        else:
            self.z_atoms = None
            self.z_index = None
        self.nodes: dict[tuple, NodeTables] = {}
        root_joint = [env.model_prior[m] * env.theta_priors[m]
                      for m in range(self.n_models)]
        self._build((), root_joint)

    def _tables(self, prefix, joint):
        prob = float(sum(w.sum() for w in joint))
        model = np.array([w.sum() / prob for w in joint])
        theta = [w / w.sum() if w.sum() > 0 else np.full(w.size, 1.0 / w.size)
                 for w in joint]
        z = None
        if self.z_atoms is not None:
            z = [np.bincount(self.z_index[m], weights=theta[m],
                             minlength=self.z_atoms[m].size)
                 for m in range(self.n_models)]
        design = self.policy.design_index(prefix) if len(prefix) < self.horizon else None
        return NodeTables(prefix=prefix, prob=prob, joint=joint, model=model,
                          theta=theta, z=z, design=design)

    def _build(self, prefix, joint):
        node = self._tables(prefix, joint)
        self.nodes[prefix] = node
        if node.design is None:
            return
        for y in range(self.env.obs_values.size):
            child_joint = [joint[m] * self.env.like_tables[m][:, node.design, y]
                           for m in range(self.n_models)]
            self._build(prefix + (y,), child_joint)

    # -- convenience ------------------------------------------------------------

    def leaves(self):
        return [n for n in self.nodes.values() if len(n.prefix) == self.horizon]

    def node(self, prefix) -> NodeTables:
        return self.nodes[tuple(prefix)]

    def chain(self, leaf_prefix):
        """Nodes from the root to a leaf, inclusive."""
        return [self.nodes[tuple(leaf_prefix[:k])] for k in range(self.horizon + 1)]

    def design_values_for(self, leaf_prefix):
        idx = [self.nodes[tuple(leaf_prefix[:k])].design for k in range(self.horizon)]
        return self.env.design_values[np.array(idx)].reshape(self.horizon, 1)

    def atom_weight(self, node, m, t):
        return node.joint[m][t]


def exact_posterior(env: DiscreteToyEnv, design_indices, obs_indices) -> NodeTables:
    """Posterior tables after an arbitrary (design, observation) sequence.

    Independent of any policy; used to cross-check history-conditioned
    predictions for histories that need not come from a tabular policy.
    """
    joint = [env.model_prior[m] * env.theta_priors[m]
             for m in range(env.spec.n_models)]
    for d, y in zip(design_indices, obs_indices):
        joint = [joint[m] * env.like_tables[m][:, d, y]
                 for m in range(env.spec.n_models)]
    prob = float(sum(w.sum() for w in joint))
    model = np.array([w.sum() / prob for w in joint])
    theta = [w / w.sum() for w in joint]
    z = None
    if env.qoi_values is not None:
        z_atoms = [np.unique(v) for v in env.qoi_values]
        z = [np.bincount(np.searchsorted(z_atoms[m], env.qoi_values[m]),
                         weights=theta[m], minlength=z_atoms[m].size)
             for m in range(env.spec.n_models)]
    return NodeTables(prefix=tuple(obs_indices), prob=prob, joint=joint,
                      model=model, theta=theta, z=z, design=None)


# ---------------------------------------------------------------------------
# Exact expected utilities
# ---------------------------------------------------------------------------


def _kl_gain(node: NodeTables, ref: NodeTables, weights: RewardWeights) -> float:
    gain = 0.0
    if weights.model > 0:
        gain += weights.model * prob.kl_discrete(node.model, ref.model)
    for m in range(node.model.size):
        inner = 0.0
        if weights.param > 0:
            inner += weights.param * prob.kl_discrete(node.theta[m], ref.theta[m])
        if weights.qoi > 0:
            inner += weights.qoi * prob.kl_discrete(node.z[m], ref.z[m])
        gain += node.model[m] * inner
    return gain


def exact_expected_utility(problem: EnumeratedProblem, weights: RewardWeights,
                           mode: str) -> float:
    """Expected information gain in KL form under the tabular policy."""
    if mode == TERMINAL:
        root = problem.node(())
        return sum(leaf.prob * _kl_gain(leaf, root, weights)
                   for leaf in problem.leaves())
    if mode == INCREMENTAL:
        total = 0.0
        for node in problem.nodes.values():
            if node.prefix:
                parent = problem.node(node.prefix[:-1])
                total += node.prob * _kl_gain(node, parent, weights)
        return total
    raise ValueError(f"unknown mode {mode!r}")


def _point_ratio(node: NodeTables, ref: NodeTables, m, t, problem,
                 weights: RewardWeights) -> float:
    val = 0.0
    if weights.model > 0:
        val += weights.model * (np.log(node.model[m])
                                - (np.log(ref.model[m]) if weights.keep_model_prior or ref.prefix else 0.0))
    if weights.param > 0:
        val += weights.param * (np.log(node.theta[m][t])
                                - (np.log(ref.theta[m][t]) if weights.keep_param_prior or ref.prefix else 0.0))
    if weights.qoi > 0:
        zi = problem.z_index[m][t]
        val += weights.qoi * (np.log(node.z[m][zi])
                              - (np.log(ref.z[m][zi]) if weights.keep_qoi_prior or ref.prefix else 0.0))
    return val


def exact_one_point_utility(problem: EnumeratedProblem, weights: RewardWeights,
                            mode: str) -> float:
    """Expected one-point (sample-ratio) information gain; exact expectation.

    Prior-term flags on ``weights`` apply only at the stage-0 reference —
    intermediate ratios in the incremental chain always keep both sides.
    """
    total = 0.0
    for leaf in problem.leaves():
        chain = problem.chain(leaf.prefix)
        for m in range(problem.n_models):
            for t in range(problem.env.theta_priors[m].size):
                w = problem.atom_weight(leaf, m, t)
                if w == 0.0:
                    continue
                if mode == TERMINAL:
                    val = _point_ratio(leaf, chain[0], m, t, problem, weights)
                elif mode == INCREMENTAL:
                    val = sum(_point_ratio(chain[k + 1], chain[k], m, t, problem, weights)
                              for k in range(problem.horizon))
                else:
                    raise ValueError(f"unknown mode {mode!r}")
                total += w * val
    return total


# ---------------------------------------------------------------------------
# Exact variational utilities
# ---------------------------------------------------------------------------


@dataclass
class QTables:
    """Approximate posterior tables at one history node."""

    model: np.ndarray | None    # (M,)
    theta: list | None          # per model (T_m,)
    z: list | None              # per model (Z_m,)


def posterior_q_provider(problem: EnumeratedProblem):
    """The exact posteriors, packaged as an approximating-distribution source."""
    def provider(stage, prefix):
        node = problem.node(prefix)
        return QTables(model=node.model, theta=node.theta, z=node.z)
    return provider


def perturbed_q_provider(problem: EnumeratedProblem, rng, strength=0.5):
    """Exact posteriors mixed with random positive tables (still normalized)."""
    mixes = {}

    def perturb(p):
        noise = rng.dirichlet(np.ones(p.size))
        eps = strength * rng.random()
        q = (1 - eps) * p + eps * noise
        return q / q.sum()

    def provider(stage, prefix):
        key = tuple(prefix)
        if key not in mixes:
            node = problem.node(key)
            mixes[key] = QTables(
                model=perturb(node.model),
                theta=[perturb(t) for t in node.theta],
                z=None if node.z is None else [perturb(z) for z in node.z],
            )
        return mixes[key]

    return provider


def _q_point_ratio(q_num: QTables, q_den, m, t, problem, weights: RewardWeights,
                   den_is_prior: bool) -> float:
    """Log-ratio at atom (m, t) between two table sets.

    ``q_den`` may be ``None`` only when ``den_is_prior`` — prior terms obey
    the keep/omit flags; intermediate denominators are always kept.
    """
    val = 0.0

    def ratio(num, den, keep_flag):
        if den_is_prior and not keep_flag:
            return np.log(num)
        return np.log(num) - np.log(den)

    if weights.model > 0:
        val += weights.model * ratio(q_num.model[m], q_den.model[m],
                                     weights.keep_model_prior)
    if weights.param > 0:
        val += weights.param * ratio(q_num.theta[m][t], q_den.theta[m][t],
                                     weights.keep_param_prior)
    if weights.qoi > 0:
        zi = problem.z_index[m][t]
        val += weights.qoi * ratio(q_num.z[m][zi], q_den.z[m][zi],
                                   weights.keep_qoi_prior)
    return val


def exact_variational_utility(problem: EnumeratedProblem, weights: RewardWeights,
                              mode: str, q_provider) -> float:
    """Exact expectation of the variational one-point rewards.

    ``q_provider(stage, prefix)`` supplies the approximating tables used at
    stages ``>= 1``; stage 0 is always the prior (by definition of the
    variational scheme, not a convention of this function).
    """
    root = problem.node(())
    prior_q = QTables(model=root.model, theta=root.theta, z=root.z)
    total = 0.0
    for leaf in problem.leaves():
        if mode == TERMINAL:
            ratios = [(q_provider(problem.horizon, leaf.prefix), prior_q, True)]
        elif mode == INCREMENTAL:
            ratios = []
            for k in range(problem.horizon):
                num = q_provider(k + 1, leaf.prefix[:k + 1])
                den = prior_q if k == 0 else q_provider(k, leaf.prefix[:k])
                ratios.append((num, den, k == 0))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        for m in range(problem.n_models):
            for t in range(problem.env.theta_priors[m].size):
                w = problem.atom_weight(leaf, m, t)
                if w == 0.0:
                    continue
                total += w * sum(_q_point_ratio(num, den, m, t, problem, weights, is0)
                                 for num, den, is0 in ratios)
    return total


# ---------------------------------------------------------------------------
# Joint-KL decomposition and episode materialization
# ---------------------------------------------------------------------------


def exact_joint_utility(problem: EnumeratedProblem) -> float:
    """Terminal KL over joint (model, parameter) atoms.

    Decomposition identity: equals the model-indicator utility plus the
    model-averaged parameter utility (both weights at 1).
    """
    root = problem.node(())
    total = 0.0
    for leaf in problem.leaves():
        p = np.concatenate([w / leaf.prob for w in leaf.joint])
        q = np.concatenate([w for w in root.joint])
        total += leaf.prob * prob.kl_discrete(p, q)
    return total


def enumerate_episode_batch(problem: EnumeratedProblem):
    """Materialize every (model, parameter, observation-path) atom.

    Returns ``(batch, weights)`` where ``weights`` are the exact joint
    probabilities (summing to 1).  Weighted means over this batch turn any
    per-episode estimator into an exact expectation, which is how the
    production reward path is compared against the oracle without
    Monte Carlo error.
    """
    env = problem.env
    rows_m, rows_theta, rows_qoi, rows_d, rows_y, rows_w = [], [], [], [], [], []
    for leaf in problem.leaves():
        designs = problem.design_values_for(leaf.prefix)
        obs = env.obs_values[np.array(leaf.prefix)].reshape(-1, 1)
        for m in range(problem.n_models):
            for t in range(env.theta_priors[m].size):
                w = problem.atom_weight(leaf, m, t)
                if w == 0.0:
                    continue
                rows_m.append(m)
                rows_theta.append([env.theta_values[m][t]])
                if env.qoi_values is not None:
                    rows_qoi.append([env.qoi_values[m][t]])
                rows_d.append(designs)
                rows_y.append(obs)
                rows_w.append(w)
    n = len(rows_m)
    batch = EpisodeBatch(
        m=np.array(rows_m),
        theta=np.array(rows_theta),
        qoi=np.array(rows_qoi) if rows_qoi else None,
        designs=np.stack(rows_d),
        observations=np.stack(rows_y),
        non_ig=np.zeros((n, problem.horizon + 1)),
    )
    return batch, np.array(rows_w)


class TablePredictors:
    """Predictor-protocol adapter backed by per-node tables.

    Lets the production reward assembly run against exact (or deliberately
    perturbed) posteriors on a tabular problem.  ``encode`` returns the
    per-episode (design, observation) index prefixes instead of a float
    matrix; the query methods look atoms up in the supplied tables.
    """

    def __init__(self, env: DiscreteToyEnv, mode: str, q_provider):
        self.env = env
        self.mode = mode
        self.q_provider = q_provider

    @property
    def stages(self):
        horizon = self.env.spec.horizon
        if self.mode == "terminal":
            return [horizon]
        return list(range(1, horizon + 1))

    def encode(self, designs, observations):
        d_idx = [[self.env.design_index(d) for d in ep] for ep in designs]
        y_idx = [[self.env.obs_index(y) for y in ep] for ep in observations]
        return list(zip(d_idx, y_idx))

    def _tables(self, stage, cond, row):
        _, y_idx = cond[row]
        return self.q_provider(stage, tuple(y_idx[:stage]))

    def log_model(self, stage, cond, m):
        if stage == 0:
            return self.env.log_prior_model(m)
        return np.log([self._tables(stage, cond, i).model[mi]
                       for i, mi in enumerate(m)])

    def log_param(self, stage, cond, m, theta):
        if stage == 0:
            out = np.empty(len(m))
            for i, mi in enumerate(m):
                out[i] = self.env.log_prior_theta(mi, theta[i, :1])[0]
            return out
        out = np.empty(len(m))
        for i, mi in enumerate(m):
            t = self.env.theta_index(mi, theta[i, :1])
            out[i] = np.log(self._tables(stage, cond, i).theta[mi][t])
        return out

    def log_qoi(self, stage, cond, m, qoi):
        if stage == 0:
            out = np.empty(len(m))
            for i, mi in enumerate(m):
                lp = self.env.log_prior_qoi(mi, qoi[i, :1][None, :])
                if lp is None:
                    return None
                out[i] = lp[0]
            return out
        z_atoms = [np.unique(v) for v in self.env.qoi_values]
        out = np.empty(len(m))
        for i, mi in enumerate(m):
            zi = int(np.searchsorted(z_atoms[mi], qoi[i, 0]))
            out[i] = np.log(self._tables(stage, cond, i).z[mi][zi])
        return out


# ---------------------------------------------------------------------------
# Identity certification
# ---------------------------------------------------------------------------


def certify_identities(seed=0, n_problems=20, n_perturbations=40, tol=1e-9,
                       horizon=2) -> dict:
    """Numerically certify the estimator identities on random tabular problems.

    For each random (environment, policy, weights) instance this computes the
    four exact estimators, the variational utility at the exact posterior and
    at random perturbations of it, the joint-KL decomposition, and the
    prior-omission shift under two different policies.  Returns a
    JSON-serializable report with a top-level ``"pass"`` flag.
    """
    rng = np.random.default_rng(seed)
    instances = []
    overall = {
        "max_estimator_spread": 0.0,
        "max_tightness_gap": 0.0,
        "bound_violations": 0,
        "max_decomposition_gap": 0.0,
        "max_prior_shift_gap": 0.0,
    }
    for idx in range(n_problems):
        env = make_discrete_toy(rng, horizon=horizon, with_qoi=True)
        policy = TabularPolicy.random(env, rng)
        problem = EnumeratedProblem(env, policy)
        weights = RewardWeights(
            model=float(rng.choice([0.5, 1.0, 2.0])),
            param=float(rng.choice([0.5, 1.0, 2.0])),
            qoi=float(rng.choice([0.0, 1.0])),
            keep_qoi_prior=True,
        )

        estimators = {
            "terminal_kl": float(exact_expected_utility(problem, weights, TERMINAL)),
            "incremental_kl": float(exact_expected_utility(problem, weights, INCREMENTAL)),
            "terminal_one_point": float(exact_one_point_utility(problem, weights, TERMINAL)),
            "incremental_one_point": float(exact_one_point_utility(problem, weights, INCREMENTAL)),
        }
        vals = list(estimators.values())
        spread = max(vals) - min(vals)
        reference = estimators["terminal_kl"]

        exact_q = posterior_q_provider(problem)
        tight_gap = 0.0
        violations = 0
        for mode in (TERMINAL, INCREMENTAL):
            at_posterior = exact_variational_utility(problem, weights, mode, exact_q)
            tight_gap = max(tight_gap, float(abs(at_posterior - reference)))
            for _ in range(n_perturbations // 2):
                q = perturbed_q_provider(problem, rng)
                val = exact_variational_utility(problem, weights, mode, q)
                if val > reference + tol:
                    violations += 1

        w_m = RewardWeights(model=1.0, param=0.0, qoi=0.0)
        w_t = RewardWeights(model=0.0, param=1.0, qoi=0.0)
        w_mt = RewardWeights(model=1.0, param=1.0, qoi=0.0)
        both = exact_expected_utility(problem, w_mt, TERMINAL)
        decomposition_gap = float(max(
            abs(exact_joint_utility(problem) - both),
            abs(both - exact_expected_utility(problem, w_m, TERMINAL)
                - exact_expected_utility(problem, w_t, TERMINAL))))

        # prior omission: a policy-independent shift
        other = EnumeratedProblem(env, TabularPolicy.random(env, rng))
        w_keep = RewardWeights(param=0.0, qoi=1.0, keep_qoi_prior=True)
        w_omit = RewardWeights(param=0.0, qoi=1.0, keep_qoi_prior=False)
        shift_a = (exact_one_point_utility(problem, w_omit, TERMINAL)
                   - exact_one_point_utility(problem, w_keep, TERMINAL))
        shift_b = (exact_one_point_utility(other, w_omit, TERMINAL)
                   - exact_one_point_utility(other, w_keep, TERMINAL))
        prior_shift_gap = float(abs(shift_a - shift_b))

        instances.append({
            "instance": idx,
            "weights": {"model": weights.model, "param": weights.param,
                        "qoi": weights.qoi},
            "estimators": estimators,
            "estimator_spread": spread,
            "tightness_gap": tight_gap,
            "bound_violations": violations,
            "decomposition_gap": decomposition_gap,
            "prior_shift_gap": prior_shift_gap,
        })
        overall["max_estimator_spread"] = max(overall["max_estimator_spread"], spread)
        overall["max_tightness_gap"] = max(overall["max_tightness_gap"], tight_gap)
        overall["bound_violations"] += violations
        overall["max_decomposition_gap"] = max(overall["max_decomposition_gap"],
                                               decomposition_gap)
        overall["max_prior_shift_gap"] = max(overall["max_prior_shift_gap"],
                                             prior_shift_gap)

    passed = bool(overall["max_estimator_spread"] < tol
                  and overall["max_tightness_gap"] < tol
                  and overall["bound_violations"] == 0
                  and overall["max_decomposition_gap"] < tol
                  and overall["max_prior_shift_gap"] < tol)
    return {
        "seed": seed,
        "n_problems": n_problems,
        "tolerance": tol,
        **overall,
        "pass": passed,
        "instances": instances,
    }
