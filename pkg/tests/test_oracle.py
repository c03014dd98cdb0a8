"""Exact-enumeration oracle tests on discrete tabular problems."""

import json

import numpy as np
import pytest

from seqoed.environments import DiscreteToyEnv, make_discrete_toy
from seqoed.oracle import (
    EnumeratedProblem, TabularPolicy, certify_identities, enumerate_episode_batch,
    exact_expected_utility, exact_joint_utility, exact_one_point_utility,
    exact_posterior, exact_variational_utility, perturbed_q_provider,
    posterior_q_provider,
)
from seqoed.rewards import RewardWeights


def hand_env(horizon=2):
    """Two models, asymmetric likelihoods, injective predictive values."""
    return DiscreteToyEnv(
        model_prior=np.array([0.6, 0.4]),
        theta_priors=[np.array([0.3, 0.7]), np.array([1.0])],
        theta_values=[np.array([-1.0, 1.0]), np.array([0.5])],
        like_tables=[
            np.array([[[0.8, 0.2], [0.5, 0.5]],
                      [[0.1, 0.9], [0.5, 0.5]]]),
            np.array([[[0.6, 0.4], [0.9, 0.1]]]),
        ],
        design_values=np.array([0.0, 1.0]),
        obs_values=np.array([-2.0, 2.0]),
        horizon=horizon,
        qoi_values=[np.array([10.0, 20.0]), np.array([30.0])],
    )


class TestTabularPolicy:
    def test_random_policy_is_complete(self):
        env = make_discrete_toy(np.random.default_rng(0), horizon=3)
        policy = TabularPolicy.random(env, np.random.default_rng(1))
        n_obs = env.obs_values.size
        assert len(policy.table) == sum(n_obs ** k for k in range(3))

    def test_incomplete_table_rejected(self):
        env = hand_env()
        with pytest.raises(ValueError, match="prefix"):
            TabularPolicy({(): 0}, horizon=2, n_obs=2)

    def test_constant_policy(self):
        env = hand_env()
        policy = TabularPolicy.constant(env, design_idx=1)
        assert all(v == 1 for v in policy.table.values())

    def test_from_policy_fn_snaps_designs(self):
        env = hand_env()

        def fn(stage, designs, observations):
            return np.array([0.4 if stage == 0 else 0.9])

        policy = TabularPolicy.from_policy_fn(env, fn)
        assert policy.design_index(()) == 0
        assert policy.design_index((0,)) == 1
        assert policy.design_index((1,)) == 1


class TestEnumeration:
    def test_leaf_probabilities_sum_to_one(self):
        env = make_discrete_toy(np.random.default_rng(2), horizon=2)
        problem = EnumeratedProblem(env, TabularPolicy.random(env, np.random.default_rng(3)))
        assert np.isclose(sum(leaf.prob for leaf in problem.leaves()), 1.0, atol=1e-12)

    def test_single_step_posterior_matches_bayes_rule(self):
        env = hand_env(horizon=1)
        node = exact_posterior(env, [0], [0])
        # direct Bayes computation, independent of the tree recursion
        joint0 = 0.6 * np.array([0.3, 0.7]) * np.array([0.8, 0.1])
        joint1 = 0.4 * np.array([1.0]) * np.array([0.6])
        evidence = joint0.sum() + joint1.sum()
        assert np.isclose(node.prob, evidence, atol=1e-12)
        assert np.allclose(node.model, [joint0.sum() / evidence, joint1.sum() / evidence])
        assert np.allclose(node.theta[0], joint0 / joint0.sum())
        assert np.allclose(node.theta[1], [1.0])

    def test_posterior_chain_updates_sequentially(self):
        env = hand_env(horizon=2)
        policy = TabularPolicy.constant(env, design_idx=0)
        problem = EnumeratedProblem(env, policy)
        leaf = problem.node((0, 1))
        # restart from scratch with both observations at once
        direct = exact_posterior(env, [0, 0], [0, 1])
        assert np.allclose(leaf.model, direct.model, atol=1e-12)
        for m in range(2):
            assert np.allclose(leaf.theta[m], direct.theta[m], atol=1e-12)

    def test_qoi_tables_aggregate_parameter_atoms(self):
        env = hand_env(horizon=1)
        node = exact_posterior(env, [1], [1])
        # injective parameter-to-prediction map: tables must coincide
        for m in range(2):
            assert np.allclose(node.z[m], node.theta[m], atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_four_estimators_agree(seed):
    rng = np.random.default_rng(seed)
    env = make_discrete_toy(rng, horizon=2, with_qoi=True)
    problem = EnumeratedProblem(env, TabularPolicy.random(env, rng))
    weights = RewardWeights(model=1.0, param=0.5, qoi=1.0, keep_qoi_prior=True)
    vals = [
        exact_expected_utility(problem, weights, "terminal"),
        exact_expected_utility(problem, weights, "incremental"),
        exact_one_point_utility(problem, weights, "terminal"),
        exact_one_point_utility(problem, weights, "incremental"),
    ]
    assert max(vals) - min(vals) < 1e-10
    assert vals[0] > 0.0


class TestVariational:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.env = make_discrete_toy(rng, horizon=2, with_qoi=True)
        self.problem = EnumeratedProblem(self.env, TabularPolicy.random(self.env, rng))
        self.weights = RewardWeights(model=1.0, param=1.0)
        self.exact = exact_expected_utility(self.problem, self.weights, "terminal")

    def test_tight_at_exact_posterior(self):
        q = posterior_q_provider(self.problem)
        for mode in ("terminal", "incremental"):
            val = exact_variational_utility(self.problem, self.weights, mode, q)
            assert np.isclose(val, self.exact, atol=1e-12)

    def test_lower_bound_for_perturbed_posteriors(self):
        rng = np.random.default_rng(8)
        gaps = []
        for _ in range(20):
            q = perturbed_q_provider(self.problem, rng)
            for mode in ("terminal", "incremental"):
                val = exact_variational_utility(self.problem, self.weights, mode, q)
                gaps.append(self.exact - val)
        gaps = np.array(gaps)
        assert gaps.min() > -1e-12           # never above the true utility
        assert gaps.max() > 1e-4             # and genuinely below somewhere


def test_joint_decomposition():
    rng = np.random.default_rng(9)
    env = make_discrete_toy(rng, horizon=2)
    problem = EnumeratedProblem(env, TabularPolicy.random(env, rng))
    joint = exact_joint_utility(problem)
    model_part = exact_expected_utility(problem, RewardWeights(model=1.0, param=0.0), "terminal")
    param_part = exact_expected_utility(problem, RewardWeights(param=1.0), "terminal")
    assert np.isclose(joint, model_part + param_part, atol=1e-12)


def test_prior_omission_is_policy_independent_shift():
    rng = np.random.default_rng(10)
    env = make_discrete_toy(rng, horizon=2, with_qoi=True)
    keep = RewardWeights(param=0.0, qoi=1.0, keep_qoi_prior=True)
    omit = RewardWeights(param=0.0, qoi=1.0, keep_qoi_prior=False)
    shifts = []
    for _ in range(3):
        problem = EnumeratedProblem(env, TabularPolicy.random(env, rng))
        shifts.append(exact_one_point_utility(problem, omit, "terminal")
                      - exact_one_point_utility(problem, keep, "terminal"))
    assert np.ptp(shifts) < 1e-12
    assert abs(shifts[0]) > 1e-6    # the shift itself is non-trivial


class TestEnumeratedBatch:
    def test_weights_sum_to_one_and_match_model_marginal(self):
        rng = np.random.default_rng(11)
        env = make_discrete_toy(rng, horizon=2)
        problem = EnumeratedProblem(env, TabularPolicy.random(env, rng))
        batch, w = enumerate_episode_batch(problem)
        assert np.isclose(w.sum(), 1.0, atol=1e-12)
        for m in range(env.spec.n_models):
            assert np.isclose(w[batch.m == m].sum(), env.model_prior[m], atol=1e-12)

    def test_designs_follow_policy(self):
        env = hand_env()
        policy = TabularPolicy.constant(env, design_idx=1)
        problem = EnumeratedProblem(env, policy)
        batch, _ = enumerate_episode_batch(problem)
        assert np.allclose(batch.designs, 1.0)


def test_certification_report():
    report = certify_identities(seed=0, n_problems=5, n_perturbations=10)
    assert report["pass"] is True
    assert report["max_estimator_spread"] < 1e-9
    assert report["max_tightness_gap"] < 1e-9
    assert report["bound_violations"] == 0
    assert report["max_decomposition_gap"] < 1e-9
    assert report["max_prior_shift_gap"] < 1e-9
    assert len(report["instances"]) == 5
    json.dumps(report)   # must be serializable as-is
