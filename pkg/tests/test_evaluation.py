"""Contrastive EIG estimators, the variational bound, and grid diagnostics."""

import numpy as np
import pytest

from seqoed import oracle
from seqoed.environments.ces import CesEnv
from seqoed.environments.source import SourceLocationEnv
from seqoed.environments.toy import DiscreteToyEnv, make_discrete_toy
from seqoed.evaluation import (Estimate, PceConfig, cartesian_grid,
                               evaluate_stagewise, grid_posterior_qoi_variance,
                               pce_eig, pce_eig_values, pce_model_eig,
                               pce_stagewise, variational_lower_bound)
from seqoed.rewards import RewardWeights


def toy_with_policy(seed=0, n_models=2):
    rng = np.random.default_rng(seed)
    env = make_discrete_toy(rng, n_models=n_models, horizon=2)
    pol = oracle.TabularPolicy.random(env, rng)
    return env, pol, oracle.EnumeratedProblem(env, pol)


class TestEstimate:
    def test_mean_and_standard_error(self):
        est = Estimate.from_values([1.0, 2.0, 3.0, 4.0])
        assert est.mean == pytest.approx(2.5)
        assert est.se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
        assert est.n == 4
        assert est.to_dict() == {"mean": est.mean, "se": est.se, "n": 4}

    def test_single_value_has_zero_se(self):
        assert Estimate.from_values([7.0]).se == 0.0


class TestPceConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            PceConfig(l_contrastive=-1)
        with pytest.raises(ValueError):
            PceConfig(n_episode=0)
        with pytest.raises(ValueError):
            PceConfig(l_per_model=0)

    def test_per_model_allocation(self):
        assert PceConfig(l_contrastive=10).resolved_l_per_model(3) == 3
        assert PceConfig(l_contrastive=1).resolved_l_per_model(3) == 1
        assert PceConfig(l_per_model=17).resolved_l_per_model(3) == 17


class TestPreconditions:
    def test_implicit_likelihood_rejected(self):
        env = CesEnv()
        with pytest.raises(ValueError, match="explicit likelihood"):
            pce_eig(env, None, PceConfig(n_episode=2), np.random.default_rng(0))

    def test_nuisance_parameters_rejected(self):
        env, pol, _ = toy_with_policy()
        env.has_nuisance = True
        with pytest.raises(ValueError, match="nuisance"):
            pce_eig(env, pol.as_value_policy(env), PceConfig(n_episode=2),
                    np.random.default_rng(0))


class TestPceEig:
    def test_zero_contrast_gives_exactly_zero(self):
        env, pol, _ = toy_with_policy()
        cfg = PceConfig(l_contrastive=0, n_episode=50)
        values = pce_eig_values(env, pol.as_value_policy(env), cfg,
                                np.random.default_rng(1))
        np.testing.assert_array_equal(values, 0.0)

    def test_per_episode_values_capped_at_log_l_plus_one(self):
        env, pol, _ = toy_with_policy()
        for l in (3, 50):
            cfg = PceConfig(l_contrastive=l, n_episode=400)
            values = pce_eig_values(env, pol.as_value_policy(env), cfg,
                                    np.random.default_rng(2))
            assert values.max() <= np.log(l + 1) + 1e-9

    def test_exact_marginal_matches_enumerated_eig(self):
        env, pol, problem = toy_with_policy()
        exact = oracle.exact_expected_utility(problem, RewardWeights(param=1.0),
                                              mode="terminal")
        cfg = PceConfig(l_contrastive=0, n_episode=4000, exact_marginal=True)
        est = pce_eig(env, pol.as_value_policy(env), cfg, np.random.default_rng(3))
        assert abs(est.mean - exact) <= 3 * est.se

    def test_sampled_contrast_near_exact_on_toy(self):
        # the finite-support toy makes sampled denominators consistent too
        env, pol, problem = toy_with_policy(seed=4)
        exact = oracle.exact_expected_utility(problem, RewardWeights(param=1.0),
                                              mode="terminal")
        cfg = PceConfig(l_contrastive=2000, n_episode=3000)
        est = pce_eig(env, pol.as_value_policy(env), cfg, np.random.default_rng(5))
        assert abs(est.mean - exact) <= 3 * est.se + 0.01  # small inner-MC bias


class TestPceModelEig:
    def test_single_model_is_zero(self):
        env, pol, _ = toy_with_policy(n_models=1)
        cfg = PceConfig(n_episode=20)
        est = pce_model_eig(env, pol.as_value_policy(env), cfg,
                            np.random.default_rng(0))
        assert est.mean == 0.0 and est.se == 0.0 and est.n == 20

    def test_discriminating_toy_reaches_log_m(self):
        env = DiscreteToyEnv(
            model_prior=[0.5, 0.5],
            theta_priors=[[1.0], [1.0]],
            theta_values=[[0.0], [1.0]],
            like_tables=[[[[0.999, 0.001], [0.999, 0.001]]],
                         [[[0.001, 0.999], [0.001, 0.999]]]],
            design_values=[0.0, 1.0],
            obs_values=[-1.0, 1.0],
            horizon=2,
        )
        pol = oracle.TabularPolicy.constant(env, 0)
        # single parameter atom per model: inner marginals are exact even
        # when sampled, so only outer Monte Carlo error remains
        cfg = PceConfig(l_contrastive=10, n_episode=3000)
        est = pce_model_eig(env, pol.as_value_policy(env), cfg,
                            np.random.default_rng(1))
        assert abs(est.mean - np.log(2)) <= 3 * est.se + 0.02

    def test_random_toy_matches_enumeration_oracle(self):
        env, pol, problem = toy_with_policy(seed=7)
        exact = oracle.exact_expected_utility(
            problem, RewardWeights(model=1.0, param=0.0), mode="terminal")
        cfg = PceConfig(n_episode=4000, exact_marginal=True)
        est = pce_model_eig(env, pol.as_value_policy(env), cfg,
                            np.random.default_rng(8))
        assert abs(est.mean - exact) <= 3 * est.se


class TestVariationalLowerBound:
    def test_prior_predictors_give_zero(self):
        env, pol, problem = toy_with_policy()
        posterior = oracle.posterior_q_provider(problem)
        prior_q = lambda stage, prefix: posterior(0, ())
        preds = oracle.TablePredictors(env, "terminal", prior_q)
        est = variational_lower_bound(env, pol.as_value_policy(env), preds,
                                      RewardWeights(param=1.0), 200,
                                      np.random.default_rng(0))
        assert est.mean == pytest.approx(0.0, abs=1e-12)
        assert est.se == pytest.approx(0.0, abs=1e-12)

    def test_exact_posteriors_match_exact_utility(self):
        env, pol, problem = toy_with_policy()
        weights = RewardWeights(param=1.0)
        exact = oracle.exact_expected_utility(problem, weights, mode="terminal")
        preds = oracle.TablePredictors(env, "terminal",
                                       oracle.posterior_q_provider(problem))
        est = variational_lower_bound(env, pol.as_value_policy(env), preds,
                                      weights, 4000, np.random.default_rng(1))
        assert abs(est.mean - exact) <= 3 * est.se

    def test_bound_ordering_for_perturbed_predictors(self):
        env, pol, problem = toy_with_policy()
        weights = RewardWeights(param=1.0)
        exact = oracle.exact_expected_utility(problem, weights, mode="terminal")
        rng = np.random.default_rng(9)
        for _ in range(50):
            q = oracle.perturbed_q_provider(problem, rng)
            preds = oracle.TablePredictors(env, "terminal", q)
            est = variational_lower_bound(env, pol.as_value_policy(env), preds,
                                          weights, 400, rng)
            assert est.mean <= exact + 3 * est.se


class TestEvaluateStagewise:
    def test_stage_zero_is_zero_and_final_matches_bound(self):
        env, pol, problem = toy_with_policy()
        weights = RewardWeights(param=1.0)
        preds = oracle.TablePredictors(env, "incremental",
                                       oracle.posterior_q_provider(problem))
        stages = evaluate_stagewise(env, pol.as_value_policy(env), preds,
                                    [0, 1, 2], 500, np.random.default_rng(3),
                                    weights=weights)
        bound = variational_lower_bound(env, pol.as_value_policy(env), preds,
                                        weights, 500, np.random.default_rng(3))
        assert stages[0].mean == 0.0 and stages[0].se == 0.0
        assert stages[2].mean == pytest.approx(bound.mean, abs=1e-12)
        assert stages[2].se == pytest.approx(bound.se, abs=1e-12)

    def test_monotone_and_matches_enumerated_cumulative(self):
        env, pol, problem = toy_with_policy()
        weights = RewardWeights(param=1.0)
        preds = oracle.TablePredictors(env, "incremental",
                                       oracle.posterior_q_provider(problem))
        # enumerated (exact) cumulative utilities per stage
        from seqoed.rewards import variational_point_rewards
        ebatch, ew = oracle.enumerate_episode_batch(problem)
        total = variational_point_rewards(ebatch, preds, weights).total
        exact = [0.0] + [float(ew @ total[:, :k].sum(axis=1))
                         for k in range(1, 3)]
        exact[2] += float(ew @ total[:, 2])
        assert exact[0] <= exact[1] + 1e-12 <= exact[2] + 2e-12
        stages = evaluate_stagewise(env, pol.as_value_policy(env), preds,
                                    [0, 1, 2], 4000, np.random.default_rng(4),
                                    weights=weights)
        for k in (1, 2):
            assert abs(stages[k].mean - exact[k]) <= 3 * stages[k].se

    def test_stage_validation(self):
        env, pol, problem = toy_with_policy()
        preds = oracle.TablePredictors(env, "terminal",
                                       oracle.posterior_q_provider(problem))
        with pytest.raises(ValueError, match="no predictors at stages \\[1\\]"):
            evaluate_stagewise(env, pol.as_value_policy(env), preds, [0, 1, 2],
                               10, np.random.default_rng(0))
        with pytest.raises(ValueError, match="outside"):
            evaluate_stagewise(env, pol.as_value_policy(env), preds, [3],
                               10, np.random.default_rng(0))


class TestPceStagewise:
    def test_final_stage_reproduces_single_shot_exactly(self):
        # one contrast set per episode, re-scored per prefix: with the same
        # generator state the full-history stage consumes draws identically
        # to the single-shot estimator
        env, pol, _ = toy_with_policy(seed=6)
        cfg = PceConfig(l_contrastive=40, n_episode=200)
        single = pce_eig_values(env, pol.as_value_policy(env), cfg,
                                np.random.default_rng(7))
        curve = pce_stagewise(env, pol.as_value_policy(env), cfg,
                              np.random.default_rng(7), stages=[0, 2])
        assert curve[2].mean == Estimate.from_values(single).mean
        assert curve[2].se == Estimate.from_values(single).se
        assert curve[0].mean == 0.0 and curve[0].se == 0.0

    def test_default_stages_cover_horizon_and_respect_cap(self):
        env, pol, _ = toy_with_policy(seed=8)
        cfg = PceConfig(l_contrastive=5, n_episode=300)
        curve = pce_stagewise(env, pol.as_value_policy(env), cfg,
                              np.random.default_rng(9))
        assert sorted(curve) == [0, 1, 2]
        cap = np.log(cfg.l_contrastive + 1)
        for est in curve.values():
            assert est.mean <= cap + 1e-9

    def test_rejects_stages_outside_horizon(self):
        env, pol, _ = toy_with_policy()
        with pytest.raises(ValueError, match="outside"):
            pce_stagewise(env, pol.as_value_policy(env), PceConfig(n_episode=2),
                          np.random.default_rng(0), stages=[3])


class TestGridDiagnostics:
    def test_cartesian_grid_layout(self):
        g = cartesian_grid([0.0, 10.0], [1.0, 12.0], 3)
        assert g.shape == (9, 2)
        np.testing.assert_allclose(g[0], [0.0, 10.0])
        np.testing.assert_allclose(g[1], [0.0, 11.0])   # last axis fastest
        np.testing.assert_allclose(g[-1], [1.0, 12.0])

    def test_informative_observations_shrink_qoi_variance(self):
        env = SourceLocationEnv(source_counts=(1,), horizon=3, with_qoi=True)
        rng = np.random.default_rng(11)
        truth = env.sample_prior(rng, 1)[0]
        grid = cartesian_grid([-4.0, -4.0], [4.0, 4.0], 41)
        empty = np.zeros((0, 2)), np.zeros((0, 1))
        prior_var = grid_posterior_qoi_variance(env, 0, grid, *empty)
        designs = truth.theta[None, :] + 0.3 * rng.standard_normal((3, 2))
        obs = np.stack([env.observe(truth, d, None, rng) for d in designs])
        post_var = grid_posterior_qoi_variance(env, 0, grid, designs, obs)
        assert prior_var > 0.0
        assert post_var < prior_var
