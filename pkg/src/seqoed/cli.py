"""Command-line entry points for training, evaluation, and data tooling.

Subcommands::

    train             optimize a design policy from a run-configuration file
    evaluate          estimate a policy's expected information gain (contrastive
                      and/or variational), with a per-stage curve CSV
    certify           numerically certify the estimator identities on random
                      finite problems and write a JSON report
    gen-sir-bank      pre-simulate an epidemic path bank for the
                      implicit-likelihood environment
    export-posterior  sample a trained posterior predictor on one rolled-out
                      episode and write the draws as CSV

Every subcommand exits 0 on success.  Configuration and usage errors exit 2;
a failed certification exits 1.  Each run directory receives a copy of the
fully resolved configuration so results are reproducible from artifacts
alone, and every result record carries the configuration fingerprint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import agent, evaluation, oracle
from .config import ConfigError, config_hash, load_run_config
from .environments import simulate_sir_bank

# Evaluation seed namespace.  Training consumes spawn keys (0, .) and (1, .)
# of the run seed; evaluation draws from (2, slot) with one fixed slot per
# consumer, so each estimate is reproducible regardless of which other
# estimators run alongside it.
_NS_EVAL = 2
_SLOT_PCE = 0
_SLOT_PCE_MODEL = 1
_SLOT_VARIATIONAL = 2
_SLOT_PCE_STAGES = 3
_SLOT_VAR_STAGES = 4
_SLOT_EXPORT_EPISODE = 5
_SLOT_EXPORT_SAMPLES = 6


def _rng(seed, slot):
    return np.random.default_rng(np.random.SeedSequence(seed,
                                                        spawn_key=(_NS_EVAL, slot)))


def _fail(message) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def _load_config(path):
    """Returns (RunConfig, exit_code); exactly one side is None."""
    try:
        return load_run_config(path), None
    except FileNotFoundError as exc:
        return None, _fail(exc)
    except ConfigError as exc:
        return None, _fail(exc)


def _prepare_run_dir(cfg):
    """Create the output directory and record the resolved configuration."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree = cfg.to_tree()
    (out / "config.json").write_text(
        json.dumps(tree, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out, config_hash(tree)


def _set_workers(workers):
    if workers is None or workers < 1:
        return
    try:
        import numba
        numba.set_num_threads(workers)
    except Exception:
        pass  # serial build: the degree flag has nothing to bound


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, err = _load_config(args.config)
    if cfg is None:
        return err
    env = cfg.build_env()
    _set_workers(args.workers)
    out, fingerprint = _prepare_run_dir(cfg)
    ckpt_path = out / "checkpoint.blob"

    state = None
    if args.resume:
        if not ckpt_path.exists():
            return _fail(f"no checkpoint to resume at {ckpt_path}")
        state, saved_cfg, saved_seed = agent.load_checkpoint(ckpt_path, env)
        if (agent.config_to_dict(saved_cfg) != agent.config_to_dict(cfg.train)
                or saved_seed != cfg.seed):
            return _fail(f"{ckpt_path} was produced under a different "
                         f"training configuration or seed")

    def write_artifacts(state):
        agent.save_checkpoint(ckpt_path, state, cfg.train, cfg.seed,
                              extra={"config_hash": fingerprint})
        (out / "history.csv").write_text(agent.history_csv(state.history),
                                         encoding="utf-8")

    def on_iteration(state, row):
        if state.iteration % cfg.checkpoint_interval == 0:
            write_artifacts(state)

    state = agent.train(env, cfg.train, cfg.seed, state=state,
                        callback=on_iteration, until=args.until)
    write_artifacts(state)
    print(f"trained through iteration {state.iteration} of "
          f"{cfg.train.n_update}; checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _estimate_record(name, est, cfg, fingerprint, policy_name, l_budget=None):
    record = {
        "estimator": name,
        "policy": policy_name,
        "n": est.n,
        "L": l_budget,
        "mean": est.mean,
        "se": est.se,
        "config_hash": fingerprint,
        "seed": cfg.seed,
    }
    if l_budget is not None and l_budget != evaluation.REFERENCE_L:
        record["note"] = (f"contrastive budget L={l_budget} differs from the "
                          f"reference budget {evaluation.REFERENCE_L}; the "
                          f"bound tightens as L grows")
    return record


def cmd_evaluate(args) -> int:
    cfg, err = _load_config(args.config)
    if cfg is None:
        return err
    env = cfg.build_env()
    _set_workers(args.workers)
    out, fingerprint = _prepare_run_dir(cfg)
    pce_cfg = cfg.evaluation.pce_config()

    state = None
    if args.checkpoint:
        try:
            state, _, _ = agent.load_checkpoint(args.checkpoint, env)
        except (OSError, ValueError) as exc:
            return _fail(exc)
        policy, policy_name = state.actor, "trained"
    else:
        policy = agent.UniformRandomPolicy(env.spec, seed=cfg.seed)
        policy_name = "uniform-random"

    contrastable = (env.has_explicit_likelihood
                    and not getattr(env, "has_nuisance", False))
    if args.estimators:
        requested = [name.strip() for name in args.estimators.split(",")]
    else:
        requested = (["pce"] if contrastable else [])
        if state is not None:
            requested.append("variational")
        if not requested:
            return _fail("no applicable estimator: the environment has no "
                         "explicit likelihood and no checkpoint was given")

    records = []
    stage_rows = []
    for name in requested:
        if name == "pce":
            try:
                est = evaluation.pce_eig(env, policy, pce_cfg,
                                         _rng(cfg.seed, _SLOT_PCE))
                curve = evaluation.pce_stagewise(env, policy, pce_cfg,
                                                 _rng(cfg.seed, _SLOT_PCE_STAGES))
            except ValueError as exc:
                return _fail(exc)
            records.append(_estimate_record("pce", est, cfg, fingerprint,
                                            policy_name, pce_cfg.l_contrastive))
            stage_rows += [(k, "pce", curve[k]) for k in sorted(curve)]
        elif name == "pce-model":
            try:
                est = evaluation.pce_model_eig(env, policy, pce_cfg,
                                               _rng(cfg.seed, _SLOT_PCE_MODEL))
            except ValueError as exc:
                return _fail(exc)
            records.append(_estimate_record(
                "pce-model", est, cfg, fingerprint, policy_name,
                pce_cfg.resolved_l_per_model(env.spec.n_models)))
        elif name == "variational":
            if state is None:
                return _fail("the variational bound needs trained predictors; "
                             "pass --checkpoint")
            est = evaluation.variational_lower_bound(
                env, policy, state.predictors, cfg.train.weights,
                cfg.evaluation.n_episode, _rng(cfg.seed, _SLOT_VARIATIONAL))
            records.append(_estimate_record("variational", est, cfg,
                                            fingerprint, policy_name))
            stages = [0] + state.predictors.stages
            curve = evaluation.evaluate_stagewise(
                env, policy, state.predictors, stages,
                cfg.evaluation.n_episode, _rng(cfg.seed, _SLOT_VAR_STAGES),
                weights=cfg.train.weights)
            stage_rows += [(k, "variational", curve[k]) for k in sorted(curve)]
        else:
            return _fail(f"unknown estimator {name!r}; choose from "
                         f"pce, pce-model, variational")

    results = {
        "config_hash": fingerprint,
        "seed": cfg.seed,
        "policy": policy_name,
        "checkpoint": args.checkpoint,
        "records": records,
    }
    results_path = out / args.results_name
    results_path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    lines = ["stage,estimator,mean,se,n"]
    lines += [f"{k},{name},{est.mean!r},{est.se!r},{est.n}"
              for k, name, est in stage_rows]
    stages_path = out / args.stages_name
    stages_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    for rec in records:
        budget = "" if rec["L"] is None else f", L={rec['L']}"
        print(f"{rec['estimator']} ({policy_name}): {rec['mean']:.4f} "
              f"+/- {rec['se']:.4f} (n={rec['n']}{budget})")
    print(f"results at {results_path}; stage curve at {stages_path}")

    if args.export_samples:
        if state is None:
            return _fail("posterior-sample export needs trained predictors; "
                         "pass --checkpoint")
        _export_posterior_samples(env, state, None,
                                  cfg.evaluation.n_posterior_samples,
                                  cfg.seed, args.export_samples)
        print(f"posterior samples at {args.export_samples}")
    return 0


# ---------------------------------------------------------------------------
# export-posterior
# ---------------------------------------------------------------------------


def _export_posterior_samples(env, state, stage, n, seed, path):
    """Roll one noise-free episode, sample q(. | I_stage), write CSV rows."""
    predictors = state.predictors
    spec = env.spec
    if stage is None:
        stage = spec.horizon
    if stage != 0 and stage not in predictors.stages:
        raise ValueError(f"no predictor at stage {stage}; available stages: "
                         f"0 (prior) and {predictors.stages}")
    episode = agent.rollout(env, state.actor, 1, _rng(seed, _SLOT_EXPORT_EPISODE))
    rng = _rng(seed, _SLOT_EXPORT_SAMPLES)

    step = spec.design_dim + spec.obs_dim
    enc = predictors.encode(episode.designs, episode.observations)
    cond = np.repeat(enc[:, :stage * step], n, axis=0)

    if spec.n_models == 1:
        models = np.zeros(n, dtype=np.int64)
    else:
        if stage > 0 and predictors.use_model:
            log_p = predictors.model_nets[stage].log_probs(cond[:1])[0]
        else:
            log_p = env.log_prior_model(np.arange(spec.n_models))
        models = rng.choice(spec.n_models, size=n, p=np.exp(log_p))

    width = max(spec.theta_dims)
    samples = np.full((n, width), np.nan)
    for m in range(spec.n_models):
        rows = np.nonzero(models == m)[0]
        if rows.size == 0:
            continue
        if stage == 0:
            draws = env.sample_theta(m, rng, rows.size)
        else:
            draws = predictors.param_nets[(stage, m)].sample(cond[rows], rng)
        samples[rows, :spec.theta_dims[m]] = draws

    lines = ["model," + ",".join(f"theta_{j}" for j in range(width))]
    for i in range(n):
        row = ",".join(repr(float(v)) for v in samples[i])
        lines.append(f"{int(models[i])},{row}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return episode


def cmd_export_posterior(args) -> int:
    cfg, err = _load_config(args.config)
    if cfg is None:
        return err
    env = cfg.build_env()
    try:
        state, _, _ = agent.load_checkpoint(args.checkpoint, env)
    except (OSError, ValueError) as exc:
        return _fail(exc)
    n = args.n if args.n is not None else cfg.evaluation.n_posterior_samples
    try:
        episode = _export_posterior_samples(env, state, args.stage, n,
                                            cfg.seed, args.out)
    except ValueError as exc:
        return _fail(exc)
    designs = np.round(episode.designs[0].reshape(-1), 4).tolist()
    print(f"wrote {n} posterior draws at stage "
          f"{args.stage if args.stage is not None else env.spec.horizon} "
          f"to {args.out} (episode designs: {designs})")
    return 0


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------


def cmd_certify(args) -> int:
    report = oracle.certify_identities(seed=args.seed,
                                       n_problems=args.instances,
                                       n_perturbations=args.perturbations,
                                       tol=args.tol, horizon=args.horizon)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    verdict = "PASS" if report["pass"] else "FAIL"
    print(f"certified {report['n_problems']} instances: "
          f"estimator spread {report['max_estimator_spread']:.3e}, "
          f"tightness gap {report['max_tightness_gap']:.3e}, "
          f"bound violations {report['bound_violations']}, "
          f"decomposition gap {report['max_decomposition_gap']:.3e}, "
          f"prior-shift gap {report['max_prior_shift_gap']:.3e} -> {verdict}")
    return 0 if report["pass"] else 1


# ---------------------------------------------------------------------------
# gen-sir-bank
# ---------------------------------------------------------------------------


def cmd_gen_sir_bank(args) -> int:
    grid = np.linspace(0.0, args.time_span, args.grid_points)
    bank = simulate_sir_bank(args.n, dt=args.dt,
                             rng=np.random.default_rng(args.seed),
                             population=args.population,
                             initial_infected=args.initial_infected,
                             grid=grid)
    bank.save(args.out)
    peak = bank.infected.max(axis=1)
    final = bank.infected[:, -1]
    print(f"wrote {bank.n} paths x {bank.grid.size} grid times to {args.out}")
    print(f"  population {bank.population:g}, time span "
          f"[{bank.grid[0]:g}, {bank.grid[-1]:g}], integration dt {bank.dt:g}")
    print(f"  peak infected: mean {peak.mean():.2f}, max {peak.max():.2f}; "
          f"final infected: mean {final.mean():.2f}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="seqoed",
        description="Sequential experimental design: policy training, "
                    "information-gain evaluation, and estimator certification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a design policy")
    p.add_argument("--config", required=True, help="run-configuration JSON file")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory's checkpoint")
    p.add_argument("--until", type=int, default=None,
                   help="stop after this iteration (for staged runs)")
    p.add_argument("--workers", type=int, default=None,
                   help="bound the compiled-kernel thread pool")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="estimate a policy's expected "
                                        "information gain")
    p.add_argument("--config", required=True, help="run-configuration JSON file")
    p.add_argument("--checkpoint", default=None,
                   help="trained checkpoint; omitted = uniform-random baseline")
    p.add_argument("--estimators", default=None,
                   help="comma list: pce, pce-model, variational "
                        "(default: whichever apply)")
    p.add_argument("--results-name", default="results.json",
                   help="results file name inside the run directory")
    p.add_argument("--stages-name", default="stages.csv",
                   help="stage-curve CSV name inside the run directory")
    p.add_argument("--export-samples", default=None,
                   help="also write posterior draws for one episode to this path")
    p.add_argument("--workers", type=int, default=None,
                   help="bound the compiled-kernel thread pool")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("certify", help="certify estimator identities on "
                                       "random finite problems")
    p.add_argument("--instances", type=int, default=100,
                   help="number of random problem instances")
    p.add_argument("--perturbations", type=int, default=40,
                   help="perturbed predictor tables per instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-10,
                   help="agreement tolerance")
    p.add_argument("--horizon", type=int, default=2)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("gen-sir-bank", help="pre-simulate an epidemic path bank")
    p.add_argument("--n", type=int, required=True, help="number of paths")
    p.add_argument("--out", required=True, help="bank file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--time-span", type=float, default=100.0)
    p.add_argument("--dt", type=float, default=None,
                   help="integration step (default: 0.002 x grid spacing)")
    p.add_argument("--population", type=float, default=500.0)
    p.add_argument("--initial-infected", type=float, default=2.0)
    p.set_defaults(func=cmd_gen_sir_bank)

    p = sub.add_parser("export-posterior", help="sample a trained posterior "
                                                "predictor on one episode")
    p.add_argument("--config", required=True, help="run-configuration JSON file")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--n", type=int, default=None,
                   help="number of draws (default: evaluation settings)")
    p.add_argument("--stage", type=int, default=None,
                   help="history length to condition on (default: horizon)")
    p.set_defaults(func=cmd_export_posterior)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
