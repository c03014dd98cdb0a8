"""Configuration parsing and the command-line workflow, end to end."""

import json

import numpy as np
import pytest

from seqoed.cli import main
from seqoed.config import (ConfigError, build_environment, load_run_config,
                           parse_run_config)
from seqoed.environments import SimBank, simulate_sir_bank


def write_config(path, tree):
    path.write_text(json.dumps(tree) + "\n")
    return str(path)


def toy_tree(out_dir, **train_overrides):
    train = {"n_update": 3, "n_episode": 8, "n_batch": 16,
             "buffer_capacity": 128, "hidden": 8, "n_mixture": 2,
             "weights": {"param": 1.0}}
    train.update(train_overrides)
    return {
        "seed": 5,
        "output_dir": str(out_dir),
        "checkpoint_interval": 2,
        "environment": {"name": "toy", "n_models": 1, "horizon": 2},
        "train": train,
        "evaluation": {"n_episode": 30, "l_contrastive": 40,
                       "n_posterior_samples": 20},
    }


# ---------------------------------------------------------------------------
# configuration tree
# ---------------------------------------------------------------------------


class TestRunConfig:
    def test_minimal_tree_materializes_every_default(self):
        cfg = parse_run_config({"environment": {"name": "toy"}})
        tree = cfg.to_tree()
        assert tree["seed"] == 0
        assert tree["checkpoint_interval"] == 1000
        assert tree["train"]["n_update"] == 10001
        assert tree["train"]["n_episode"] == 1000
        assert tree["train"]["n_batch"] == 10000
        assert tree["train"]["buffer_capacity"] == 1_000_000
        assert tree["train"]["noise_initial"] == 0.5
        assert tree["train"]["noise_decay"] == 0.9999
        assert tree["train"]["target_rate"] == 0.1
        assert tree["train"]["n_mixture"] == 8
        assert tree["train"]["n_trans"] == 4
        assert tree["train"]["weights"]["param"] == 1.0
        assert tree["evaluation"]["l_contrastive"] == 10_000
        assert tree["environment"]["n_theta"] == 3  # builder default
        json.dumps(tree)  # resolved tree must be serializable as-is

    def test_hash_is_stable_and_sensitive(self):
        a = parse_run_config({"environment": {"name": "toy"}})
        b = parse_run_config({"environment": {"name": "toy"}})
        c = parse_run_config({"environment": {"name": "toy"}, "seed": 1})
        assert a.hash == b.hash
        assert a.hash != c.hash
        assert len(a.hash) == 64

    def test_all_offending_fields_reported_at_once(self):
        tree = {
            "typo_section": 1,
            "environment": {"name": "toy", "bogus": 3},
            "train": {"n_updatez": 5, "weights": {"param": 1.0, "wrong": 2}},
            "evaluation": {"n_episode": 0},
        }
        with pytest.raises(ConfigError) as err:
            parse_run_config(tree)
        text = str(err.value)
        for field in ("typo_section", "environment.bogus", "train.n_updatez",
                      "train.weights.wrong", "evaluation"):
            assert field in text

    def test_param_and_qoi_gains_without_nuisance_rejected(self):
        tree = {
            "environment": {"name": "source", "source_counts": [1],
                            "horizon": 2, "with_qoi": True},
            "train": {"weights": {"param": 1.0, "qoi": 1.0}, "use_qoi": True},
        }
        with pytest.raises(ConfigError, match="double-count"):
            parse_run_config(tree)

    def test_flow_rejected_for_one_dimensional_target(self):
        tree = {
            "environment": {"name": "toy", "n_models": 1},
            "train": {"param_family": "flow"},
        }
        with pytest.raises(ConfigError, match="train.param_family"):
            parse_run_config(tree)

    def test_weighted_target_without_predictor_rejected(self):
        tree = {
            "environment": {"name": "source", "source_counts": [1],
                            "horizon": 2, "with_qoi": True},
            "train": {"weights": {"param": 0.0, "qoi": 1.0}, "use_qoi": False},
        }
        with pytest.raises(ConfigError, match="use_qoi is off"):
            parse_run_config(tree)

    def test_epidemic_environment_requires_bank_path(self):
        with pytest.raises(ConfigError, match="bank_path"):
            parse_run_config({"environment": {"name": "sir"}})

    def test_builders_construct_named_environments(self):
        assert build_environment({"name": "ces"}).spec.name == "ces"
        src = build_environment({"name": "source", "source_counts": [1, 2]})
        assert src.spec.n_models == 2 and src.spec.design_dim == 2
        assert build_environment({"name": "toy"}).spec.n_models == 2

    def test_relative_paths_resolve_against_config_file(self, tmp_path):
        bank = simulate_sir_bank(4, rng=np.random.default_rng(0),
                                 grid=np.linspace(0.0, 10.0, 6))
        bank.save(tmp_path / "bank.blob")
        path = write_config(tmp_path / "cfg.json", {
            "output_dir": "artifacts",
            "environment": {"name": "sir", "bank_path": "bank.blob",
                            "horizon": 3},
            "train": {"weights": {"param": 1.0}},
        })
        cfg = load_run_config(path)
        assert cfg.output_dir == str(tmp_path / "artifacts")
        env = cfg.build_env()
        assert env.spec.name == "epidemic" and env.bank.n == 4


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


class TestTrainCommand:
    def test_missing_config_file_names_the_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["train", "--config", str(missing)]) == 2
        assert "nope.json" in capsys.readouterr().err

    def test_invalid_config_lists_offending_fields(self, tmp_path, capsys):
        tree = toy_tree(tmp_path / "out")
        tree["train"]["n_updatez"] = 1
        tree["bad_section"] = True
        path = write_config(tmp_path / "cfg.json", tree)
        assert main(["train", "--config", path]) == 2
        err = capsys.readouterr().err
        assert "train.n_updatez" in err and "bad_section" in err

    def test_smoke_run_writes_checkpoint_history_and_resolved_config(
            self, tmp_path):
        out = tmp_path / "run"
        path = write_config(tmp_path / "cfg.json",
                            toy_tree(out, n_update=10))
        assert main(["train", "--config", path]) == 0
        assert (out / "checkpoint.blob").exists()
        lines = (out / "history.csv").read_text().splitlines()
        assert len(lines) == 11 and lines[0].startswith("iteration,")
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["train"]["lr_decay"] == 0.9999  # default materialized
        assert resolved["environment"]["concentration"] == 2.0

    def test_resumed_run_matches_unbroken_run_bit_exactly(self, tmp_path):
        split, straight = tmp_path / "split", tmp_path / "straight"
        split_cfg = write_config(tmp_path / "a.json",
                                 toy_tree(split, n_update=4))
        straight_cfg = write_config(tmp_path / "b.json",
                                    toy_tree(straight, n_update=4))
        assert main(["train", "--config", split_cfg, "--until", "2"]) == 0
        assert main(["train", "--config", split_cfg, "--resume"]) == 0
        assert main(["train", "--config", straight_cfg]) == 0
        assert (split / "history.csv").read_bytes() == \
            (straight / "history.csv").read_bytes()

    def test_resume_rejects_changed_configuration(self, tmp_path, capsys):
        out = tmp_path / "run"
        path = write_config(tmp_path / "cfg.json", toy_tree(out, n_update=2))
        assert main(["train", "--config", path]) == 0
        write_config(tmp_path / "cfg.json", toy_tree(out, n_update=2, hidden=16))
        assert main(["train", "--config", str(tmp_path / "cfg.json"),
                     "--resume"]) == 2
        assert "different" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _train_toy(tmp_path, **train_overrides):
    out = tmp_path / "run"
    path = write_config(tmp_path / "cfg.json", toy_tree(out, **train_overrides))
    assert main(["train", "--config", path]) == 0
    return path, out


class TestEvaluateCommand:
    def test_baseline_runs_without_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        path = write_config(tmp_path / "cfg.json", toy_tree(out))
        assert main(["evaluate", "--config", path]) == 0
        results = json.loads((out / "results.json").read_text())
        assert results["policy"] == "uniform-random"
        (record,) = results["records"]
        assert record["estimator"] == "pce"
        assert record["n"] == 30 and record["L"] == 40
        assert record["config_hash"] == results["config_hash"]
        assert record["seed"] == 5
        assert "below" in record["note"] or "differs" in record["note"]
        stage_lines = (out / "stages.csv").read_text().splitlines()
        assert stage_lines[0] == "stage,estimator,mean,se,n"
        assert len(stage_lines) == 1 + 3  # stages 0..horizon for one estimator
        assert (out / "config.json").exists()  # run dir carries resolved config

    def test_trained_checkpoint_emits_both_estimators(self, tmp_path):
        path, out = _train_toy(tmp_path)
        assert main(["evaluate", "--config", path,
                     "--checkpoint", str(out / "checkpoint.blob")]) == 0
        results = json.loads((out / "results.json").read_text())
        names = [r["estimator"] for r in results["records"]]
        assert names == ["pce", "variational"]
        assert results["policy"] == "trained"
        variational = results["records"][1]
        assert variational["L"] is None and "note" not in variational
        rows = (out / "stages.csv").read_text().splitlines()[1:]
        kinds = {line.split(",")[1] for line in rows}
        assert kinds == {"pce", "variational"}

    def test_contrastive_estimator_rejected_without_likelihood(
            self, tmp_path, capsys):
        tree = {"output_dir": str(tmp_path / "run"),
                "environment": {"name": "ces", "horizon": 2},
                "train": {"weights": {"param": 1.0}}}
        path = write_config(tmp_path / "cfg.json", tree)
        assert main(["evaluate", "--config", path,
                     "--estimators", "pce"]) == 2
        assert "likelihood" in capsys.readouterr().err
        assert main(["evaluate", "--config", path]) == 2
        assert "no applicable estimator" in capsys.readouterr().err

    def test_unknown_estimator_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path / "cfg.json", toy_tree(tmp_path / "run"))
        assert main(["evaluate", "--config", path,
                     "--estimators", "bogus"]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_variational_without_checkpoint_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path / "cfg.json", toy_tree(tmp_path / "run"))
        assert main(["evaluate", "--config", path,
                     "--estimators", "variational"]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_model_marginalized_record_for_multi_model_problem(self, tmp_path):
        out = tmp_path / "run"
        tree = toy_tree(out)
        tree["environment"]["n_models"] = 2
        tree["train"]["weights"] = {"model": 1.0, "param": 0.0}
        tree["train"]["use_param"] = False
        path = write_config(tmp_path / "cfg.json", tree)
        assert main(["evaluate", "--config", path,
                     "--estimators", "pce-model"]) == 0
        (record,) = json.loads((out / "results.json").read_text())["records"]
        assert record["estimator"] == "pce-model"
        assert record["L"] == 20  # 40 split across two models

    def test_export_samples_through_evaluate(self, tmp_path):
        path, out = _train_toy(tmp_path)
        sample_path = tmp_path / "samples.csv"
        assert main(["evaluate", "--config", path,
                     "--checkpoint", str(out / "checkpoint.blob"),
                     "--export-samples", str(sample_path)]) == 0
        lines = sample_path.read_text().splitlines()
        assert lines[0] == "model,theta_0"
        assert len(lines) == 1 + 20  # n_posterior_samples rows


# ---------------------------------------------------------------------------
# export-posterior
# ---------------------------------------------------------------------------


class TestExportPosteriorCommand:
    def test_writes_requested_number_of_rows(self, tmp_path):
        path, out = _train_toy(tmp_path)
        target = tmp_path / "posterior.csv"
        assert main(["export-posterior", "--config", path,
                     "--checkpoint", str(out / "checkpoint.blob"),
                     "--out", str(target), "--n", "17"]) == 0
        lines = target.read_text().splitlines()
        assert lines[0] == "model,theta_0" and len(lines) == 18

    def test_prior_stage_and_incremental_stages_available(self, tmp_path):
        path, out = _train_toy(tmp_path, mode="incremental")
        target = tmp_path / "posterior.csv"
        for stage in ("0", "1", "2"):
            assert main(["export-posterior", "--config", path,
                         "--checkpoint", str(out / "checkpoint.blob"),
                         "--out", str(target), "--n", "5",
                         "--stage", stage]) == 0
            assert len(target.read_text().splitlines()) == 6

    def test_stage_without_predictor_rejected(self, tmp_path, capsys):
        path, out = _train_toy(tmp_path)  # terminal mode: stage 1 has no net
        assert main(["export-posterior", "--config", path,
                     "--checkpoint", str(out / "checkpoint.blob"),
                     "--out", str(tmp_path / "p.csv"), "--stage", "1"]) == 2
        assert "no predictor at stage 1" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------


class TestCertifyCommand:
    def test_quick_run_passes_with_valid_report(self, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        assert main(["certify", "--instances", "3", "--perturbations", "4",
                     "--out", str(report_path)]) == 0
        assert "PASS" in capsys.readouterr().out
        report = json.loads(report_path.read_text())
        for key in ("seed", "n_problems", "tolerance", "max_estimator_spread",
                    "max_tightness_gap", "bound_violations",
                    "max_decomposition_gap", "max_prior_shift_gap", "pass",
                    "instances"):
            assert key in report
        assert report["pass"] is True
        assert len(report["instances"]) == 3
        entry = report["instances"][0]
        assert set(entry["estimators"]) == {
            "terminal_kl", "incremental_kl",
            "terminal_one_point", "incremental_one_point"}

    def test_same_seed_reproduces_report_bytes(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        args = ["certify", "--instances", "2", "--perturbations", "4",
                "--seed", "9"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# gen-sir-bank
# ---------------------------------------------------------------------------


class TestGenSirBankCommand:
    def test_quick_bank_generates_and_round_trips(self, tmp_path, capsys):
        out = tmp_path / "bank.blob"
        assert main(["gen-sir-bank", "--n", "100", "--out", str(out),
                     "--grid-points", "11", "--time-span", "50"]) == 0
        assert "100 paths" in capsys.readouterr().out
        bank = SimBank.load(out)
        assert bank.n == 100
        assert bank.grid.size == 11
        assert bank.infected.shape == (100, 11)
        assert np.all(bank.infected >= 0.0)

    def test_same_seed_reproduces_bank_bytes(self, tmp_path):
        paths = [tmp_path / "a.blob", tmp_path / "b.blob", tmp_path / "c.blob"]
        base = ["gen-sir-bank", "--n", "12", "--grid-points", "6",
                "--time-span", "20"]
        assert main(base + ["--seed", "3", "--out", str(paths[0])]) == 0
        assert main(base + ["--seed", "3", "--out", str(paths[1])]) == 0
        assert main(base + ["--seed", "4", "--out", str(paths[2])]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert paths[0].read_bytes() != paths[2].read_bytes()
