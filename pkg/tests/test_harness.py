import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from pruneshare import harness
from pruneshare.cli import main as cli_main
from pruneshare.errors import ConfigError, UsageError


def config_dict(**over):
    base = {
        "env": {"name": "coord"},
        "algorithm": "a2c",
        "sharing": {"mode": "SNP_PS", "actor_schedule": "0.5-0.5",
                    "critic_schedule": "0.5-0.5"},
        "seeds": [1, 2],
        "total_steps": 400,
        "eval": {"interval": 200, "episodes": 4},
        "out_dir": "",
        "a2c": {"hidden": [12, 12], "n_steps": 5},
    }
    for key, value in over.items():
        if isinstance(value, dict) and key in base:
            base[key].update(value)
        else:
            base[key] = value
    return base


def write_config(tmp_path, name="cfg.yaml", **over):
    data = config_dict(**over)
    if not data["out_dir"]:
        data["out_dir"] = str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


class TestParseSchedule:
    def test_table_notation(self):
        assert harness.parse_schedule("0-0.1-0.9").ratios == (0.0, 0.1, 0.9)

    def test_single(self):
        assert harness.parse_schedule("0").ratios == (0.0,)

    def test_full_prune_rejected(self):
        with pytest.raises(ConfigError):
            harness.parse_schedule("0-1.0")


class TestConfig:
    def test_load_roundtrip(self, tmp_path):
        path = write_config(tmp_path)
        config = harness.ExperimentConfig.from_file(path)
        assert config.env_name == "coord"
        assert config.seeds == (1, 2)
        assert config.a2c.hidden == (12, 12)

    def test_missing_field_names_path(self, tmp_path):
        data = config_dict()
        del data["sharing"]["mode"]
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(data))
        with pytest.raises(ConfigError, match="sharing.mode"):
            harness.ExperimentConfig.from_file(path)

    def test_schedule_arity_checked(self, tmp_path):
        path = write_config(tmp_path,
                            sharing={"actor_schedule": "0.5-0.5-0.5"})
        with pytest.raises(ConfigError, match="actor_schedule"):
            harness.ExperimentConfig.from_file(path)

    def test_masked_mode_requires_schedule(self, tmp_path):
        data = config_dict()
        del data["sharing"]["actor_schedule"]
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(data))
        with pytest.raises(ConfigError, match="actor_schedule"):
            harness.ExperimentConfig.from_file(path)

    def test_unknown_option_rejected(self, tmp_path):
        path = write_config(tmp_path, a2c={"bogus": 1})
        with pytest.raises(ConfigError, match="a2c.bogus"):
            harness.ExperimentConfig.from_file(path)

    def test_hash_ignores_out_dir_but_not_seeds(self, tmp_path):
        a = harness.ExperimentConfig.from_file(write_config(tmp_path, "a.yaml"))
        b = harness.ExperimentConfig.from_file(
            write_config(tmp_path, "b.yaml", out_dir=str(tmp_path / "other")))
        c = harness.ExperimentConfig.from_file(
            write_config(tmp_path, "c.yaml", seeds=[3, 4]))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()


class TestProvenance:
    def test_csv_requires_hash_and_seed(self, tmp_path):
        with pytest.raises(UsageError):
            harness.write_csv(tmp_path / "x.csv", {"seed": 1}, ["a"], [[1]])
        with pytest.raises(UsageError):
            harness.write_csv(tmp_path / "x.csv", {"config_hash": "h"},
                              ["a"], [[1]])
        harness.write_csv(tmp_path / "x.csv",
                          {"config_hash": "h", "seed": 1}, ["a"], [[1]])
        prov, cols, rows = harness.read_csv(tmp_path / "x.csv")
        assert prov == {"config_hash": "h", "seed": "1"}
        assert cols == ["a"] and rows == [["1"]]


class TestRunExperiment:
    def test_two_seeds_records_and_outputs(self, tmp_path):
        config = harness.ExperimentConfig.from_file(write_config(tmp_path))
        records = harness.run_experiment(config)
        assert [r.seed for r in records] == [1, 2]
        assert len({r.config_hash for r in records}) == 1
        for rec in records:
            assert os.path.isdir(rec.run_dir)
            for name in ("curve.csv", "train_log.csv", "record.json"):
                assert os.path.exists(os.path.join(rec.run_dir, name))
            prov, cols, rows = harness.read_csv(
                os.path.join(rec.run_dir, "curve.csv"))
            assert prov["config_hash"] == rec.config_hash
            assert int(prov["seed"]) == rec.seed
            assert cols == ["env_step", "mean_return"]
            assert int(rows[-1][0]) >= config.total_steps
        assert os.path.exists(os.path.join(config.out_dir, "config.yaml"))

    def test_config_echoed_verbatim(self, tmp_path):
        path = write_config(tmp_path)
        config = harness.ExperimentConfig.from_file(path)
        harness.run_experiment(config)
        echoed = (tmp_path / "out" / "config.yaml").read_text()
        assert echoed == path.read_text()

    def test_rerun_reproduces_csvs_byte_for_byte(self, tmp_path):
        config = harness.ExperimentConfig.from_file(write_config(tmp_path))
        harness.run_experiment(config)
        blobs = {}
        for rec_dir in ("run_s1", "run_s2"):
            for name in ("curve.csv", "train_log.csv"):
                p = tmp_path / "out" / rec_dir / name
                blobs[str(p)] = p.read_bytes()
        harness.run_experiment(config)
        for path_str, blob in blobs.items():
            assert open(path_str, "rb").read() == blob

    def test_zero_schedule_matches_fups_traces(self, tmp_path):
        base = write_config(tmp_path, "fups.yaml",
                            sharing={"mode": "FuPS", "actor_schedule": None,
                                     "critic_schedule": None},
                            out_dir=str(tmp_path / "out_fups"), seeds=[5])
        zero = write_config(tmp_path, "zero.yaml",
                            sharing={"mode": "SNP_PS",
                                     "actor_schedule": "0-0",
                                     "critic_schedule": "0-0"},
                            out_dir=str(tmp_path / "out_zero"), seeds=[5])
        harness.run_experiment(harness.ExperimentConfig.from_file(base))
        harness.run_experiment(harness.ExperimentConfig.from_file(zero))
        a = (tmp_path / "out_fups" / "run_s5" / "train_log.csv").read_text()
        b = (tmp_path / "out_zero" / "run_s5" / "train_log.csv").read_text()
        # identical apart from the provenance header (different config hash)
        strip = lambda text: [ln for ln in text.splitlines()
                              if not ln.startswith("#")]
        assert strip(a) == strip(b)

    def test_qmix_run_produces_outputs(self, tmp_path):
        path = write_config(
            tmp_path, algorithm="qmix",
            sharing={"mode": "SNP_PS", "actor_schedule": None,
                     "critic_schedule": "0.5-0.5"},
            total_steps=60, eval={"interval": 30, "episodes": 2},
            qmix={"utility_hidden": 8, "mixer_hidden": 4, "hyper_hidden": 8,
                  "batch_episodes": 4, "min_buffer_episodes": 4,
                  "eps_anneal_steps": 40},
            seeds=[1])
        config = harness.ExperimentConfig.from_file(path)
        records = harness.run_experiment(config)
        assert len(records) == 1
        prov, cols, rows = harness.read_csv(
            os.path.join(records[0].run_dir, "train_log.csv"))
        assert cols == ["env_step", "episode", "return", "loss", "epsilon"]
        assert os.path.isdir(os.path.join(records[0].run_dir, "checkpoint",
                                          "utilities"))


class TestSweepAndReport:
    def test_sweep_varies_last_ratio_only(self, tmp_path):
        config = harness.ExperimentConfig.from_file(
            write_config(tmp_path, seeds=[1], total_steps=200))
        table = harness.sweep_pruning_ratio(config, "actor", [0.2, 0.6])
        assert [row["ratio"] for row in table] == [0.2, 0.6]
        prov, cols, rows = harness.read_csv(
            tmp_path / "out" / "sweep_actor.csv")
        assert prov["axis"] == "actor"
        assert prov["fixed_critic_schedule"] == "0.5-0.5"
        sub = harness.ExperimentConfig.from_file(
            tmp_path / "out" / "actor_0.2" / "config.yaml")
        assert sub.actor_schedule == "0.5-0.2"
        assert sub.critic_schedule == "0.5-0.5"

    def test_single_ratio_single_seed_reduces_to_run(self, tmp_path):
        config = harness.ExperimentConfig.from_file(
            write_config(tmp_path, seeds=[1], total_steps=200))
        table = harness.sweep_pruning_ratio(config, "critic", [0.3])
        rec = harness.find_records(tmp_path / "out" / "critic_0.3")[0]
        assert table[0]["mean_final_return"] == pytest.approx(rec.final_return)
        assert table[0]["std_final_return"] == 0.0

    def test_report_resources_relative_wallclock(self, tmp_path):
        config = harness.ExperimentConfig.from_file(
            write_config(tmp_path, seeds=[1], total_steps=200))
        harness.run_experiment(config)
        rows = harness.report_resources(config.out_dir)
        assert rows[0]["mode"] == "SNP_PS"
        assert rows[0]["relative_wall_clock"] == 1.0
        assert os.path.exists(os.path.join(config.out_dir, "resources.csv"))


class TestCli:
    def test_run_and_report(self, tmp_path, capsys):
        path = write_config(tmp_path, seeds=[1], total_steps=200)
        assert cli_main(["run", str(path)]) == 0
        assert cli_main(["report", str(tmp_path / "out")]) == 0
        out = capsys.readouterr().out
        assert "SNP_PS" in out

    def test_config_error_exit_code(self, tmp_path):
        data = config_dict()
        data["algorithm"] = "sarsa"
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(data))
        assert cli_main(["run", str(path)]) == 2

    def test_missing_file_exit_code(self, tmp_path):
        assert cli_main(["run", str(tmp_path / "absent.yaml")]) == 3

    def test_dump_features(self, tmp_path, capsys):
        path = write_config(tmp_path, seeds=[1], total_steps=200)
        assert cli_main(["run", str(path)]) == 0
        ckpt = tmp_path / "out" / "run_s1" / "checkpoint" / "actor"
        obs_file = tmp_path / "obs.json"
        obs_file.write_text(json.dumps(
            {"observations": [np.ones(4).tolist(), np.zeros(4).tolist()]}))
        out_csv = tmp_path / "features.csv"
        assert cli_main(["dump-features", str(ckpt), str(obs_file),
                         "--out", str(out_csv)]) == 0
        prov, cols, rows = harness.read_csv(out_csv)
        assert cols == ["run_id", "step", "agent", "layer", "neuron", "value",
                        "observation"]
        assert prov["seed"] == "1"
        # 2 observations x 3 agents x 2 hidden layers x 12 units
        assert len(rows) == 2 * 3 * 2 * 12

    def test_entry_point_installed(self):
        out = subprocess.run([sys.executable, "-m", "pruneshare.cli",
                              "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        assert "run" in out.stdout and "sweep" in out.stdout


class TestReplayLog:
    def test_eval_replays_written_and_oracle_checkable(self, tmp_path):
        import lbf_oracle
        from pruneshare.envs import lbf_presets, read_replay_log
        path = write_config(
            tmp_path, env={"name": "LBF1-desk"}, record_replays=True,
            sharing={"mode": "FuPS", "actor_schedule": None,
                     "critic_schedule": None},
            seeds=[1], total_steps=100,
            eval={"interval": 100, "episodes": 3},
            a2c={"hidden": [8, 8, 8], "n_steps": 5})
        config = harness.ExperimentConfig.from_file(path)
        harness.run_experiment(config)
        prov, log = read_replay_log(
            tmp_path / "out" / "run_s1" / "replays.jsonl")
        assert prov["config_hash"] == config.config_hash()
        assert prov["seed"] == 1
        assert len(log) >= 3
        cfg = lbf_presets("LBF1-desk")
        for episode in log:
            want = lbf_oracle.replay(episode["layout"], episode["actions"],
                                     cfg.rows, cfg.cols, cfg.max_steps)
            assert len(want) == len(episode["rewards"])
            for got, exp in zip(episode["rewards"], want):
                assert got == pytest.approx(exp, abs=1e-12)


class TestCrossModeFairness:
    def test_sweep_ratio_zero_equals_fups_run(self, tmp_path):
        # the degenerate row of a sweep reproduces a plain FuPS run
        base = write_config(
            tmp_path, "snp.yaml",
            sharing={"mode": "SNP_PS", "actor_schedule": "0-0",
                     "critic_schedule": "0-0"},
            seeds=[3], total_steps=300,
            out_dir=str(tmp_path / "out_snp"))
        config = harness.ExperimentConfig.from_file(base)
        table = harness.sweep_pruning_ratio(config, "actor", [0.0])

        fups = write_config(
            tmp_path, "fups.yaml",
            sharing={"mode": "FuPS", "actor_schedule": None,
                     "critic_schedule": None},
            seeds=[3], total_steps=300,
            out_dir=str(tmp_path / "out_fups"))
        records = harness.run_experiment(harness.ExperimentConfig.from_file(fups))
        assert table[0]["mean_final_return"] == pytest.approx(
            records[0].final_return)
        curve_a = harness.read_csv(
            tmp_path / "out_snp" / "actor_0" / "run_s3" / "curve.csv")[2]
        curve_b = harness.read_csv(
            tmp_path / "out_fups" / "run_s3" / "curve.csv")[2]
        assert curve_a == curve_b

    def test_eval_envs_identical_across_modes(self, tmp_path):
        # same seed, different sharing mode: evaluation episodes use the
        # same environment randomness (paired comparison)
        from pruneshare.envs import read_replay_log
        layouts = {}
        for mode, sched, out in (("FuPS", None, "out_f"),
                                 ("SNP_PS", "0.5-0.5-0.5", "out_s")):
            path = write_config(
                tmp_path, f"{mode}.yaml", env={"name": "LBF1-desk"},
                record_replays=True,
                sharing={"mode": mode, "actor_schedule": sched,
                         "critic_schedule": sched},
                seeds=[4], total_steps=100,
                eval={"interval": 100, "episodes": 4},
                a2c={"hidden": [8, 8, 8], "n_steps": 5},
                out_dir=str(tmp_path / out))
            harness.run_experiment(harness.ExperimentConfig.from_file(path))
            _, log = read_replay_log(
                tmp_path / out / "run_s4" / "replays.jsonl")
            layouts[mode] = [ep["layout"] for ep in log]
        assert layouts["FuPS"] == layouts["SNP_PS"]


class TestRuntimeFailure:
    def test_partial_results_flushed_and_exit_code_3(self, tmp_path,
                                                     monkeypatch, capsys):
        from pruneshare.errors import TrainingError
        from pruneshare.maa2c import A2cTrainer

        real = A2cTrainer.train_segment
        calls = {"n": 0}

        def explode(self, env):
            calls["n"] += 1
            if calls["n"] > 5:
                raise TrainingError("synthetic numeric failure")
            return real(self, env)

        monkeypatch.setattr(A2cTrainer, "train_segment", explode)
        path = write_config(tmp_path, seeds=[1], total_steps=10_000)
        assert cli_main(["run", str(path)]) == 3
        run_dir = tmp_path / "out" / "run_s1"
        assert (run_dir / "curve.csv").exists()
        assert (run_dir / "train_log.csv").exists()
