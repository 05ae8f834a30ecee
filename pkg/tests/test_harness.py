import json
import os

import numpy as np
import pytest
import torch

from commformer.checkpoint import load_container, restore_trainer, save_container, trainer_state
from commformer.cli import main as cli_main
from commformer.config import ConfigError, DEFAULTS, load_config, parse_config, serialize_config
from commformer.envs import pp_spec
from commformer.graph import CommGraph
from commformer.harness import (
    build_trainer,
    cell_seed,
    evaluate_policy,
    load_checkpoint_model,
    parse_sweep,
    run_export,
    run_train,
)
from commformer.model import CommFormerModel, ModelConfig
from commformer.training import param_fingerprint

from oracles import random_walk_expected_steps

TINY_CONFIG = """
# small fast run for tests
env.name = pp
env.episode_length = 10
model.hidden = 16
train.steps = 40
train.rollout_threads = 2
train.batch_size = 20
train.ppo_epochs = 2
run.seed = 1
"""


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("COMMFORMER_DETERMINISTIC", "1")


def write_config(tmp_path, text=TINY_CONFIG, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg["env.name"] == "pp"
        assert cfg["train.ppo_clip"] == 0.05
        assert cfg["train.critic_lr"] == 5e-4
        assert cfg["model.hidden"] == 64

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match=r"<string>:3"):
            parse_config("env.name = pp\n\nenv.bogus = 1\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match=r":1"):
            parse_config("train.gamma = high")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="expected"):
            parse_config("just words")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# comment\n\nenv.grid = 7  # trailing\n")
        assert cfg["env.grid"] == 7

    def test_mode_validation(self):
        with pytest.raises(ConfigError):
            parse_config("run.mode = ring")
        with pytest.raises(ConfigError):
            parse_config("run.mode = fixed-random")  # needs graph seed
        cfg = parse_config("run.mode = fixed-random\nrun.graph_seed = 3")
        assert cfg.graph_seed == 3

    def test_serialize_round_trip(self):
        cfg = parse_config("env.grid = 6\ntrain.sparsity = 0.5\ntrain.use_huber_loss = true")
        again = parse_config(serialize_config(cfg))
        assert again.values == cfg.values

    def test_env_spec_eval_length(self):
        cfg = parse_config("env.episode_length = 100\nenv.eval_episode_length = 20")
        assert cfg.env_spec().max_steps == 100
        assert cfg.env_spec(evaluation=True).max_steps == 20

    def test_with_overrides(self):
        cfg = parse_config("")
        cfg2 = cfg.with_overrides(**{"train.sparsity": 0.5})
        assert cfg2["train.sparsity"] == 0.5
        assert cfg["train.sparsity"] == 1.0
        with pytest.raises(ConfigError):
            cfg.with_overrides(nope=1)

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_every_default_key_serializes(self):
        text = serialize_config(parse_config(""))
        for key in DEFAULTS:
            assert key in text


class TestCheckpointContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7).astype(np.float32),
            "scalar": np.float32(3.5),
        }
        meta = {"note": "x", "k": 2}
        path = tmp_path / "c.ckpt"
        save_container(path, tensors, meta)
        loaded, meta2 = load_container(path)
        assert meta2 == meta
        for name in ("a", "b"):
            assert loaded[name].tobytes() == tensors[name].tobytes()
        assert float(loaded["scalar"]) == 3.5

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        import struct

        header = json.dumps({"format": "other"}).encode()
        path.write_bytes(struct.pack("<Q", len(header)) + header)
        with pytest.raises(ValueError):
            load_container(path)

    def test_trainer_state_round_trip(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        t1 = build_trainer(cfg)
        t1.train_iteration()
        tensors, meta = trainer_state(t1)
        path = tmp_path / "t.ckpt"
        save_container(path, tensors, meta)
        loaded, meta2 = load_container(path)

        t2 = build_trainer(cfg)
        restore_trainer(t2, loaded, meta2)
        assert param_fingerprint(list(t2.model.parameters())) == param_fingerprint(
            list(t1.model.parameters())
        )
        assert torch.equal(t2.alpha.detach(), t1.alpha.detach())
        assert t2.env_steps == t1.env_steps
        assert torch.equal(t2.torch_gen.get_state(), t1.torch_gen.get_state())
        # optimizer moments restored: the next update step matches exactly
        noise1, noise2 = t1._draw_noise(), t2._draw_noise()
        assert torch.equal(noise1, noise2)

    def test_saved_again_is_byte_identical(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        t1 = build_trainer(cfg)
        t1.train_iteration()
        tensors, meta = trainer_state(t1)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_container(p1, tensors, meta)
        loaded, meta2 = load_container(p1)
        t2 = build_trainer(cfg)
        restore_trainer(t2, loaded, meta2)
        tensors2, meta_b = trainer_state(t2)
        save_container(p2, tensors2, meta_b)
        assert p1.read_bytes() == p2.read_bytes()


class TestRunTrain:
    def test_artifacts(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        out = tmp_path / "run"
        run_train(cfg, out)
        assert (out / "config.txt").exists()
        assert (out / "final.ckpt").exists()
        metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(metrics) == 2  # 40 steps / (10 steps * 2 envs)
        assert metrics[0]["env_steps"] == 20
        snaps = [json.loads(l) for l in (out / "snapshots.jsonl").read_text().splitlines()]
        assert len(snaps) == 2
        assert np.asarray(snaps[0]["edges"]).shape == (3, 3)

    def test_metrics_byte_identical_across_runs(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        run_train(cfg, tmp_path / "r1")
        run_train(cfg, tmp_path / "r2")
        assert (tmp_path / "r1/metrics.jsonl").read_bytes() == (
            tmp_path / "r2/metrics.jsonl"
        ).read_bytes()
        assert (tmp_path / "r1/snapshots.jsonl").read_bytes() == (
            tmp_path / "r2/snapshots.jsonl"
        ).read_bytes()
        assert (tmp_path / "r1/final.ckpt").read_bytes() == (
            tmp_path / "r2/final.ckpt"
        ).read_bytes()


class TestEvaluatePolicy:
    def test_greedy_deterministic(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        tr = build_trainer(cfg)
        spec = cfg.env_spec(evaluation=True)
        r1 = evaluate_policy(tr.model, tr.current_graph(), spec, 20, seed=3)
        r2 = evaluate_policy(tr.model, tr.current_graph(), spec, 20, seed=3)
        assert r1 == r2
        assert r1["episodes"] == 20

    def test_random_policy_matches_absorption_oracle(self):
        # uniform-random play on the 5x5 pursuit task has a closed-form
        # expected episode length from the absorbing-chain analysis
        expected = random_walk_expected_steps(5, 3, 20)
        spec = pp_spec(max_steps=20)
        model = CommFormerModel(
            ModelConfig(
                obs_dim=spec.obs_dim, n_agents=3, action_dims=spec.action_dims,
                classes=spec.classes, hidden=16,
            )
        )
        graph = CommGraph(edges=torch.ones(3, 3), k=3)
        report = evaluate_policy(model, graph, spec, episodes=3000, seed=5, policy="random")
        assert abs(report["mean_steps"] - expected) < 0.5

    def test_invalid_policy(self):
        spec = pp_spec()
        model = CommFormerModel(
            ModelConfig(
                obs_dim=spec.obs_dim, n_agents=3, action_dims=spec.action_dims,
                classes=spec.classes, hidden=16,
            )
        )
        with pytest.raises(ValueError):
            evaluate_policy(model, CommGraph(edges=torch.ones(3, 3), k=3), spec, 1, 0, policy="x")


class TestSweep:
    def test_parse(self):
        sweep = parse_sweep(
            "sweep.sparsity = 0.5 1.0\nsweep.modes = diagonal-only\nsweep.train_seeds = 2"
        )
        assert sweep["sparsity"] == [0.5, 1.0]
        assert sweep["modes"] == ["diagonal-only"]
        assert sweep["train_seeds"] == 2

    def test_empty_sweep_rejected(self):
        with pytest.raises(ConfigError, match="empty sweep"):
            parse_sweep("sweep.train_seeds = 3")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match=":1"):
            parse_sweep("sweep.what = 1")

    def test_cell_seed_stable(self):
        assert cell_seed(0, "learned_S1") == cell_seed(0, "learned_S1")
        assert cell_seed(0, "learned_S1") != cell_seed(0, "learned_S0.5")
        assert cell_seed(0, "x") >= 0


class TestExport:
    def test_single_run_export(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        run_dir = tmp_path / "run"
        run_train(cfg, run_dir)
        out = run_export(run_dir)
        assert (out / "mean_return.csv").exists()
        assert (out / "learning_curves.png").exists()
        assert (out / "adjacency_evolution.png").exists()
        rows = (out / "mean_return.csv").read_text().splitlines()
        assert rows[0] == "env_steps,mean,std"
        assert len(rows) == 3
        # repr round-trip: the written floats parse back exactly
        metrics = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
        for row, rec in zip(rows[1:], metrics):
            steps, mean, std = row.split(",")
            assert float(steps) == rec["env_steps"]
            assert float(mean) == rec["mean_return"]
            assert float(std) == 0.0
        frames = sorted((out / "frames").glob("edges_*.csv"))
        assert len(frames) == 2

    def test_missing_run_dir(self, tmp_path):
        with pytest.raises(ConfigError):
            run_export(tmp_path / "nothing")


class TestCli:
    def test_train_eval_export_flow(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        out = tmp_path / "run"
        assert cli_main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        capsys.readouterr()
        assert cli_main(
            ["eval", "--ckpt", str(out / "final.ckpt"), "--episodes", "5", "--seed", "0"]
        ) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["episodes"] == 5
        assert cli_main(["export", "--run", str(out)]) == 0

    def test_usage_errors_exit_1(self):
        assert cli_main(["train"]) == 1  # missing --config
        assert cli_main(["unknown-command"]) == 1
        assert cli_main(["eval", "--ckpt", "x"]) == 1  # missing required args

    def test_bad_config_exit_1(self, tmp_path):
        bad = write_config(tmp_path, "env.bogus = 1", name="bad.cfg")
        assert cli_main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1

    def test_missing_checkpoint_exit_2(self, tmp_path):
        rc = cli_main(["eval", "--ckpt", str(tmp_path / "no.ckpt"), "--episodes", "1", "--seed", "0"])
        assert rc == 2

    def test_ablate(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        sweep_path = tmp_path / "sweep.cfg"
        sweep_path.write_text(
            "sweep.modes = diagonal-only\nsweep.train_seeds = 1\nsweep.eval_episodes = 5\n"
        )
        out = tmp_path / "abl"
        rc = cli_main(
            ["ablate", "--config", str(cfg_path), "--sweep", str(sweep_path), "--out", str(out)]
        )
        assert rc == 0
        table = (out / "ablation.csv").read_text().splitlines()
        assert table[0].startswith("cell,")
        assert len(table) == 2
        assert (out / "ablation.png").exists()
        assert (out / "summary.txt").exists()
        # refuses to clobber an existing cell
        rc2 = cli_main(
            ["ablate", "--config", str(cfg_path), "--sweep", str(sweep_path), "--out", str(out)]
        )
        assert rc2 == 1

    def test_loaded_checkpoint_reproduces_greedy_eval(self, tmp_path):
        cfg = parse_config(TINY_CONFIG)
        out = tmp_path / "run"
        trainer = run_train(cfg, out)
        model, graph, cfg2, _ = load_checkpoint_model(out / "final.ckpt")
        spec = cfg2.env_spec(evaluation=True)
        direct = evaluate_policy(trainer.model, trainer.current_graph(), spec, 20, seed=9)
        loaded = evaluate_policy(model, graph, spec, 20, seed=9)
        assert direct == loaded
