"""Tests for experiment orchestration: the overall win-rate statistic, CSV
emission and parsing, multi-seed runs with failure isolation, run comparison,
checkpoints, and the CLI verbs."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emarl import cli, harness
from emarl.embedding import EmbeddingConfig
from emarl.env import GridworldConfig
from emarl.incentive import IncentiveConfig
from emarl.marl import TrainConfig


def small_spec(out_dir, *, seeds=(0,), total_steps=300, mode="ei",
               **train_kw):
    return harness.ExperimentSpec(
        env_cfg=GridworldConfig(width=4, height=4, starts=((0, 0), (3, 3)),
                                goals=((3, 3), (0, 0)), t_max=20),
        train_cfg=TrainConfig(total_steps=total_steps, eval_interval=100,
                              eval_episodes=2, batch_episodes=4, **train_kw),
        emb_cfg=EmbeddingConfig(mode="random", embed_dim=4),
        inc_cfg=IncentiveConfig(mode=mode),
        seeds=seeds, capacity=500, delta=0.05, out_dir=str(out_dir))


class TestOverallWinrate:
    def test_constant_one(self):
        steps = np.array([0.0, 100.0, 200.0])
        curves = np.ones((3, 3))
        assert harness.overall_winrate(steps, curves, 200.0) == 1.0

    def test_constant_zero(self):
        steps = np.array([0.0, 100.0, 200.0])
        assert harness.overall_winrate(steps, np.zeros((2, 3)), 200.0) == 0.0

    def test_linear_ramp_is_half(self):
        steps = np.array([0.0, 50.0, 100.0])
        curve = steps / 100.0
        val = harness.overall_winrate(steps, curve[None, :], 100.0)
        assert abs(val - 0.5) < 1e-12

    def test_horizon_truncation_interpolates(self):
        # ramp 0 -> 1 over [0, 100]; over [0, 50] the mean value is 0.25
        steps = np.array([0.0, 100.0])
        curve = np.array([[0.0, 1.0]])
        val = harness.overall_winrate(steps, curve, 50.0)
        assert abs(val - 0.25) < 1e-12

    def test_seed_average(self):
        steps = np.array([0.0, 10.0])
        curves = np.array([[1.0, 1.0], [0.0, 0.0]])
        assert harness.overall_winrate(steps, curves, 10.0) == pytest.approx(0.5)

    def test_errors(self):
        steps = np.array([0.0, 10.0])
        with pytest.raises(ValueError):
            harness.overall_winrate(np.array([]), np.array([]), 1.0)
        with pytest.raises(ValueError):
            harness.overall_winrate(steps, np.zeros((1, 3)), 10.0)
        with pytest.raises(ValueError):
            harness.overall_winrate(steps, np.zeros((1, 2)), 20.0)
        with pytest.raises(ValueError):
            harness.overall_winrate(steps, np.zeros((1, 2)), 0.0)
        with pytest.raises(ValueError):
            harness.overall_winrate(np.array([5.0, 10.0]), np.zeros((1, 2)),
                                    10.0)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_monotone_under_dominance(self, seed, m):
        rng = np.random.default_rng(seed)
        steps = np.concatenate([[0.0], np.cumsum(rng.random(m - 1) + 0.1)])
        f = rng.random(m)
        g = np.minimum(f + rng.random(m), 1.0)  # g >= f pointwise
        horizon = float(steps[-1] * (0.2 + 0.8 * rng.random()))
        lo = harness.overall_winrate(steps, f[None], horizon)
        hi = harness.overall_winrate(steps, g[None], horizon)
        assert lo <= hi + 1e-12

    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
    @settings(max_examples=40, deadline=None)
    def test_refinement_invariance(self, seed, m):
        # resampling a piecewise-linear curve onto midpoints keeps the value
        rng = np.random.default_rng(seed)
        steps = np.concatenate([[0.0], np.cumsum(rng.random(m - 1) + 0.1)])
        f = rng.random(m)
        mids = (steps[:-1] + steps[1:]) / 2
        fine = np.sort(np.concatenate([steps, mids]))
        f_fine = np.interp(fine, steps, f)
        horizon = float(steps[-1])
        a = harness.overall_winrate(steps, f[None], horizon)
        b = harness.overall_winrate(fine, f_fine[None], horizon)
        assert abs(a - b) < 1e-12


class TestCsvRoundtrip:
    def test_nine_significant_digits(self, tmp_path):
        rows = [{"seed": 0, "env_steps": 2000, "test_win_rate": 1 / 3,
                 "mean_test_return": -2.123456789123, "mean_rp": 0.0,
                 "buffer_size": 17, "embedder_loss": 1e-12,
                 "wall_clock_s": 3.5}]
        path = tmp_path / "m.csv"
        harness.write_metrics_csv(str(path), rows)
        text = path.read_text().splitlines()
        assert text[0] == ",".join(harness.CSV_COLUMNS)
        assert "0.333333333" in text[1]
        back = harness.read_metrics_csv(str(path))
        assert back[0]["seed"] == 0
        assert back[0]["buffer_size"] == 17
        assert back[0]["test_win_rate"] == pytest.approx(1 / 3, abs=1e-9)

    def test_rejects_foreign_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            harness.read_metrics_csv(str(path))


class TestRunExperiment:
    def test_zero_steps_header_only(self, tmp_path):
        spec = small_spec(tmp_path / "r0", total_steps=0)
        result = harness.run_experiment(spec)
        assert result["rows"] == []
        out = tmp_path / "r0"
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 1
        summary = json.loads((out / "summary.json").read_text())
        assert summary["final_win_rate"] is None
        assert summary["mu_w"] == {}
        assert (out / "config.json").exists()

    def test_rows_deterministic_across_reruns(self, tmp_path):
        res_a = harness.run_experiment(small_spec(tmp_path / "a",
                                                  seeds=(0, 1)))
        res_b = harness.run_experiment(small_spec(tmp_path / "b",
                                                  seeds=(0, 1)))
        assert len(res_a["rows"]) == len(res_b["rows"]) > 0
        for ra, rb in zip(res_a["rows"], res_b["rows"]):
            for col in harness.CSV_COLUMNS:
                if col == "wall_clock_s":
                    continue  # timing is the one non-reproducible column
                assert ra[col] == rb[col]

    def test_env_steps_strictly_increasing_per_seed(self, tmp_path):
        result = harness.run_experiment(small_spec(tmp_path / "r",
                                                   seeds=(0, 1)))
        by_seed = {}
        for row in result["rows"]:
            by_seed.setdefault(row["seed"], []).append(row["env_steps"])
        for steps in by_seed.values():
            assert all(b > a for a, b in zip(steps, steps[1:]))

    def test_summary_recomputable_from_csv(self, tmp_path):
        spec = small_spec(tmp_path / "r", seeds=(0, 1))
        harness.run_experiment(spec)
        rows = harness.read_metrics_csv(str(tmp_path / "r" / "metrics.csv"))
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        # plain-loop trapezoid, independent of the harness implementation
        by_seed = {}
        for row in rows:
            by_seed.setdefault(row["seed"], []).append(row)
        for key, stored in summary["mu_w"].items():
            horizon = float(key)
            acc = 0.0
            for seed_rows in by_seed.values():
                pts = [(r["env_steps"], r["test_win_rate"])
                       for r in seed_rows if r["env_steps"] <= horizon]
                integral = 0.0
                for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
                    integral += 0.5 * (y0 + y1) * (x1 - x0)
                acc += integral / horizon
            assert abs(acc / len(by_seed) - stored) < 1e-12
        finals = [seed_rows[-1]["test_win_rate"]
                  for seed_rows in by_seed.values()]
        assert summary["final_win_rate"]["mean"] == pytest.approx(
            np.mean(finals), abs=1e-12)
        assert summary["final_win_rate"]["std"] == pytest.approx(
            np.std(finals), abs=1e-12)

    def test_seed_failure_isolated(self, tmp_path, monkeypatch):
        real = harness.train_run

        def flaky(env_cfg, train_cfg, emb_cfg, inc_cfg, **kw):
            if kw["seed"] == 1:
                raise RuntimeError("boom")
            return real(env_cfg, train_cfg, emb_cfg, inc_cfg, **kw)

        monkeypatch.setattr(harness, "train_run", flaky)
        result = harness.run_experiment(small_spec(tmp_path / "r",
                                                   seeds=(0, 1, 2)))
        assert set(result["failures"]) == {1}
        assert not result["all_failed"]
        seeds_in_csv = {r["seed"] for r in result["rows"]}
        assert seeds_in_csv == {0, 2}
        failures = json.loads((tmp_path / "r" / "failures.json").read_text())
        assert "boom" in failures["1"]

    def test_all_seeds_failed_flag(self, tmp_path, monkeypatch):
        monkeypatch.setattr(
            harness, "train_run",
            lambda *a, **k: (_ for _ in ()).throw(RuntimeError("down")))
        result = harness.run_experiment(small_spec(tmp_path / "r",
                                                   seeds=(0, 1)))
        assert result["all_failed"]

    def test_spec_validation(self, tmp_path):
        with pytest.raises(ValueError):
            small_spec(tmp_path, seeds=())
        with pytest.raises(ValueError):
            small_spec(tmp_path, total_steps=50)  # eval_interval=100 > total
        with pytest.raises(ValueError):
            harness.ExperimentSpec(env="atari")
        with pytest.raises(ValueError):
            harness.ExperimentSpec(delta="0.01x")

    def test_auto_delta_resolution(self, tmp_path):
        spec = harness.ExperimentSpec(
            emb_cfg=EmbeddingConfig(embed_dim=4), capacity=10 ** 6,
            delta="auto", out_dir=str(tmp_path))
        assert spec.resolved_delta() == pytest.approx(0.001296, abs=1e-12)


class TestCheckpoints:
    def test_roundtrip_and_eval(self, tmp_path):
        spec = small_spec(tmp_path / "r", seeds=(3,))
        harness.run_experiment(spec)
        win, ret = harness.eval_checkpoint(str(tmp_path / "r"), episodes=4)
        assert 0.0 <= win <= 1.0
        win2, ret2 = harness.eval_checkpoint(str(tmp_path / "r"), episodes=4)
        assert (win, ret) == (win2, ret2)

    def test_missing_checkpoint(self, tmp_path):
        spec = small_spec(tmp_path / "r")
        harness.run_experiment(spec)
        with pytest.raises(FileNotFoundError):
            harness.eval_checkpoint(str(tmp_path / "r"), seed=99)


def synthetic_run(tmp_path, name, win_rates, seeds=(0,)):
    out = tmp_path / name
    out.mkdir()
    rows = []
    for seed in seeds:
        for step, wr in zip((0, 100, 200), win_rates):
            rows.append({"seed": seed, "env_steps": step, "test_win_rate": wr,
                         "mean_test_return": 0.0, "mean_rp": 0.0,
                         "buffer_size": 0, "embedder_loss": 0.0,
                         "wall_clock_s": 0.0})
    harness.write_metrics_csv(str(out / "metrics.csv"), rows)
    return str(out)


class TestCompare:
    def test_dominant_run_ranks_first(self, tmp_path):
        a = synthetic_run(tmp_path, "a", (0.0, 0.4, 0.5))
        b = synthetic_run(tmp_path, "b", (0.2, 0.8, 1.0))
        report = harness.compare_runs([a, b])
        assert report[0]["run"] == b
        assert report[0]["mu_w"] > report[1]["mu_w"]

    def test_tie_keeps_input_order(self, tmp_path):
        a = synthetic_run(tmp_path, "a", (0.5, 0.5, 0.5))
        b = synthetic_run(tmp_path, "b", (0.5, 0.5, 0.5))
        report = harness.compare_runs([a, b])
        assert [r["run"] for r in report] == [a, b]

    def test_grid_mismatch_errors(self, tmp_path):
        a = synthetic_run(tmp_path, "a", (0.0, 0.5, 1.0))
        out = tmp_path / "c"
        out.mkdir()
        rows = [{"seed": 0, "env_steps": s, "test_win_rate": 0.1,
                 "mean_test_return": 0.0, "mean_rp": 0.0, "buffer_size": 0,
                 "embedder_loss": 0.0, "wall_clock_s": 0.0}
                for s in (0, 150, 300)]
        harness.write_metrics_csv(str(out / "metrics.csv"), rows)
        with pytest.raises(ValueError):
            harness.compare_runs([a, str(out)])

    def test_needs_two_runs(self, tmp_path):
        a = synthetic_run(tmp_path, "a", (0.0, 0.5, 1.0))
        with pytest.raises(ValueError):
            harness.compare_runs([a])


class TestCli:
    def test_delta_verb(self, capsys):
        assert cli.main(["delta", "--capacity", "1e6", "--embed-dim", "4",
                         "--sigma", "1.0"]) == 0
        printed = float(capsys.readouterr().out.strip())
        assert abs(printed - 0.001296) < 1e-9

    def test_config_error_exits_one(self, tmp_path, capsys):
        rc = cli.main(["train", "--gamma", "1.5", "--out",
                       str(tmp_path / "x")])
        assert rc == 1

    def test_unknown_verb_exits_one(self, capsys):
        assert cli.main(["explode"]) == 1

    def test_all_failed_exits_two(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(
            harness, "train_run",
            lambda *a, **k: (_ for _ in ()).throw(RuntimeError("down")))
        rc = cli.main(["train", "--total-steps", "100", "--eval-interval",
                       "100", "--seeds", "0", "--embed", "random",
                       "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = {"width": 5, "height": 5, "t_max": 9, "penalty_p": 1.0,
               "train_cfg": {"gamma": 0.9, "total_steps": 200,
                             "eval_interval": 100},
               "seeds": [4]}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        args = cli.build_parser().parse_args(
            ["train", "--config", str(path), "--gamma", "0.8",
             "--out", str(tmp_path / "o")])
        spec = cli.build_spec(args)
        assert spec.env_cfg.width == 5
        assert spec.env_cfg.t_max == 9
        assert spec.env_cfg.penalty_p == 1.0
        assert spec.train_cfg.gamma == 0.8  # flag beats file
        assert spec.train_cfg.total_steps == 200
        assert spec.seeds == (4,)

    def test_emu_out_default_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EMU_OUT", str(tmp_path / "root"))
        args = cli.build_parser().parse_args(["train"])
        spec = cli.build_spec(args)
        assert spec.out_dir.startswith(str(tmp_path / "root"))

    def test_train_and_compare_verbs(self, tmp_path, capsys):
        common = ["--total-steps", "200", "--eval-interval", "100",
                  "--eval-episodes", "2", "--batch-episodes", "4",
                  "--embed", "random", "--delta", "0.05",
                  "--capacity", "300", "--seeds", "0"]
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        assert cli.main(["train", *common, "--incentive", "ei",
                         "--out", a]) == 0
        assert cli.main(["train", *common, "--incentive", "none",
                         "--out", b]) == 0
        assert cli.main(["compare", a, b]) == 0
        out = capsys.readouterr().out
        assert "mu_w" in out
        assert a in out and b in out

    def test_eval_verb(self, tmp_path, capsys):
        out = str(tmp_path / "r")
        assert cli.main(["train", "--total-steps", "100", "--eval-interval",
                         "100", "--eval-episodes", "2", "--batch-episodes",
                         "4", "--embed", "random", "--delta", "0.05",
                         "--capacity", "300", "--seeds", "0",
                         "--out", out]) == 0
        capsys.readouterr()
        assert cli.main(["eval", out, "--episodes", "2"]) == 0
        text = capsys.readouterr().out
        assert "win_rate" in text and "mean_return" in text

    def test_eval_missing_dir_exits_one(self, tmp_path, capsys):
        assert cli.main(["eval", str(tmp_path / "nope")]) == 1
