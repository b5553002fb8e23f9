"""Harness plumbing: configs, tables, FLOPs, best rate, scaling fit and the CLI."""

import json

import numpy as np
import pytest

from prunevis import cli
from prunevis.autodiff import ContractError
from prunevis.harness import (
    EVAL_COLUMNS,
    RATE_GRID,
    ConfigError,
    DataConfig,
    Evaluator,
    ExperimentConfig,
    SWEEP_COLUMNS,
    best_rate,
    decile_of,
    eval_entries,
    fit_scaling_law,
    forward_flops,
    layer_flops,
    layer_groups,
    lr_at,
    TrainConfig,
    read_table,
    retention_tables,
    sweep_configs,
    sweep_rows,
    write_table,
)
from prunevis.model import ModelConfig, forward, init_params, save_checkpoint, stream_from_sample
from prunevis.pruning import PruneConfig

TINY = ModelConfig(n_layers=3, n_heads=2, d_model=16, d_head=8, vocab_size=512, n_visual=16,
                   feature_dim=40, max_text_len=360, seed=0)


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(TINY)


@pytest.fixture(scope="module")
def few_samples():
    data = DataConfig(bins=(64, 128), n_per_bin=6, seed=5)
    return [e.sample() for e in eval_entries(data)]


@pytest.fixture
def run_dir(tmp_path, tiny_params):
    ckpt = tmp_path / "m.npz"
    save_checkpoint(ckpt, TINY, tiny_params)
    cfg = {
        "seed": 0,
        "out": str(tmp_path / "out"),
        "checkpoint": str(ckpt),
        "data": {"bins": [64, 128, 192], "n_per_bin": 3, "seed": 5},
        "prune_configs": [{"strategy": "MaxPool", "rate": 0.3}, {"strategy": "Random", "rate": 0.3}],
        "metrics": {"wall_time": False},
        "sweep": {"axis": "rate", "grid": [0.0, 0.1, 0.2]},
        "timing": {"repetitions": 5, "bin": 128, "n_samples": 1},
        "flow": {"sample_ids": [0, 1], "bin": 64},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, path


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_bad_section(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"sweep": {"axis": "colour"}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"timing": {"repetitions": 2}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"data": {"bins": [100]}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "none.json")

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(p)

    def test_train_weights(self):
        with pytest.raises(ConfigError):
            TrainConfig(bin_weights=(1.0, 1.0, 0, 0, 0))


class TestTables:
    def test_round_trip(self):
        text = write_table(["a", "b", "c"], [[1, 0.1, [0, 1]], [2, 1 / 3, []]])
        rows = read_table(text)
        assert rows[0] == {"a": "1", "b": "0.1", "c": "0-1"}
        assert float(rows[1]["b"]) == 1 / 3

    def test_schema_required(self):
        with pytest.raises(ContractError):
            read_table("a,b\n1,2\n")

    def test_deciles(self):
        assert [decile_of(j, 20) for j in (0, 1, 2, 19)] == [0, 0, 1, 9]
        assert decile_of(322, 323) == 9


class TestFlops:
    def test_closed_form(self):
        cfg = ModelConfig()
        n, d, h, dk = 336, 64, 4, 16
        per = 6 * n * d * d + 4 * h * n * n * dk + 2 * n * d * d + 4 * n * d * 4 * d
        assert layer_flops(n, cfg) == per
        assert forward_flops([n] * 6, cfg) == 6 * per

    def test_rate_zero_equal(self, tiny_params, few_samples):
        s = stream_from_sample(few_samples[0])
        _, tr, _ = forward(tiny_params, TINY, s, PruneConfig(rate=0.0))
        assert forward_flops([len(a) for a in tr.alive], TINY) == forward_flops([s.length] * 3, TINY)

    def test_pruned_fewer(self, tiny_params, few_samples):
        s = stream_from_sample(few_samples[-1])
        _, tr, _ = forward(tiny_params, TINY, s, PruneConfig(rate=0.3))
        assert forward_flops([len(a) for a in tr.alive], TINY) < forward_flops([s.length] * 3, TINY)

    def test_wrong_count(self):
        with pytest.raises(ContractError):
            forward_flops([10, 10], TINY)


class TestBestRate:
    def test_plateau(self):
        acc = {r: 0.5 for r in RATE_GRID}
        acc.update({0.2: 0.9, 0.25: 0.9, 0.3: 0.9})
        assert abs(best_rate(acc) - 0.25) < 1e-12

    def test_tie_goes_low(self):
        assert abs(best_rate({r: 0.7 for r in RATE_GRID}) - 0.05) < 1e-12

    def test_needs_three(self):
        with pytest.raises(ContractError):
            best_rate({0.0: 1.0, 0.1: 1.0})

    def test_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            acc = {r: float(rng.integers(0, 5)) / 4 for r in RATE_GRID}
            rates = sorted(acc)
            means = [np.mean([acc[r] for r in rates[i:i + 3]]) for i in range(len(rates) - 2)]
            i = int(np.argmax(means))
            assert abs(best_rate(acc) - np.mean(rates[i:i + 3])) < 1e-12


class TestScalingFit:
    def test_exact(self):
        x = np.array([64, 128, 192, 256, 320], float)
        fit = fit_scaling_law(np.stack([x, 0.1 + 0.05 * x + 0.01 * x * x], 1))
        assert abs(fit.a - 0.1) < 1e-9 and abs(fit.b - 0.05) < 1e-9 and abs(fit.c - 0.01) < 1e-9

    def test_collinear(self):
        x = np.arange(5.0)
        fit = fit_scaling_law(np.stack([x, 2 - 0.5 * x], 1))
        assert abs(fit.c) < 1e-9
        assert fit.r2 == pytest.approx(1.0)

    def test_normal_equations(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.uniform(0, 5, 8)
            y = rng.normal(size=8)
            X = np.stack([np.ones_like(x), x, x * x], 1)
            ref = np.linalg.solve(X.T @ X, X.T @ y)
            fit = fit_scaling_law(np.stack([x, y], 1))
            assert np.abs(np.array([fit.a, fit.b, fit.c]) - ref).max() < 1e-8

    def test_too_few(self):
        with pytest.raises(ContractError):
            fit_scaling_law([(1, 0.1), (1, 0.2), (2, 0.3)])


class TestSweep:
    def test_layer_groups(self):
        assert layer_groups(6) == {"shallow": (0, 1), "intermediate": (2, 3), "deep": (4, 5)}

    def test_axes(self):
        assert [c.rate for _, c in sweep_configs("rate", [0.1, 0.2], {}, 6)] == [0.1, 0.2]
        assert sweep_configs("layers", ["deep"], {}, 6)[0][1].layers == (4, 5)
        assert sweep_configs("layer_count", [3], {}, 6)[0][1].layers == (0, 1, 2)
        assert sweep_configs("strategy", ["Random"], {}, 6)[0][1].protect_question
        with pytest.raises(ConfigError):
            sweep_configs("colour", [1], {}, 6)
        with pytest.raises(ConfigError):
            sweep_configs("rate", [], {}, 6)

    def test_row_count_and_order(self, tiny_params, few_samples):
        ev = Evaluator(tiny_params, TINY)
        rows = sweep_rows(ev, few_samples, "rate", [0.2, 0.0, 0.1], {"strategy": "MaxPool"}, 3)
        assert len(rows) == 3 * 2
        keys = [(r[2], float(r[1])) for r in rows]
        assert keys == sorted(keys)
        assert len(rows[0]) == len(SWEEP_COLUMNS)

    def test_singleton_matches_eval(self, tiny_params, few_samples):
        ev = Evaluator(tiny_params, TINY)
        cfg = PruneConfig(rate=0.3)
        rows = sweep_rows(ev, few_samples, "rate", [0.3], {}, 3)
        direct = Evaluator(tiny_params, TINY).rows(few_samples, [cfg])
        assert [r[2:] for r in rows] == [d.cells(3) for d in direct]

    def test_rate_zero_equals_baseline(self, tiny_params, few_samples):
        ev = Evaluator(tiny_params, TINY)
        rows = ev.rows(few_samples, [None, PruneConfig(rate=0.0)])
        acc = EVAL_COLUMNS.index("accuracy")
        for base, zero in zip(rows[::2], rows[1::2]):
            assert base.cells(3)[acc:] == zero.cells(3)[acc:]


class TestRetention:
    def test_rate_zero(self, tiny_params, few_samples):
        recs = [forward(tiny_params, TINY, stream_from_sample(s), PruneConfig(rate=0.0))[2]
                for s in few_samples]
        cats, pos = retention_tables(few_samples, recs, [0])
        assert all(r[-1] == 1.0 for r in cats + pos)

    def test_overall_fraction(self, tiny_params, few_samples):
        prune = PruneConfig(rate=0.3)
        recs = [forward(tiny_params, TINY, stream_from_sample(s), prune)[2] for s in few_samples]
        _, pos = retention_tables(few_samples, recs, [0])
        total = sum(r[2] for r in pos)
        kept = sum(r[3] for r in pos)
        assert all(0 <= r[-1] <= 1 for r in pos)
        n_text = sum(len(s.text_ids) for s in few_samples)
        # layer 0 removes the first half of the budget
        assert total == n_text
        assert abs(kept / total - (1 - sum(r.layers[0].positions.__len__() for r in recs) / n_text)) < 1e-12


class TestLr:
    def test_schedule(self):
        tc = TrainConfig(max_steps=100, min_steps=0, warmup=10, lr=1.0)
        assert lr_at(0, tc) == pytest.approx(0.1, rel=1e-3)
        assert lr_at(50, tc) == pytest.approx(0.5)
        assert lr_at(99, tc) < 0.01


class TestCli:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert cli.main(["eval", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG

    def test_missing_checkpoint(self, run_dir):
        tmp, cfg = run_dir
        code = cli.main(["eval", "--config", str(cfg), "--checkpoint", str(tmp / "missing.npz")])
        assert code == cli.EXIT_CONFIG

    def test_contract_violation(self, run_dir):
        tmp, cfg = run_dir
        d = json.loads(cfg.read_text())
        d["fit_points"] = [[1, 0.1], [1, 0.2], [1, 0.3]]
        cfg.write_text(json.dumps(d))
        assert cli.main(["fit-scaling", "--config", str(cfg)]) == cli.EXIT_CONTRACT

    def test_gate_failure(self, tmp_path):
        cfg = {
            "out": str(tmp_path / "o"), "checkpoint": str(tmp_path / "c.npz"),
            "model": {"n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8},
            "train": {"max_steps": 2, "min_steps": 0, "batch_size": 2, "eval_every": 1, "eval_n": 3,
                      "bin_weights": [1, 0, 0, 0, 0]},
        }
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(p)]) == cli.EXIT_GATE
        log = read_table((tmp_path / "o" / "train_log.csv").read_text())
        assert all(np.isfinite(float(r["loss"])) for r in log)

    def test_train_reproducible(self, tmp_path):
        def run(tag):
            cfg = {
                "out": str(tmp_path / tag), "checkpoint": str(tmp_path / f"{tag}.npz"),
                "model": {"n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8},
                "train": {"max_steps": 2, "min_steps": 0, "batch_size": 2, "eval_every": 1, "eval_n": 3,
                          "bin_weights": [1, 0, 0, 0, 0], "target_accuracy": 0.0},
            }
            p = tmp_path / f"{tag}.json"
            p.write_text(json.dumps(cfg))
            assert cli.main(["train", "--config", str(p)]) == cli.EXIT_OK
            return (tmp_path / f"{tag}.npz").read_bytes()
        assert run("a") == run("b")

    def test_eval_deterministic(self, run_dir, capsys):
        tmp, cfg = run_dir
        assert cli.main(["eval", "--config", str(cfg), "--out", str(tmp / "a")]) == 0
        assert cli.main(["eval", "--config", str(cfg), "--out", str(tmp / "b")]) == 0
        for name in ("eval.csv", "eval_by_size.csv"):
            assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()
        rows = read_table((tmp / "a" / "eval.csv").read_text())
        assert len(rows) == 3 * 3
        assert str(tmp / "a" / "eval.csv") in capsys.readouterr().out

    def test_every_command_runs(self, run_dir):
        tmp, cfg = run_dir
        for cmd in ("probe-priors", "retention", "sweep", "fit-scaling", "timing", "flow"):
            assert cli.main([cmd, "--config", str(cfg)]) == 0, cmd
        out = tmp / "out"
        probe = read_table((out / "probe_priors.csv").read_text())
        for r in probe:
            total = sum(float(r[k]) for k in ("both_correct", "only_with_image", "only_without_image", "both_wrong"))
            assert abs(total - 1) < 1e-12
        assert len(read_table((out / "best_rate.csv").read_text())) == 3
        assert len(read_table((out / "scaling_fit.csv").read_text())) == 4 + 3
        flow = read_table((out / "flow.csv").read_text())
        for r in flow:
            assert float(r["delta"]) == float(r["pruned"]) - float(r["baseline"])

    def test_flow_bad_ids(self, run_dir):
        tmp, cfg = run_dir
        d = json.loads(cfg.read_text())
        d["flow"]["sample_ids"] = [999]
        cfg.write_text(json.dumps(d))
        assert cli.main(["flow", "--config", str(cfg)]) == cli.EXIT_CONFIG
