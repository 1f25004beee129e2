import csv
import json
import math

import numpy as np
import pytest
import yaml

from wdlnsim import cli
from wdlnsim.config import TABLE_DISTANCES_M, TABLE_RATES, from_dict, load_config
from wdlnsim.errors import ConfigError
from wdlnsim.harness import (CSV_HEADER, compute_regret, compute_required_rounds, count_loss_spikes,
                             emit_outputs, mean_ci, report, run_experiment, run_instance)

SMALL = {
    "devices": {"distances_m": [100, 200, 300, 400, 500, 350], "rates": [1, 3, 5, 10, 1, 3]},
    "experiment": {"W": 2, "rounds": 40, "instances": 3, "base_seed": 5},
    "scheduler": {"names": ["alsa-pi", "rr", "bench"]},
}


def small_cfg(**overrides):
    raw = json.loads(json.dumps(SMALL))
    for section, body in overrides.items():
        raw.setdefault(section, {}).update(body)
    return from_dict(raw)


class TestRequiredRounds:
    def test_example(self):
        assert compute_required_rounds([0.8, 0.9, 0.9, 0.9], 0.85) == 2

    def test_never(self):
        assert compute_required_rounds([0.5] * 10, 0.6) is None

    def test_zero_target(self):
        assert compute_required_rounds([0.1, 0.0], 0.0) == 1

    def test_strict_exceedance(self):
        assert compute_required_rounds([0.85] * 5, 0.85) is None

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_required_rounds([], 0.5)


class TestRegret:
    def test_optimal_rewards(self):
        np.testing.assert_allclose(compute_regret([0.3] * 10, 0.3), 0.0, atol=1e-15)

    def test_zero_rewards(self):
        np.testing.assert_allclose(compute_regret(np.zeros(5), 0.4), 0.4 * np.arange(1, 6))


class TestMeanCi:
    def test_against_scipy_free_reference(self):
        x = np.array([[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]])
        mean, lo, hi = mean_ci(x)
        np.testing.assert_allclose(mean, [3.0, 2.0])
        # t_{0.975, 2} = 4.302652729911275
        half = 4.302652729911275 * 2.0 / math.sqrt(3)
        np.testing.assert_allclose(hi - mean, [half, 0.0], rtol=1e-9)
        np.testing.assert_allclose(mean - lo, hi - mean)

    def test_single_instance(self):
        mean, lo, hi = mean_ci(np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(lo, mean)


class TestLossSpikes:
    def test_counts_jumps(self):
        assert count_loss_spikes([1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.6, 1.0]) == 2

    def test_flat(self):
        assert count_loss_spikes(np.linspace(2, 1, 50)) == 0


class TestRunExperiment:
    def test_bench_scores_arrivals(self):
        cfg = small_cfg()
        res, recs = run_instance(cfg, "bench", 0, keep_records=True)
        np.testing.assert_allclose(res.F, [r.m.sum() for r in recs])
        assert np.all(res.stragglers == 0)

    def test_paired_environment(self):
        cfg = small_cfg()
        _, a = run_instance(cfg, "rr", 1, keep_records=True)
        _, b = run_instance(cfg, "alsa-pi", 1, keep_records=True)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.m, rb.m)
            np.testing.assert_array_equal(ra.gains, rb.gains)

    def test_regret_reference(self):
        summary, results = run_experiment(small_cfg())
        assert "proxy" in summary.regret_reference
        for r in results:
            if r.scheduler == "alsa-pi":
                assert abs(r.regret[-1]) < 1e-9

    def test_ci_nonnegative(self):
        summary, _ = run_experiment(small_cfg())
        for md in summary.metrics.values():
            for d in md.values():
                ok = ~np.isnan(d["mean"])
                assert np.all(d["ci_hi"][ok] - d["ci_lo"][ok] >= 0)

    def test_learner_targets(self):
        cfg = small_cfg(fl={"enabled": True, "snapshot_every": 2}, experiment={"targets": [0.0, 0.99]})
        summary, results = run_experiment(cfg, schedulers=["bench"])
        assert summary.satisfaction_rate["bench"]["0.0"] == 1.0
        assert summary.required_rounds["bench"]["0.0"] == 2.0
        assert summary.satisfaction_rate["bench"]["0.99"] == 0.0
        assert np.isnan(results[0].accuracy[0]) and not np.isnan(results[0].accuracy[1])


class TestOutputs:
    def test_empty_run(self, tmp_path):
        cfg = small_cfg(experiment={"rounds": 0})
        summary, results = run_experiment(cfg)
        paths = emit_outputs(results, summary, tmp_path)
        for p in paths["instances"]:
            assert p.read_text() == ",".join(CSV_HEADER) + "\n"
        assert paths["long"].read_text().count("\n") == 1

    def test_columns_and_invariants(self, tmp_path):
        summary, results = run_experiment(small_cfg())
        paths = emit_outputs(results, summary, tmp_path)
        for p in paths["instances"]:
            rows = list(csv.reader(p.read_text().splitlines()))
            assert rows[0] == CSV_HEADER
            assert {len(r) for r in rows} == {len(CSV_HEADER)}
        rows = list(csv.reader(paths["long"].read_text().splitlines()))
        assert {len(r) for r in rows} == {6}

    def test_independent_reaggregation(self, tmp_path):
        summary, results = run_experiment(small_cfg())
        emit_outputs(results, summary, tmp_path)
        sums = {}
        for p in sorted((tmp_path / "instances").glob("*.csv")):
            for row in csv.DictReader(p.read_text().splitlines()):
                key = (row["scheduler"], int(row["round"]))
                sums.setdefault(key, []).append(float(row["F"]))
        doc = json.loads((tmp_path / "summary.json").read_text())
        for (sched, t), vals in sums.items():
            assert doc["metrics"][sched]["F"]["mean"][t - 1] == pytest.approx(sum(vals) / len(vals), abs=1e-9)

    def test_report_roundtrip(self, tmp_path):
        summary, results = run_experiment(small_cfg())
        emit_outputs(results, summary, tmp_path / "a")
        report(tmp_path / "a", tmp_path / "b")
        for name in ("summary.json", "summary_long.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_byte_identical_reruns(self, tmp_path):
        for d in ("x", "y"):
            summary, results = run_experiment(small_cfg(fl={"enabled": True}))
            emit_outputs(results, summary, tmp_path / d)
        files = sorted(p.relative_to(tmp_path / "x") for p in (tmp_path / "x").rglob("*.csv"))
        files.append("summary.json")
        for f in files:
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


class TestConfig:
    def test_defaults_are_table(self):
        cfg = from_dict({})
        assert cfg.U == 25 and cfg.W == 5 and cfg.gamma == 0.01
        assert list(cfg.rates) == TABLE_RATES and list(cfg.distances_m) == TABLE_DISTANCES_M
        assert (cfg.fl.eta_d, cfg.fl.beta, cfg.rounds, cfg.instances) == (0.01, 0.001, 2000, 20)

    @pytest.mark.parametrize("raw,field", [
        ({"experiment": {"W": 30}}, "experiment.W"),
        ({"experiment": {"wdith": 3}}, "experiment.wdith"),
        ({"devices": {"rates": [1, 2]}}, "devices.distances_m"),
        ({"channel": {"ber_model": "turbo"}}, "channel.ber_model"),
        ({"fl": {"beta": 1.5}}, "fl.beta"),
        ({"scheduler": {"name": "oracle"}}, "scheduler"),
        ({"experiment": {"rounds": "many"}}, "experiment.rounds"),
        ({"radio": {}}, "radio"),
    ])
    def test_field_precise_errors(self, raw, field):
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            from_dict(raw)

    def test_load_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(SMALL))
        assert load_config(p).W == 2

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("experiment: [unclosed")
        with pytest.raises(ConfigError):
            load_config(p)


class TestCli:
    def test_simulate_and_report(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump(SMALL))
        assert cli.main(["simulate", "--config", str(cfg), "--scheduler", "rr", "--scheduler", "wmax",
                         "--rounds", "10", "--instances", "2", "--seed", "3", "--out", str(tmp_path / "o")]) == 0
        assert len(list((tmp_path / "o" / "instances").glob("*.csv"))) == 4
        assert cli.main(["report", "--in", str(tmp_path / "o"), "--out", str(tmp_path / "r")]) == 0
        assert (tmp_path / "r" / "summary.json").exists()

    def test_oracle(self, tmp_path):
        cfg = tmp_path / "o.yaml"
        cfg.write_text(yaml.safe_dump({"devices": {"distances_m": [200, 350], "rates": [0.8, 1.5]},
                                       "experiment": {"W": 1}, "oracle": {"gain_bins": 2, "n_max": 3}}))
        assert cli.main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
        doc = json.loads((tmp_path / "out" / "oracle.json").read_text())
        assert doc["num_states"] == 64 and len(doc["policy"]) == 64
        assert doc["greedy_gap"] >= -1e-9

    def test_oracle_too_large(self, tmp_path, capsys):
        cfg = tmp_path / "o.yaml"
        cfg.write_text(yaml.safe_dump({"experiment": {"W": 1}}))
        assert cli.main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "out")]) != 0
        assert "exact-oracle limit" in capsys.readouterr().err

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"experiment": {"W": 0}}))
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) != 0
        assert "experiment.W" in capsys.readouterr().err
