import json

import pytest
import yaml

from fedhyp.cli import ablation_grid, main, parse_ablate
from fedhyp.config import ConfigError, RunConfig, config_header, load_config
from fedhyp.metrics import read_ledger

SMALL = {"rounds": 1, "n_source_per_agent": 80, "pretrain_epochs": 1,
         "test_car": [4, 2, 2, 2], "test_drone": [2, 2, 2, 2]}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"defaults": SMALL, "seed": 3}))
    return path


class TestConfig:
    def test_reference_defaults(self):
        cfg = RunConfig()
        assert (cfg.lambda_cl, cfg.beta, cfg.beta_prime, cfg.queue_size, cfg.gamma_init, cfg.rounds,
                cfg.clients_per_round) == (140.0, 0.85, 0.85, 5, 0.1, 100, 5)

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"defaults": {"seed": 1, "rounds": 7}, "seed": 2}))
        cfg = load_config(path, {"seed": None, "scenario": "ii"})
        assert (cfg.seed, cfg.rounds, cfg.scenario) == (2, 7, "ii")
        assert load_config(path, {"seed": 9}).seed == 9

    @pytest.mark.parametrize("bad", [{"beta": 1.5}, {"scenario": "iv"}, {"nope": 1}, {"world": {"x": 1}},
                                     {"exp_map": "other"}, {"workers": 0}])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            load_config(None, bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_toggles_derive_effective_values(self):
        cfg = RunConfig(clustering_loss=False, queue_agg=False)
        assert cfg.effective_lambda == 0.0 and cfg.effective_queue == 0
        assert RunConfig().effective_queue == 5

    def test_header_is_resolved_config(self):
        header = config_header(RunConfig(seed=4))
        assert header["seed"] == 4 and "lambda_cl" in header["defaults_provenance"]

    def test_replace_roundtrip(self):
        cfg = RunConfig(hidden=(8, 4))
        assert cfg.replace(seed=2).hidden == (8, 4)


class TestAblation:
    def test_grid_is_full_factorial(self):
        cells = ablation_grid(RunConfig(), parse_ablate("weather_bn,queue_agg"))
        assert len(cells) == 4
        assert len({name for name, _ in cells}) == 4
        combos = {(c.weather_bn, c.queue_agg) for _, c in cells}
        assert combos == {(True, True), (True, False), (False, True), (False, False)}

    def test_unknown_toggle(self):
        with pytest.raises(ConfigError):
            parse_ablate("weather_bn,bogus")


class TestCommands:
    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert main(["pretrain", "--config", str(tmp_path / "none.yaml"), "--out-dir", str(tmp_path)]) == 2
        assert "config" in capsys.readouterr().err

    def test_bad_toggle_exit_2(self, tmp_path, config_file):
        assert main(["run", "--config", str(config_file), "--out-dir", str(tmp_path), "--ablate", "x"]) == 2

    def test_bad_scenario_flag(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["pretrain", "--scenario", "iv"])
        assert err.value.code == 2

    def test_corrupt_checkpoint_exit_3(self, tmp_path, config_file):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a checkpoint")
        assert main(["eval", "--config", str(config_file), "--checkpoint", str(bad), "--out-dir", str(tmp_path)]) == 3

    def test_pretrain_deterministic(self, tmp_path, config_file):
        for d in ("a", "b"):
            assert main(["pretrain", "--config", str(config_file), "--out-dir", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "pretrained.npz").read_bytes()
        assert a == (tmp_path / "b" / "pretrained.npz").read_bytes()
        assert (tmp_path / "a" / "source_only.json").exists()

    def test_generate(self, tmp_path, config_file):
        assert main(["generate", "--config", str(config_file), "--out-dir", str(tmp_path)]) == 0
        assert {p.name for p in tmp_path.glob("*.npz")} == {"source.npz", "clients.npz", "test.npz"}

    def test_adapt_grid_and_eval(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert main(["pretrain", "--config", str(config_file), "--out-dir", str(out)]) == 0
        ck = str(out / "pretrained.npz")
        assert main(["adapt", "--config", str(config_file), "--checkpoint", ck, "--out-dir", str(out),
                     "--ablate", "clustering_loss,weather_bn,queue_agg"]) == 0
        ledgers = sorted(out.glob("*/ledger.jsonl"))
        assert len(ledgers) == 8
        baseline = out / "clustering_loss-off_weather_bn-off_queue_agg-off" / "ledger.jsonl"
        config, _ = read_ledger(baseline)
        assert not config["clustering_loss"] and not config["weather_bn"] and not config["queue_agg"]
        assert config["seed"] == 3

        final = str(baseline.parent / "final.npz")
        args = ["eval", "--config", str(config_file), "--checkpoint", final, "--ledger", str(baseline)]
        assert main(args + ["--out-dir", str(tmp_path / "e1")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / "e2")]) == 0
        r1 = (tmp_path / "e1" / "eval.json").read_text()
        assert r1 == (tmp_path / "e2" / "eval.json").read_text()
        report = json.loads(r1)
        assert {"clear", "night", "rain", "fog"} <= set(report["metrics"])
        assert "all" in report["gap"]

    def test_zero_rounds_adapt(self, tmp_path, config_file):
        out = tmp_path / "r0"
        assert main(["run", "--config", str(config_file), "--rounds", "0", "--out-dir", str(out)]) == 0
        _, rows = read_ledger(out / "ledger.jsonl")
        assert [r["round"] for r in rows if r["type"] == "round"] == [0]
