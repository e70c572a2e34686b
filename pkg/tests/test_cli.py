import csv
import json

import pytest
from click.testing import CliRunner

from stfusion import cli
from stfusion import data as D
from stfusion.lab import PreferenceReport


def base_config(**overrides):
    cfg = {
        "template": {
            "num_blocks": 1,
            "layers_per_block": 2,
            "growth_channels": 4,
            "stem_channels": 4,
            "clip_shape": [1, 4, 8, 8],
            "num_classes": 2,
        },
        "schedule": {
            "warmup_epochs": 2,
            "main_epochs": 2,
            "batch_size": 8,
            "lr": 0.03,
            "lr_decay_epochs": [3],
            "seed": 1,
        },
        "objective": {"k": 1.0},
        "data": {
            "mode": "temporal_only",
            "classes": 2,
            "clips_per_class": 8,
            "clip_shape": [1, 4, 8, 8],
            "noise_sigma": 0.0,
            "seed": 1,
            "train_frac": 0.5,
        },
        "sampling": {"count": 6, "seed": 1},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def invoke(runner, args):
    return runner.invoke(cli.main, args, catch_exceptions=False)


class TestGenerate:
    def test_writes_dataset(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        wd = tmp_path / "run"
        result = invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == 0
        ds = D.load(wd / cli.DATASET_FILE)
        assert len(ds) == 16

    def test_seed_override_changes_data(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        wd1, wd2 = tmp_path / "a", tmp_path / "b"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd1)])
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd2), "--seed", "99"])
        a = D.load(wd1 / cli.DATASET_FILE)
        b = D.load(wd2 / cli.DATASET_FILE)
        assert not a.equals(b)

    def test_missing_field_exit_2(self, runner, tmp_path):
        cfg = base_config()
        del cfg["template"]["growth_channels"]
        cfg_path = write_config(tmp_path, cfg)
        result = runner.invoke(cli.main, ["generate", "--config", cfg_path, "--workdir", str(tmp_path / "run")])
        assert result.exit_code == cli.EXIT_CONFIG
        assert "template.growth_channels" in result.output

    def test_mismatched_shapes_exit_2(self, runner, tmp_path):
        cfg = base_config()
        cfg["data"]["clip_shape"] = [1, 8, 8, 8]
        cfg_path = write_config(tmp_path, cfg)
        result = runner.invoke(cli.main, ["generate", "--config", cfg_path, "--workdir", str(tmp_path / "run")])
        assert result.exit_code == cli.EXIT_CONFIG

    def test_unreadable_config_exit_2(self, runner, tmp_path):
        result = runner.invoke(cli.main, ["generate", "--config", str(tmp_path / "nope.json"),
                                          "--workdir", str(tmp_path / "run")])
        assert result.exit_code == cli.EXIT_CONFIG


class TestTrain:
    def test_artifacts_and_history(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        wd = tmp_path / "run"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        result = invoke(runner, ["train", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == 0
        for name in (cli.WEIGHTS_FILE, cli.GATES_FILE, cli.HISTORY_FILE):
            assert (wd / name).exists()
        history = json.loads((wd / cli.HISTORY_FILE).read_text())
        assert [h["phase"] for h in history] == ["warmup", "warmup", "main", "main"]

    def test_warmup_only_when_main_zero(self, runner, tmp_path):
        cfg = base_config()
        cfg["schedule"]["main_epochs"] = 0
        cfg_path = write_config(tmp_path, cfg)
        wd = tmp_path / "run"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        invoke(runner, ["train", "--config", cfg_path, "--workdir", str(wd)])
        history = json.loads((wd / cli.HISTORY_FILE).read_text())
        assert all(h["phase"] == "warmup" for h in history) and len(history) == 2

    def test_rerun_history_byte_identical(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        wd = tmp_path / "run"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        invoke(runner, ["train", "--config", cfg_path, "--workdir", str(wd)])
        first = (wd / cli.HISTORY_FILE).read_bytes()
        invoke(runner, ["train", "--config", cfg_path, "--workdir", str(wd)])
        assert (wd / cli.HISTORY_FILE).read_bytes() == first

    def test_missing_dataset_exit_4(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        result = runner.invoke(cli.main, ["train", "--config", cfg_path, "--workdir", str(tmp_path / "empty")])
        assert result.exit_code == cli.EXIT_MISSING
        assert "missing artifact" in result.output


class TestSampleEvalAndReport:
    @pytest.fixture
    def trained(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        wd = tmp_path / "run"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        invoke(runner, ["train", "--config", cfg_path, "--workdir", str(wd)])
        return cfg_path, wd

    def test_sample_eval_outputs(self, runner, trained):
        cfg_path, wd = trained
        result = invoke(runner, ["sample-eval", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == 0
        with open(wd / cli.EVALS_FILE) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 6
        accs = [float(r["val_accuracy"]) for r in rows]
        assert accs == sorted(accs, reverse=True)
        best = json.loads((wd / cli.BEST_FILE).read_text())
        assert best["val_accuracy"] == accs[0]

    def test_sample_eval_missing_weights_exit_4(self, runner, tmp_path):
        cfg_path = write_config(tmp_path, base_config())
        wd = tmp_path / "run"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        result = runner.invoke(cli.main, ["sample-eval", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == cli.EXIT_MISSING

    def test_report_rows(self, runner, trained):
        cfg_path, wd = trained
        invoke(runner, ["sample-eval", "--config", cfg_path, "--workdir", str(wd)])
        result = invoke(runner, ["report", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == 0
        with open(wd / cli.PREFERENCE_FILE) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert list(rows[0]) == PreferenceReport.CSV_HEADER
        for r in rows:
            total = sum(float(r[k]) for k in ("freq_S", "freq_ST", "freq_SST", "freq_skip"))
            assert abs(total - 1.0) < 1e-12
            assert abs(float(r["eq7_S"]) - (1 - float(r["p_S"]) ** 0.5)) < 1e-12

    def test_report_missing_best_exit_4(self, runner, trained):
        cfg_path, wd = trained
        result = runner.invoke(cli.main, ["report", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == cli.EXIT_MISSING


class TestOracle:
    def test_single_layer_oracle(self, runner, tmp_path):
        cfg = base_config()
        cfg["template"]["layers_per_block"] = 1
        cfg["schedule"]["warmup_epochs"] = 1
        cfg["schedule"]["main_epochs"] = 1
        cfg_path = write_config(tmp_path, cfg)
        wd = tmp_path / "run"
        invoke(runner, ["generate", "--config", cfg_path, "--workdir", str(wd)])
        invoke(runner, ["train", "--config", cfg_path, "--workdir", str(wd)])
        result = invoke(runner, ["oracle", "--config", cfg_path, "--workdir", str(wd)])
        assert result.exit_code == 0
        with open(wd / cli.ORACLE_FILE) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3  # one line per single-layer fusion unit
        rho = json.loads((wd / cli.RHO_FILE).read_text())
        assert -1.0 <= rho["spearman_rho"] <= 1.0
        assert len(rho["oracle_accuracies"]) == 3

    def test_size_guard_exit_5(self, runner, tmp_path):
        cfg = base_config()
        cfg["template"]["layers_per_block"] = 11  # 3^11 strategies trips the guard
        cfg_path = write_config(tmp_path, cfg)
        result = runner.invoke(cli.main, ["oracle", "--config", cfg_path, "--workdir", str(tmp_path / "run")])
        assert result.exit_code == cli.EXIT_GUARD
        assert "size guard" in result.output
