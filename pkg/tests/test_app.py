"""Tests for the command-line entry point."""

import sys
sys.path.insert(0, ".")

from app import main
from core.report import read_csv

SMALL_CONFIG = """\
[scenario]
duration = 10.0

[channel]
delay_ceiling = 10.0

[experiment]
algorithms = ["tskf", "ekf"]
runs = 1
delay_cells = [5.0]
include_dynamic = false
"""


def _small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return str(path)


class TestValidate:
    def test_shipped_config(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["validate", "--output-dir", str(out)]) == 0
        assert "Config OK" in capsys.readouterr().out
        assert not out.exists()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[channel]\nloss_probability = 1.5\n", encoding="utf-8")
        assert main(["validate", "--config", str(path)]) == 2
        assert "channel.loss_probability" in capsys.readouterr().err

    def test_wrongly_typed_value_exit_code(self, tmp_path, capsys):
        path = tmp_path / "typed.toml"
        path.write_text("[logging]\nlevel = 3\n", encoding="utf-8")
        assert main(["validate", "--config", str(path)]) == 2
        assert "logging.level" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["bogus"]) != 0

    def test_unknown_algorithm(self, capsys):
        assert main(["validate", "--algorithms", "tskf,pf"]) == 2


class TestRun:
    def test_writes_csvs(self, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(["run", "--config", _small_config(tmp_path), "--output-dir", str(out)]) == 0
        for name in ("results.csv", "runs.csv", "results_timing.csv", "timing.csv"):
            assert (out / name).exists(), name
        schema, results = read_csv(out / "results.csv")
        assert schema == "results/v1"
        assert set(results["algorithm"]) == {"tskf", "ekf"}
        assert "Proposed TSKF" in capsys.readouterr().out

    def test_accuracy_files_repeat_byte_for_byte(self, tmp_path, capsys):
        config = _small_config(tmp_path)
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", config, "--output-dir", str(first), "--seed", "7"]) == 0
        assert main(["run", "--config", config, "--output-dir", str(second), "--seed", "7"]) == 0
        for name in ("results.csv", "runs.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_xlsx(self, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(["run", "--config", _small_config(tmp_path), "--output-dir", str(out), "--xlsx"]) == 0
        assert (out / "results.xlsx").exists()


class TestTraceAndOracle:
    def test_trace(self, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(["trace", "--config", _small_config(tmp_path), "--output-dir", str(out)]) == 0
        assert (out / "trace" / "trace.csv").exists()
        assert (out / "trace" / "channel.csv").exists()
        assert "tskf" in capsys.readouterr().out

    def test_oracle(self, capsys):
        assert main(["oracle"]) == 0
        assert "oracle checks passed" in capsys.readouterr().out
