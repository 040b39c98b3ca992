"""End-to-end tests of the ``hiast`` command line."""

import json

import pytest

from hiast.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, cli_main
from hiast.storage import load_dataset, read_csv, read_json


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "experiment.json"
    cfg = tiny_config.model_copy(update={"rounds": 1, "iterations_per_round": 3, "warmup_iterations": 6})
    path.write_text(json.dumps(cfg.model_dump()), encoding="utf-8")
    return path


# ── Usage ─────────────────────────────────────────────────────────────

class TestUsage:
    """Exit codes for bad invocations."""

    def test_help(self, capsys):
        """--help exits 0."""
        assert cli_main(["--help"]) == EXIT_OK
        assert "synth" in capsys.readouterr().out

    def test_missing_subcommand(self):
        """A subcommand is required."""
        assert cli_main([]) == EXIT_USAGE

    def test_unknown_flag(self):
        """Unknown flags are usage errors."""
        assert cli_main(["train", "--no-such-flag"]) == EXIT_USAGE

    def test_bad_config_file(self, tmp_path):
        """A config with unknown keys exits 1."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"rounds": 1, "learning_rate": 3}), encoding="utf-8")
        assert cli_main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_USAGE

    def test_out_of_range_override(self, tmp_path, config_file):
        """Negative rounds exit 1."""
        assert cli_main(["train", "--config", str(config_file), "--rounds", "-1",
                         "--out", str(tmp_path / "run")]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        """Evaluating a checkpoint that does not exist is a runtime error."""
        assert cli_main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tmp_path),
                         "--out", str(tmp_path / "eval")]) == EXIT_RUNTIME


# ── Subcommands ───────────────────────────────────────────────────────

class TestSynth:
    """hiast synth"""

    def test_writes_both_domains(self, tmp_path):
        """Source and target directories load back with the requested shape."""
        out = tmp_path / "data"
        code = cli_main(["synth", "--out", str(out), "--num-classes", "4", "--images", "3",
                         "--height", "8", "--width", "8", "--seed", "2"])
        assert code == EXIT_OK
        source = load_dataset(out / "source")
        target = load_dataset(out / "target")
        assert len(source) == len(target) == 3
        assert source.meta.num_classes == 4 and source.meta.height == 8


class TestTraining:
    """hiast warmup / train / eval"""

    def test_train_writes_artifacts(self, tmp_path, config_file):
        """train writes metrics, report, config and checkpoint."""
        out = tmp_path / "run"
        assert cli_main(["train", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        for name in ("metrics.csv", "report.json", "config.json", "checkpoint/header.json",
                     "round_1/stats.json"):
            assert (out / name).exists()

    def test_train_deterministic(self, tmp_path, config_file):
        """Same config and seed: byte-identical metrics.csv."""
        for name in ("a", "b"):
            assert cli_main(["train", "--config", str(config_file), "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_ias_overrides(self, tmp_path, config_file):
        """--alpha and --gamma reach the saved config."""
        out = tmp_path / "run"
        assert cli_main(["train", "--config", str(config_file), "--alpha", "0.3", "--gamma", "4",
                         "--out", str(out)]) == EXIT_OK
        saved = read_json(out / "config.json")
        assert saved["ias"]["alpha"] == 0.3 and saved["ias"]["gamma"] == 4.0

    def test_warmup_then_eval(self, tmp_path, config_file):
        """eval on the synthesized target reproduces the warm-up mIoU."""
        data = tmp_path / "data"
        assert cli_main(["synth", "--config", str(config_file), "--out", str(data)]) == EXIT_OK
        warm = tmp_path / "warm"
        assert cli_main(["warmup", "--config", str(config_file), "--source", str(data / "source"),
                         "--target", str(data / "target"), "--out", str(warm)]) == EXIT_OK
        assert cli_main(["eval", "--checkpoint", str(warm / "checkpoint"), "--data", str(data / "target"),
                         "--out", str(tmp_path / "eval")]) == EXIT_OK
        assert read_json(tmp_path / "eval" / "eval.json")["miou"] == read_json(warm / "warmup.json")["target_miou"]

    def test_resume(self, tmp_path, config_file):
        """--resume continues from a saved round."""
        half = tmp_path / "half"
        assert cli_main(["train", "--config", str(config_file), "--out", str(half)]) == EXIT_OK
        out = tmp_path / "more"
        assert cli_main(["train", "--config", str(config_file), "--rounds", "2",
                         "--resume", str(half / "checkpoint"), "--out", str(out)]) == EXIT_OK
        assert [r["round"] for r in read_csv(out / "metrics.csv")] == ["0", "1", "2"]


class TestPseudolabel:
    """hiast pseudolabel"""

    @pytest.mark.parametrize("strategy", ["ias", "constant", "classbalanced"])
    def test_strategies(self, tmp_path, config_file, strategy):
        """Each selector writes labels, thresholds and stats."""
        out = tmp_path / strategy
        args = ["pseudolabel", "--config", str(config_file), "--strategy", strategy, "--out", str(out), "--pgm"]
        if strategy == "constant":
            args += ["--threshold", "0.5"]
        assert cli_main(args) == EXIT_OK
        assert len(list((out / "labels").glob("*.arr"))) == 6
        assert len(list((out / "pgm").glob("*.pgm"))) == 6
        rows = read_csv(out / "thresholds.csv")
        assert len(rows) == (6 if strategy == "ias" else 1)
        stats = read_json(out / "stats.json")
        assert 0.0 <= stats["proportion"] <= 1.0

    def test_ias_writes_proportion_ratios(self, tmp_path, config_file):
        """IAS also reports per-class proportions relative to a gamma=0 pass."""
        out = tmp_path / "ias"
        assert cli_main(["pseudolabel", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        ratios = read_json(out / "proportion_ratios.json")
        assert ratios["baseline"]["gamma"] == 0.0
        assert len(ratios["ratios"]) == 4
        assert all(r is None or r >= 0.0 for r in ratios["ratios"])

    def test_gamma_zero_ratios_are_one(self, tmp_path, config_file):
        """With gamma=0 the run is its own baseline."""
        out = tmp_path / "flat"
        assert cli_main(["pseudolabel", "--config", str(config_file), "--gamma", "0", "--out", str(out)]) == EXIT_OK
        assert all(r is None or r == 1.0 for r in read_json(out / "proportion_ratios.json")["ratios"])


class TestSweepCommands:
    """hiast sweep / report / compare-selectors"""

    def test_sweep_and_report(self, tmp_path, config_file):
        """Sweep rows feed the report's summary."""
        out = tmp_path / "sweep"
        assert cli_main(["sweep", "--config", str(config_file), "--param", "alpha", "--values", "0.3,0.7",
                         "--seeds", "0", "--out", str(out)]) == EXIT_OK
        assert [r["group"] for r in read_csv(out / "sweep.csv")] == ["alpha=0.3", "alpha=0.7"]
        assert cli_main(["report", str(out / "sweep.csv"), "--out", str(tmp_path / "report")]) == EXIT_OK
        summary = read_csv(tmp_path / "report" / "summary.csv")
        assert [r["group"] for r in summary] == ["alpha=0.3", "alpha=0.7"]

    def test_invalid_sweep_value(self, tmp_path, config_file):
        """alpha outside (0, 1] exits 1."""
        assert cli_main(["sweep", "--config", str(config_file), "--param", "alpha", "--values", "2.0",
                         "--out", str(tmp_path / "sweep")]) == EXIT_USAGE

    def test_param_and_ablation_exclusive(self, tmp_path, config_file):
        """--param and --ablation cannot be combined."""
        assert cli_main(["sweep", "--config", str(config_file), "--param", "alpha",
                         "--ablation", "ladder"]) == EXIT_USAGE

    def test_compare_selectors(self, tmp_path, config_file):
        """One row per seed."""
        out = tmp_path / "sel"
        assert cli_main(["compare-selectors", "--config", str(config_file), "--seeds", "0,1",
                         "--out", str(out)]) == EXIT_OK
        assert len(read_csv(out / "selectors.csv")) == 2

    def test_compare_selectors_fixed_alpha(self, tmp_path, config_file):
        """An explicit --alpha is used as given instead of matching a proportion."""
        out = tmp_path / "sel"
        assert cli_main(["compare-selectors", "--config", str(config_file), "--seeds", "0",
                         "--alpha", "0.3", "--out", str(out)]) == EXIT_OK
        assert float(read_csv(out / "selectors.csv")[0]["alpha"]) == 0.3

    def test_compare_selectors_bad_proportion(self, tmp_path, config_file):
        """A proportion outside (0, 1] is a config error."""
        assert cli_main(["compare-selectors", "--config", str(config_file), "--proportion", "0",
                         "--out", str(tmp_path)]) == EXIT_USAGE
