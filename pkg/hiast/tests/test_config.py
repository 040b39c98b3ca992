"""Tests for ambient settings and experiment config loading."""

import json

import pytest

from hiast.config import Settings, load_experiment_config
from hiast.exceptions import ConfigError
from hiast.schemas import ExperimentConfig


class TestSettings:
    """Environment-driven settings."""

    def test_defaults(self):
        """Output directory and workers have usable defaults."""
        s = Settings()
        assert s.output_dir == "runs"
        assert s.sweep_workers == 1

    def test_env_override(self, monkeypatch):
        """HIAST_* variables override the defaults."""
        monkeypatch.setenv("HIAST_SWEEP_WORKERS", "3")
        monkeypatch.setenv("HIAST_OUTPUT_DIR", "/tmp/elsewhere")
        s = Settings()
        assert s.sweep_workers == 3
        assert s.output_dir == "/tmp/elsewhere"


class TestExperimentConfig:
    """load_experiment_config"""

    def _write(self, tmp_path, payload) -> str:
        path = tmp_path / "cfg.json"
        path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding="utf-8")
        return str(path)

    def test_round_trip(self, tmp_path, tiny_config):
        """A dumped config loads back equal."""
        assert load_experiment_config(self._write(tmp_path, tiny_config.model_dump())) == tiny_config

    def test_partial_file_uses_defaults(self, tmp_path):
        """Missing keys take their defaults."""
        cfg = load_experiment_config(self._write(tmp_path, {"rounds": 1, "ias": {"alpha": 0.3}}))
        assert cfg.rounds == 1 and cfg.ias.alpha == 0.3
        assert cfg.ias.gamma == ExperimentConfig().ias.gamma

    def test_missing_file(self, tmp_path):
        """A missing file is a config error."""
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        """Malformed JSON is a config error."""
        with pytest.raises(ConfigError):
            load_experiment_config(self._write(tmp_path, "{rounds: 1"))

    @pytest.mark.parametrize("payload", [
        {"unknown_key": 1},
        {"ias": {"alpha": 0.0}},
        {"ias": {"beta": 1.5}},
        {"tau": -0.1},
        {"batch_size": 0},
        {"source_dir": "only/one/side"},
    ])
    def test_rejected(self, tmp_path, payload):
        """Unknown keys and out-of-range values are refused."""
        with pytest.raises(ConfigError):
            load_experiment_config(self._write(tmp_path, payload))

    def test_default_k(self):
        """Hard-class count defaults to ceil(C/2)."""
        assert ExperimentConfig().resolved_k(8) == 4
        assert ExperimentConfig().resolved_k(5) == 3
        assert ExperimentConfig(hard_classes_k=9).resolved_k(5) == 5
