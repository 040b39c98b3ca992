"""Process configuration loaded from environment variables.

Experiment hyperparameters live in ``schemas.ExperimentConfig`` and are read
from JSON files; this module only carries the ambient settings (logging,
output location, default seed) plus the JSON loader for experiment files.
"""

import json
import logging
from pathlib import Path

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from hiast.exceptions import ConfigError
from hiast.schemas import ExperimentConfig

# Resolve project root (one level up from hiast/)
BASE_DIR = Path(__file__).resolve().parent.parent

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Central process configuration for the self-training toolkit."""

    model_config = SettingsConfigDict(
        env_prefix="HIAST_",
        env_file=str(BASE_DIR / ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # --- Logging ---
    log_level: str = "INFO"
    log_format: str = "%(asctime)s | %(levelname)-7s | %(name)s | %(message)s"

    # --- Runs ---
    output_dir: str = "runs"
    default_seed: int = 0
    sweep_workers: int = 1


settings = Settings()


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Read and validate an experiment config file.

    Unknown keys are rejected, as are values outside their legal range.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e

    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e

    logger.debug(f"Loaded experiment config from {path}")
    return cfg
