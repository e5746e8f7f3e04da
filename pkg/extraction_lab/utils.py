"""Configuration loading, output layout and seeding helpers."""

import logging
import zlib
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from pydantic import ValidationError

from extraction_lab.models import ExperimentConfig

logger = logging.getLogger(__name__)


def load_config(config_path: Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """
    Load a flat experiment configuration from a YAML file.

    Args:
        config_path: Path to the YAML document
        overrides: Values (e.g. from CLI flags) that replace keys of the file

    Returns:
        Validated ExperimentConfig

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ValueError: If the document is not a flat mapping or fails validation
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}

    if not isinstance(raw, dict):
        raise ValueError(f"Config must be a key-value mapping, got {type(raw).__name__}")

    nested = [key for key, value in raw.items() if isinstance(value, dict)]
    if nested:
        raise ValueError(f"Config must be flat; nested keys found: {nested}")

    # Unset CLI flags arrive as None and leave the file value alone
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        config = ExperimentConfig(**raw)
    except ValidationError as e:
        raise ValueError(f"Invalid config {config_path}: {e}") from e

    logger.info(f"Loaded experiment config '{config.name}' from {config_path}")
    logger.debug(f"Config values: {config.model_dump(mode='json')}")
    return config


def ensure_output_dirs(base_path: Path) -> None:
    """
    Create output directory structure if it doesn't exist.

    Creates:
        - base_path/
        - base_path/traces/
        - base_path/models/
        - base_path/logs/

    Args:
        base_path: Base output directory path
    """
    base_path = Path(base_path)
    base_path.mkdir(parents=True, exist_ok=True)
    for sub in ("traces", "models", "logs"):
        (base_path / sub).mkdir(exist_ok=True)

    logger.debug(f"Output directories ensured at: {base_path}")


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for one named stage of a run."""
    # crc32 is stable across processes, unlike hash()
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))


def stage_seed(seed: int, stage: str) -> int:
    """Integer seed for APIs that take ints (network init, training)."""
    return int(stage_rng(seed, stage).integers(0, 2**31 - 1))
