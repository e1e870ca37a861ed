"""Configuration for the resident language identification system."""

import json
import logging
import os
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, Union

from resident.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

# Byte vocabulary: 256 byte values plus one padding id
PAD_ID = 256
BYTE_VOCAB_SIZE = 257
DEFAULT_MAX_LEN = 384

# Model defaults
MODEL_DEFAULTS = {
    "n_blocks": 3,
    "d_b": 64,
    "conv_filters": 64,
    "windows": (8, 4),
    "pool": 2,
    "merge_mode": "concat",
    "block_dropout": 0.5,
    "gru_hidden": 100,
    "gru_dropout": 0.1,
    "max_len": DEFAULT_MAX_LEN,
}

# Submitted runs differ only in the number of residual blocks
RUN_PRESETS = {
    "run1": 5,
    "run2": 4,
    "run3": 3,
}

# Training defaults
TRAIN_DEFAULTS = {
    "batch_size": 100,
    "max_epochs": 50,
    "patience": 2,
    "seed": 1,
    "shuffle": True,
}
DEV_HOLDOUT_FRACTION = 0.1

# ADAM defaults
ADAM_LR = 0.001
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Batch normalization defaults
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

# Embedding initialization range
EMBEDDING_INIT_SCALE = 0.05

# Language groups of the 12-class newswire task
TASK_A_GROUPS = MappingProxyType(
    {
        "spanish": frozenset({"es-ar", "es-es", "es-mx"}),
        "french": frozenset({"fr-ca", "fr-fr"}),
        "malay": frozenset({"id", "my"}),
        "portuguese": frozenset({"pt-br", "pt-pt"}),
        "south_slavic": frozenset({"hr", "bs", "sr"}),
    }
)

# Languages present in the Twitter subtasks B1/B2
B_GROUP = frozenset({"pt-br", "pt-pt", "hr", "bs", "sr"})
FALLBACK_LABEL = "hr"

# English tweet heuristic: stop-word hits per 10 tokens
ENGLISH_STOPWORDS = frozenset({"the", "and", "you", "for", "that"})
ENGLISH_MIN_HITS_PER_10 = 2

# Model file format
MODEL_MAGIC = b"RSID"
MODEL_FORMAT_VERSION = 1

# Environment variables
ENV_THREADS = "RESIDENT_THREADS"
ENV_LOG_LEVEL = "RESIDENT_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "INFO"

GRADCHECK_TOLERANCE = 1e-4


def log_level() -> str:
    """Return the log level requested through the environment."""
    return os.getenv(ENV_LOG_LEVEL, DEFAULT_LOG_LEVEL).upper()


def _check_setting_type(path: Union[str, Path], key: str, value: Any, default: Any) -> None:
    """Raise ConfigurationError unless ``value`` has the type of ``default``."""
    if isinstance(default, bool):
        valid = isinstance(value, bool)
    elif isinstance(default, int):
        valid = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        valid = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, tuple):
        valid = isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        )
    else:
        valid = isinstance(value, type(default))
    if not valid:
        raise ConfigurationError(
            f"Config file {path}: {key} must be {type(default).__name__}, got {value!r}"
        )


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a JSON config file holding ModelConfig and TrainConfig fields.

    Args:
        path: Path to the JSON file

    Returns:
        Dictionary of recognised settings

    Raises:
        ConfigurationError: If the file is not a JSON object, has unknown keys or
            holds a value of the wrong type
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            settings = json.load(handle)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e

    if not isinstance(settings, dict):
        raise ConfigurationError(f"Config file {path} must contain a JSON object")

    known = set(MODEL_DEFAULTS) | set(TRAIN_DEFAULTS)
    unknown = sorted(set(settings) - known)
    if unknown:
        raise ConfigurationError(f"Unknown keys in config file {path}: {', '.join(unknown)}")

    defaults = {**MODEL_DEFAULTS, **TRAIN_DEFAULTS}
    for key, value in settings.items():
        _check_setting_type(path, key, value, defaults[key])
    if "windows" in settings:
        settings["windows"] = tuple(settings["windows"])

    logger.info(f"Loaded {len(settings)} setting(s) from {path}")
    return settings
