import os
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional
from dotenv import load_dotenv


load_dotenv()

logger = logging.getLogger(__name__)


class Config:

    LOG_LEVEL = os.getenv("UPIT_LOG_LEVEL", "INFO")

    EPSILON = os.getenv("UPIT_EPSILON", "1e-8")
    THREADS = os.getenv("UPIT_THREADS", "1")

    SAMPLE_RATE = os.getenv("UPIT_SAMPLE_RATE", "8000")
    FRAME_LEN = os.getenv("UPIT_FRAME_LEN", "256")
    HOP = os.getenv("UPIT_HOP", "128")

    EXHAUSTIVE_LIMIT = os.getenv("UPIT_EXHAUSTIVE_LIMIT", "8")
    OUTPUT_DIR = os.getenv("UPIT_OUTPUT_DIR", "runs")

    # training schedule
    LR_INITIAL = 2e-5
    LR_DECAY = 0.7
    LR_FLOOR = 1e-10
    MINIBATCH_SIZE = 8
    DROPOUT = 0.5
    MAX_EPOCHS = 200

    SILENT_CHANNEL_DB = 70.0

    DEFAULT_HIDDEN = 64
    DEFAULT_LAYERS = "birecurrent,birecurrent"

    RESOLVED_CONFIG_NAME = "resolved_config.json"

    @classmethod
    def epsilon(cls) -> float:
        return float(cls.EPSILON)

    @classmethod
    def threads(cls) -> int:
        return int(cls.THREADS)

    @classmethod
    def sample_rate(cls) -> int:
        return int(cls.SAMPLE_RATE)

    @classmethod
    def frame_len(cls) -> int:
        return int(cls.FRAME_LEN)

    @classmethod
    def hop(cls) -> int:
        return int(cls.HOP)

    @classmethod
    def exhaustive_limit(cls) -> int:
        return int(cls.EXHAUSTIVE_LIMIT)

    @classmethod
    def validate_environment(cls):

        numeric_vars = [
            ("UPIT_EPSILON", cls.EPSILON, float),
            ("UPIT_THREADS", cls.THREADS, int),
            ("UPIT_SAMPLE_RATE", cls.SAMPLE_RATE, int),
            ("UPIT_FRAME_LEN", cls.FRAME_LEN, int),
            ("UPIT_HOP", cls.HOP, int),
            ("UPIT_EXHAUSTIVE_LIMIT", cls.EXHAUSTIVE_LIMIT, int),
        ]

        invalid_vars = []
        for var_name, var_value, cast in numeric_vars:
            try:
                if cast(var_value) <= 0:
                    invalid_vars.append(var_name)
            except (TypeError, ValueError):
                invalid_vars.append(var_name)

        if invalid_vars:
            logger.error(f"Invalid environment variables: {invalid_vars}")
            return False

        return True

    @classmethod
    def get_log_level(cls):

        level_map = {
            "DEBUG": logging.DEBUG,
            "INFO": logging.INFO,
            "WARNING": logging.WARNING,
            "ERROR": logging.ERROR,
        }
        return level_map.get(cls.LOG_LEVEL.upper(), logging.INFO)


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Read a JSON experiment config; keys use the long flag names with
    underscores (``snr_min``, ``frame_len``, ...)."""

    if not path:
        return {}

    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(config_path, "r") as f:
        data = json.load(f)

    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must hold a JSON object")

    logger.info(f"Loaded {len(data)} settings from {path}")
    return {key.replace("-", "_"): value for key, value in data.items()}


def resolve_settings(
    defaults: Dict[str, Any], file_values: Dict[str, Any], flag_values: Dict[str, Any]
) -> Dict[str, Any]:
    """defaults < config file < flags; flags left at ``None`` do not override."""

    resolved = dict(defaults)
    resolved.update({k: v for k, v in file_values.items() if v is not None})
    resolved.update({k: v for k, v in flag_values.items() if v is not None})
    return resolved


def write_resolved_config(out_dir: str, settings: Dict[str, Any]) -> Path:

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    target = out_path / Config.RESOLVED_CONFIG_NAME

    with open(target, "w") as f:
        json.dump(settings, f, indent=2, sort_keys=True, default=str)

    logger.info(f"Wrote resolved config to {target}")
    return target
