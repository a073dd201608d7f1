# app/utils/config.py

import json
import logging
import os

from dotenv import load_dotenv

from app.utils.constants import DEFAULT_MODEL_TIMEOUT, DEFAULT_RUN_SETTINGS

load_dotenv()

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "..", "jitscan_config.json")
TEMPLATES_DIR = os.path.join(os.path.dirname(__file__), "..", "templates")

# ----------------------
# Environment
# ----------------------
MODEL_URL_ENV = "JITSCAN_MODEL_URL"
MODEL_KEY_ENV = "JITSCAN_MODEL_KEY"
MODEL_TIMEOUT_ENV = "JITSCAN_MODEL_TIMEOUT"
LOG_LEVEL_ENV = "JITSCAN_LOG_LEVEL"

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Invalid run configuration; the only failure that stops a whole run."""


def model_endpoint():
    """Return (url, key, timeout) for the gateway backend from the environment."""
    url = os.getenv(MODEL_URL_ENV)
    key = os.getenv(MODEL_KEY_ENV)
    raw_timeout = os.getenv(MODEL_TIMEOUT_ENV, str(DEFAULT_MODEL_TIMEOUT))
    try:
        timeout = float(raw_timeout)
    except ValueError as e:
        raise ConfigError(f"{MODEL_TIMEOUT_ENV} must be a number, got {raw_timeout!r}") from e
    return url, key, timeout


def log_level():
    return os.getenv(LOG_LEVEL_ENV, "INFO").upper()


def load_settings(path=None):
    """Load run defaults, overlaid with jitscan_config.json when it exists"""
    settings = dict(DEFAULT_RUN_SETTINGS)
    path = path or CONFIG_PATH
    if not os.path.exists(path):
        return settings

    try:
        with open(path, "r", encoding="utf-8") as f:
            overrides = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Unreadable config file {path}: {e}") from e
    if not isinstance(overrides, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")

    unknown = sorted(set(overrides) - set(DEFAULT_RUN_SETTINGS))
    if unknown:
        logger.warning("Ignoring unknown settings in %s: %s", path, ", ".join(unknown))
    for key in DEFAULT_RUN_SETTINGS:
        if key in overrides:
            settings[key] = overrides[key]
    return settings
