"""
Configuration loader for pipeline defaults and environment.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from errors import ConfigError
from models import NiftConfig


# Load environment variables
load_dotenv()

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "nift_config.json"

_CONFIG: Optional[NiftConfig] = None


def _read_json(path: Union[str, Path]) -> Dict[str, Any]:
    config_file = Path(path)
    if not config_file.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_file}")
    with open(config_file, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {config_file}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{config_file} must hold a JSON object")
    return data


def merge_sections(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; values in `override` win."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_sections(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[Union[str, Path]] = None, override_path: Optional[Union[str, Path]] = None) -> NiftConfig:
    """
    Load pipeline defaults from JSON.

    Args:
        config_path: Defaults file (NIFT_CONFIG, else nift_config.json next to this module)
        override_path: Optional file whose sections are merged over the defaults

    Returns:
        NiftConfig with every section populated
    """
    global _CONFIG

    if _CONFIG is not None and override_path is None:
        return _CONFIG

    path = config_path or os.getenv("NIFT_CONFIG") or DEFAULT_CONFIG_PATH
    data = _read_json(path) if Path(path).exists() or config_path else {}
    if override_path is not None:
        data = merge_sections(data, _read_json(override_path))

    try:
        config = NiftConfig(**data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    if override_path is None:
        _CONFIG = config
    return config


def get_config() -> NiftConfig:
    """Get the loaded configuration."""
    if _CONFIG is None:
        return load_config()
    return _CONFIG


def reload_config(config_path: Optional[Union[str, Path]] = None) -> NiftConfig:
    """Reload configuration from file."""
    global _CONFIG
    _CONFIG = None
    return load_config(config_path)


# Environment variable helpers
def _env_int(key: str) -> Optional[int]:
    raw = os.getenv(key, "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from exc


def get_runtime_config() -> dict:
    """Get run-wide settings from environment; None means unset."""
    return {
        "seed": _env_int("NIFT_SEED"),
        "threads": _env_int("NIFT_THREADS"),
        "log_level": os.getenv("LOG_LEVEL", "INFO"),
    }
