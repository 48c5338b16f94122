"""
Structured logging for NIFT.

Modules log through `get_logger(__name__)`; nothing prints. The level
comes from the -v/-q flags, else LOG_LEVEL (default INFO). LOG_FORMAT=json
switches to one JSON object per record. Everything goes to stderr because
stdout carries the command's result document.
"""
import logging
import os
import sys
from typing import Optional

_QUIET_LIBRARIES = ("trimesh",)


def configure_logging(level_name: Optional[str] = None, log_format: Optional[str] = None) -> None:
    """Install the stderr handler on the root logger. main.py calls this once per run."""
    level_name = (level_name or os.getenv("LOG_LEVEL", "INFO")).upper()
    level = getattr(logging, level_name, logging.INFO)
    log_format = (log_format or os.getenv("LOG_FORMAT", "text")).lower()

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_build_formatter(log_format))

    root = logging.getLogger()
    root.setLevel(level)
    root.handlers.clear()
    root.addHandler(handler)

    for name in _QUIET_LIBRARIES:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    if log_format == "json" and isinstance(handler.formatter, _TextFormatter):
        get_logger(__name__).warning("LOG_FORMAT=json needs json-log-formatter; using text logs")


def verbosity_to_level(verbose: int, quiet: int) -> Optional[str]:
    """Map -v/-q counts onto a level name; None keeps LOG_LEVEL."""
    delta = verbose - quiet
    if delta == 0:
        return None
    if delta > 0:
        return "DEBUG"
    return "WARNING" if delta == -1 else "ERROR"


class _TextFormatter(logging.Formatter):
    def __init__(self):
        super().__init__(fmt="%(asctime)s [%(levelname)s] %(name)s: %(message)s", datefmt="%Y-%m-%dT%H:%M:%S")


def _build_formatter(log_format: str) -> logging.Formatter:
    if log_format != "json":
        return _TextFormatter()
    try:
        import json_log_formatter  # optional
    except ImportError:
        return _TextFormatter()
    return json_log_formatter.VerboseJSONFormatter()


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)
