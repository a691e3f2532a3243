"""
Utility functions for the row-completion engine.
"""

import json
import logging
import random
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError


def set_seed(seed: int):
    """
    Set random seeds for reproducibility.

    Args:
        seed: Random seed
    """
    random.seed(seed)
    np.random.seed(seed)


def normalize_text(text: str) -> str:
    """Case-fold and collapse internal whitespace."""
    return " ".join(str(text).split()).casefold()


def setup_logging(verbosity: int = 0):
    """
    Configure a single stderr handler for the `src` and `evalharness` loggers.

    Args:
        verbosity: 0 = warnings, 1 = info, 2+ = debug
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))

    for name in ("src", "evalharness", "scripts"):
        logger = logging.getLogger(name)
        logger.handlers[:] = [handler]
        logger.setLevel(level)
        logger.propagate = False


def dumps_json(data: Any) -> str:
    """Deterministic JSON rendering used for every machine-readable output."""
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False)


def save_json(data: Any, path) -> Path:
    """Write `dumps_json(data)` and a trailing newline, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data) + "\n", encoding="utf-8")
    return path


def load_json(path) -> Any:
    """Parse a UTF-8 JSON file; a decoding error names the file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"JSON file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}")
