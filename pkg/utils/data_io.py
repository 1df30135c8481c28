"""
Data input/output utilities.

This module provides functions for saving and loading JSON reports,
configuration files and manifests. Output is deterministic: keys are sorted
and indentation is fixed, so equal data gives equal bytes.
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps(data: Dict[str, Any]) -> str:
    """Canonical JSON text (sorted keys, two-space indent, trailing newline)."""
    return json.dumps(_to_jsonable(data), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def save_data(data: Dict[str, Any], filename: str) -> None:
    """
    Save data to a JSON file.

    Args:
        data: The dictionary data to save; numpy values are converted.
        filename: Destination path; missing directories are created.

    Raises:
        OSError: If the file cannot be written.
    """
    text = dumps(data)
    try:
        directory = os.path.dirname(filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filename, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        logger.error(f"Error saving data to {filename}: {e}")
        raise
    logger.info(f"Data successfully saved to {filename}")


def load_data(filename: str) -> Optional[Dict[str, Any]]:
    """
    Load data from a JSON file.

    Returns:
        The parsed dictionary, or None if the file is missing or invalid.
    """
    if not os.path.exists(filename):
        logger.warning(f"File not found: {filename}")
        return None
    try:
        with open(filename, "r", encoding="utf-8") as f:
            data = json.load(f)
        logger.info(f"Data successfully loaded from {filename}")
        return data
    except json.JSONDecodeError as e:
        logger.error(f"JSON parsing error in {filename}: {e}")
        return None


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
