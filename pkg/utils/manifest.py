"""
Run manifests.

Every command writes ``manifest.json`` next to its artifacts: the command,
the configuration it ran with, the source revision and SHA-256 digests of
its inputs and outputs. Timestamps are deliberately absent.
"""

import logging
import os
import subprocess
from typing import Any, Dict, Iterable, Optional

from utils.data_io import file_sha256, save_data

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# Checkout the toolkit runs from; the revision is read here, not in the caller's cwd.
SOURCE_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def git_describe(cwd: Optional[str] = None) -> str:
    """
    ``git describe --always --dirty`` of the toolkit source (or ``cwd``).

    Returns ``"unknown"`` outside a repository.
    """
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd or SOURCE_ROOT,
            capture_output=True,
            text=True,
            timeout=10,
            check=True,
        )
        return result.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def hash_files(paths: Iterable[str], root: Optional[str] = None) -> Dict[str, str]:
    """Map each existing path (relative to ``root`` when given) to its digest."""
    digests = {}
    for path in paths:
        if not path or not os.path.isfile(path):
            continue
        key = os.path.relpath(path, root) if root else path
        digests[key.replace(os.sep, "/")] = file_sha256(path)
    return digests


def build_manifest(
    command: str,
    config: Dict[str, Any],
    inputs: Iterable[str],
    outputs: Iterable[str],
    output_dir: str,
) -> Dict[str, Any]:
    return {
        "command": command,
        "config": config,
        "revision": git_describe(),
        "inputs": hash_files(inputs),
        "outputs": hash_files(outputs, root=output_dir),
    }


def write_manifest(
    command: str,
    config: Dict[str, Any],
    inputs: Iterable[str],
    outputs: Iterable[str],
    output_dir: str,
) -> str:
    """Write ``manifest.json`` into ``output_dir`` and return its path."""
    path = os.path.join(output_dir, MANIFEST_NAME)
    save_data(build_manifest(command, config, inputs, outputs, output_dir), path)
    return path
