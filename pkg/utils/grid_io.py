"""
Landscape grid output.

CSV layout: metadata as ``# key: value`` comment lines, a header row holding
the b-axis offsets, then one row per a-axis offset (first column) with the
losses. The optional PGM heatmap is 8-bit and min-max normalized.
"""

import csv
import json
import logging
from typing import Any, Dict, List

import numpy as np

from core.error_handler import DataFormatError
from core.landscape import LandscapeGrid

logger = logging.getLogger(__name__)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_csv(path: str, grid: LandscapeGrid) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key in sorted(grid.metadata):
            f.write(f"# {key}: {json.dumps(grid.metadata[key], sort_keys=True)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["a\\b"] + [_fmt(v) for v in grid.offsets])
        for offset, row in zip(grid.offsets, grid.values):
            writer.writerow([_fmt(offset)] + [_fmt(v) for v in row])
    logger.info(f"Landscape grid written to {path}")


def read_csv(path: str) -> LandscapeGrid:
    """Read a grid written by ``write_csv``."""
    metadata: Dict[str, Any] = {}
    rows: List[List[str]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(": ")
                metadata[key] = json.loads(value)
            elif line.strip():
                rows.append(next(csv.reader([line])))
    if len(rows) < 2:
        raise DataFormatError(f"{path} holds no grid rows")
    offsets = np.array([float(v) for v in rows[0][1:]])
    values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return LandscapeGrid(values=values, offsets=offsets, metadata=metadata)


def to_pgm(values: np.ndarray) -> bytes:
    """Binary (P5) 8-bit greyscale image; a constant grid maps to black."""
    v = np.asarray(values, dtype=np.float64)
    low, high = v.min(), v.max()
    if high > low:
        pixels = np.rint((v - low) / (high - low) * 255.0)
    else:
        pixels = np.zeros_like(v)
    height, width = v.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + pixels.astype(np.uint8).tobytes()


def write_pgm(path: str, grid: LandscapeGrid) -> None:
    with open(path, "wb") as f:
        f.write(to_pgm(grid.values))
    logger.info(f"Landscape heatmap written to {path}")

