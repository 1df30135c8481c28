"""
Seeded random-generator utilities.

Every random draw in the toolkit goes through a ``numpy`` Generator created
here, so a run is a pure function of its seeds.
"""

import hashlib
import logging

import numpy as np

logger = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for ``seed``."""
    return np.random.default_rng(int(seed))


def derive_seed(base_seed: int, *labels: object) -> int:
    """
    Stable sub-seed for a named purpose (e.g. ``derive_seed(7, "calib")``).

    Independent of Python's hash randomization.
    """
    text = ":".join([str(int(base_seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")

