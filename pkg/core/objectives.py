"""
Objectives shared by the evolutionary search, the gradient baselines and the
landscape scan.

An objective maps a flat scale vector to a loss (lower is better) and counts
how often it was evaluated, so different optimizers can be held to the same
evaluation budget.
"""

import logging
from typing import Protocol

import numpy as np

from core.error_handler import DimensionError

logger = logging.getLogger(__name__)


class Objective(Protocol):
    """Loss of a flat, positive scale vector."""

    evaluations: int

    def __call__(self, values: np.ndarray) -> float: ...


class BlockObjective:
    """
    Calibration loss as a function of one block's scale vector.

    Each call installs ``values`` into the block and scores the model, so the
    model holds the last evaluated scales afterwards; callers restore what
    they want installed.
    """

    def __init__(self, evaluator, block_index: int):
        self.evaluator = evaluator
        self.model = evaluator.quant_model
        self.block_index = block_index
        self.size = len(self.model.get_block_scales(block_index))
        self.evaluations = 0
        evaluator.prepare_block(block_index)

    def __call__(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=np.float32)
        if values.size != self.size:
            raise DimensionError(f"block {self.block_index} has {self.size} scales, got {values.size}")
        self.model.set_block_scales(self.block_index, values)
        self.evaluations += 1
        return self.evaluator.score_block(self.block_index)


class CountingObjective:
    """Wrap a plain function ``f(values) -> float`` with an evaluation counter."""

    def __init__(self, fn):
        self.fn = fn
        self.evaluations = 0

    def __call__(self, values: np.ndarray) -> float:
        self.evaluations += 1
        return float(self.fn(np.asarray(values, dtype=np.float64)))
