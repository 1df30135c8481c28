"""
Gradient-based baselines for the scale search.

Gradients of the (non-differentiable, fake-quantized) loss are estimated by
central finite differences, then fed to SGD, Adam or AdamW. Scales are
clamped positive after every step.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np

from core.error_handler import ParameterError
from core.models import MIN_SCALE
from core.objectives import BlockObjective, Objective

logger = logging.getLogger(__name__)

OptimizerName = Literal["sgd", "adam", "adamw"]
OPTIMIZERS = ("sgd", "adam", "adamw")

FD_STEP = 1e-6
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


class Adam:
    """Adam with bias-corrected moments; ``weight_decay`` > 0 makes it AdamW."""

    def __init__(
        self,
        lr: float,
        beta1: float = ADAM_BETAS[0],
        beta2: float = ADAM_BETAS[1],
        epsilon: float = ADAM_EPS,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t

        # decoupled decay
        if self.weight_decay:
            params -= self.lr * self.weight_decay * params

        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        denom = np.sqrt(self.v / bc2) + self.epsilon
        params -= (self.lr / bc1) * self.m / denom


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    if name == "adamw":
        return Adam(lr, weight_decay=ADAMW_WEIGHT_DECAY)
    raise ParameterError(f"unknown optimizer '{name}', expected one of {OPTIMIZERS}")


def finite_difference_gradient(
    objective: Objective,
    values: np.ndarray,
    h: float = FD_STEP,
    coordinates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Central-difference gradient ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    Only ``coordinates`` are perturbed (all by default); the others get 0.
    Costs two objective evaluations per perturbed coordinate.
    """
    x = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(x)
    indices = range(x.size) if coordinates is None else coordinates
    for i in indices:
        forward = x.copy()
        backward = x.copy()
        forward[i] += h
        backward[i] = max(backward[i] - h, MIN_SCALE)
        width = forward[i] - backward[i]
        grad[i] = (objective(forward) - objective(backward)) / width
    return grad


@dataclass
class GradientResult:
    values: np.ndarray
    losses: List[float] = field(default_factory=list)
    evaluations: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def optimize(
    objective: Objective,
    initial: np.ndarray,
    optimizer: OptimizerName = "sgd",
    steps: int = 100,
    lr: float = 1e-3,
    h: float = FD_STEP,
    coordinates_per_step: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradientResult:
    """
    Minimize ``objective`` from ``initial`` with a finite-difference optimizer.

    Args:
        objective: Loss of a flat vector.
        initial: Starting point (positive).
        optimizer: ``"sgd"``, ``"adam"`` or ``"adamw"``.
        steps: Number of update steps (>= 1).
        lr: Learning rate (> 0).
        h: Finite-difference step.
        coordinates_per_step: Perturb a random subset of this many coordinates
            per step instead of all of them.
        rng: Generator for coordinate subsampling.

    Returns:
        The final vector, the loss after every step (index 0 is the start)
        and the number of objective evaluations spent.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if not lr > 0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    opt = make_optimizer(optimizer, lr)
    params = np.asarray(initial, dtype=np.float64).copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    start_evals = objective.evaluations
    losses = [objective(params)]
    for _ in range(steps):
        coords = None
        if coordinates_per_step is not None and coordinates_per_step < params.size:
            coords = np.sort(rng.choice(params.size, size=coordinates_per_step, replace=False))
        grad = finite_difference_gradient(objective, params, h, coords)
        opt.step(params, grad)
        np.maximum(params, MIN_SCALE, out=params)
        losses.append(objective(params))
    logger.debug(f"{optimizer} finished {steps} steps, loss {losses[0]:.6g} -> {losses[-1]:.6g}")
    return GradientResult(
        values=params, losses=losses, evaluations=objective.evaluations - start_evals
    )


def gradient_baseline(
    evaluator,
    block_index: int,
    optimizer: OptimizerName = "sgd",
    steps: int = 10,
    lr: float = 1e-3,
    coordinates_per_step: Optional[int] = None,
    seed: int = 0,
) -> GradientResult:
    """
    Optimize one block's scales of ``evaluator.quant_model`` by gradient descent.

    The final scales are installed in the model.
    """
    objective = BlockObjective(evaluator, block_index)
    start = evaluator.quant_model.get_block_scales(block_index)
    result = optimize(
        objective,
        start.values,
        optimizer=optimizer,
        steps=steps,
        lr=lr,
        coordinates_per_step=coordinates_per_step,
        rng=np.random.default_rng(seed),
    )
    evaluator.quant_model.set_block_scales(block_index, result.values.astype(np.float32))
    return result
