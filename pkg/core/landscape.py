"""
Loss-landscape scanning and synthetic egg-carton surfaces.

``scan_landscape`` evaluates the global loss on a 2-D grid of perturbations of one
block's scale vector and restores the block afterwards. ``roughness``
summarizes how jagged a grid is. ``EggCartonSurface`` is a controllable
synthetic fitness with a dense set of local minima and a known optimum,
used to compare the evolutionary search with gradient baselines.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from core.error_handler import NumericError, ParameterError
from core.models import MIN_SCALE
from core.objectives import BlockObjective
from core.vit import TinyViT, is_weight_point

logger = logging.getLogger(__name__)

Direction = Union[int, np.ndarray]

# Default half-range is this many mutation radii.
DEFAULT_RANGE_EPSILONS = 10


@dataclass
class GridSpec:
    """
    Where and how finely to scan.

    Attributes:
        block_index: Block whose scales are perturbed.
        direction_a: Coordinate index (or explicit vector) of the row axis.
        direction_b: Coordinate index (or explicit vector) of the column axis.
        half_range: Offsets span ``[-r, r]``.
        steps: Odd grid size n >= 3; the center cell is the unperturbed state.
        loss_kind: Loss evaluated at every cell.
    """

    block_index: int
    direction_a: Direction
    direction_b: Direction
    half_range: float
    steps: int = 21
    loss_kind: str = "infonce"

    def __post_init__(self) -> None:
        if self.steps < 3 or self.steps % 2 == 0:
            raise ParameterError(f"grid steps must be odd and >= 3, got {self.steps}")
        if not (self.half_range > 0 and math.isfinite(self.half_range)):
            raise ParameterError(f"half range must be > 0, got {self.half_range}")
        a, b = self.direction_a, self.direction_b
        if isinstance(a, (int, np.integer)) and isinstance(b, (int, np.integer)) and a == b:
            raise ParameterError("grid directions must be distinct")

    def offsets(self) -> np.ndarray:
        """``r * (k - c) / c`` for k = 0..n-1, c = (n-1)/2; the center is exactly 0."""
        c = (self.steps - 1) // 2
        return self.half_range * (np.arange(self.steps) - c) / c

    def unit_vector(self, direction: Direction, size: int) -> np.ndarray:
        if isinstance(direction, (int, np.integer)):
            if not 0 <= direction < size:
                raise ParameterError(f"direction index {direction} out of range for {size} scales")
            e = np.zeros(size)
            e[direction] = 1.0
            return e
        vector = np.asarray(direction, dtype=np.float64).reshape(-1)
        if vector.size != size:
            raise ParameterError(f"direction has {vector.size} elements, expected {size}")
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise ParameterError("direction vector has zero norm")
        return vector / norm

    def to_dict(self) -> Dict[str, Any]:
        def echo(d):
            return int(d) if isinstance(d, (int, np.integer)) else [float(v) for v in np.ravel(d)]

        return {
            "block_index": self.block_index,
            "direction_a": echo(self.direction_a),
            "direction_b": echo(self.direction_b),
            "half_range": self.half_range,
            "steps": self.steps,
            "loss_kind": self.loss_kind,
        }


@dataclass
class LandscapeGrid:
    """``values[i, j]`` is the loss at offsets ``(offsets[i], offsets[j])``."""

    values: np.ndarray
    offsets: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.offsets.size
        if self.values.shape != (n, n):
            raise ParameterError(f"grid shape {self.values.shape} does not match {n} offsets")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("landscape grid contains non-finite losses")

    @property
    def center(self) -> float:
        c = self.offsets.size // 2
        return float(self.values[c, c])


def scan_function(
    fn: Callable[[np.ndarray], float],
    center: np.ndarray,
    spec: GridSpec,
) -> LandscapeGrid:
    """Grid of ``fn(center + u*e_a + v*e_b)`` with every point clamped >= 1e-8."""
    center = np.asarray(center)
    e_a = spec.unit_vector(spec.direction_a, center.size)
    e_b = spec.unit_vector(spec.direction_b, center.size)
    offsets = spec.offsets()
    values = np.empty((offsets.size, offsets.size))
    for i, u in enumerate(offsets):
        for j, v in enumerate(offsets):
            point = center.astype(np.float64) + u * e_a + v * e_b
            point = np.maximum(point, MIN_SCALE).astype(center.dtype)
            if u == 0 and v == 0:
                point = center.copy()
            values[i, j] = fn(point)
    return LandscapeGrid(values=values, offsets=offsets, metadata={"spec": spec.to_dict()})


def scan_landscape(evaluator, spec: GridSpec) -> LandscapeGrid:
    """
    Loss landscape around one block's current scales.

    ``evaluator`` should be built on a held-out evaluation set. The block's
    scales are restored exactly once the grid is complete (also on failure).
    """
    model: TinyViT = evaluator.quant_model
    original = model.get_block_scales(spec.block_index)
    objective = BlockObjective(evaluator, spec.block_index)
    try:
        grid = scan_function(objective, original.values, spec)
    finally:
        model.set_block_scales(spec.block_index, original)
    logger.info(
        f"Scanned block {spec.block_index} on a {spec.steps}x{spec.steps} grid "
        f"(range {spec.half_range:g}), center loss {grid.center:.6g}"
    )
    return grid


def default_directions(model: TinyViT, block_index: int) -> Tuple[int, int]:
    """
    The two weight-scale coordinates whose weight channel has the largest variance.

    Ties keep the lower flat index.
    """
    block = model.blocks[block_index]
    scales = model.get_block_scales(block_index)
    variances = np.full(len(scales), -np.inf)
    for seg in scales.segments:
        if not is_weight_point(seg.point):
            continue
        w = block.weights[seg.point].astype(np.float64)
        variances[seg.offset : seg.offset + seg.length] = np.var(w, axis=0)
    order = np.argsort(-variances, kind="stable")
    return int(order[0]), int(order[1])


def _neighbourhoods(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Interior cells and a stack of their 8 neighbours."""
    v = np.asarray(values, dtype=np.float64)
    n, m = v.shape
    inner = v[1:-1, 1:-1]
    shifts = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    neighbours = np.stack(
        [v[1 + di : n - 1 + di, 1 + dj : m - 1 + dj] for di, dj in shifts]
    )
    return inner, neighbours


def count_local_minima(values: np.ndarray) -> int:
    """Interior cells strictly below all 8 neighbours."""
    inner, neighbours = _neighbourhoods(values)
    return int(np.sum(np.all(inner < neighbours, axis=0)))


def count_local_maxima(values: np.ndarray) -> int:
    inner, neighbours = _neighbourhoods(values)
    return int(np.sum(np.all(inner > neighbours, axis=0)))


def roughness(grid: Union[LandscapeGrid, np.ndarray]) -> float:
    """
    Fraction of interior cells that are strict local extrema among their 8 neighbours.

    0 for monotone or constant surfaces.
    """
    values = grid.values if isinstance(grid, LandscapeGrid) else np.asarray(grid)
    if values.shape[0] < 3 or values.shape[1] < 3:
        return 0.0
    extrema = count_local_minima(values) + count_local_maxima(values)
    return extrema / ((values.shape[0] - 2) * (values.shape[1] - 2))


class EggCartonSurface:
    """
    ``f(x) = q * ||x - x*||^2 + a * sum_i sin^2(w * x_i)``.

    ``x*`` is drawn uniformly from [0.5, 1.5] per coordinate from ``seed``.
    """

    def __init__(
        self,
        dim: int,
        frequency: float,
        amplitude: float = 1.0,
        quadratic_weight: float = 0.1,
        seed: int = 0,
        center: Optional[np.ndarray] = None,
    ):
        if dim < 1:
            raise ParameterError(f"dim must be >= 1, got {dim}")
        if not frequency > 0:
            raise ParameterError(f"frequency must be > 0, got {frequency}")
        if amplitude < 0 or quadratic_weight < 0:
            raise ParameterError("amplitude and quadratic weight must be >= 0")
        self.dim = dim
        self.frequency = float(frequency)
        self.amplitude = float(amplitude)
        self.quadratic_weight = float(quadratic_weight)
        if center is None:
            center = np.random.default_rng(seed).uniform(0.5, 1.5, size=dim)
        self.center = np.asarray(center, dtype=np.float64).reshape(dim)

    def __call__(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        quad = self.quadratic_weight * float(np.sum((x - self.center) ** 2))
        ripple = self.amplitude * float(np.sum(np.sin(self.frequency * x) ** 2))
        return quad + ripple

    def _coordinate_value(self, x: np.ndarray, c: float) -> np.ndarray:
        return self.quadratic_weight * (x - c) ** 2 + self.amplitude * np.sin(self.frequency * x) ** 2

    def _coordinate_minimum(self, c: float) -> float:
        q, a, w = self.quadratic_weight, self.amplitude, self.frequency
        if a == 0:
            return c
        period = math.pi / w
        if q == 0:
            return round(c / period) * period
        reach = math.sqrt(a / q) + period
        k_low = math.floor((c - reach) / period)
        k_high = math.ceil((c + reach) / period)
        best_x, best_val = c, float(self._coordinate_value(np.array(c), c))
        for k in range(k_low, k_high + 1):
            lo, hi = (k - 0.5) * period, (k + 0.5) * period
            xs = np.linspace(lo, hi, 201)
            x = float(xs[np.argmin(self._coordinate_value(xs, c))])
            for _ in range(20):
                g1 = 2 * q * (x - c) + a * w * math.sin(2 * w * x)
                g2 = 2 * q + 2 * a * w * w * math.cos(2 * w * x)
                if g2 <= 0:
                    break
                x = min(max(x - g1 / g2, lo), hi)
            val = float(self._coordinate_value(np.array(x), c))
            if val < best_val:
                best_x, best_val = x, val
        return best_x

    def global_minimum(self) -> Tuple[np.ndarray, float]:
        """Exact global minimizer (the surface is separable) and its value."""
        x = np.array([self._coordinate_minimum(float(c)) for c in self.center])
        return x, self(x)


def egg_carton(
    dim: int,
    frequency: float,
    amplitude: float = 1.0,
    quadratic_weight: float = 0.1,
    seed: int = 0,
) -> EggCartonSurface:
    """Seeded egg-carton surface; see ``EggCartonSurface``."""
    return EggCartonSurface(dim, frequency, amplitude, quadratic_weight, seed)
