"""
Central module for core data models and type definitions.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np

from core.error_handler import DimensionError, ParameterError, QuantParamError

Scheme = Literal["uniform", "log2"]
Granularity = Literal["per_tensor", "per_channel"]

# Bitwidth sentinel meaning "quantization disabled" (pass-through).
PASSTHROUGH_BITS = 32
SUPPORTED_WEIGHT_BITS = (3, 4, 8, PASSTHROUGH_BITS)
SUPPORTED_ACTIVATION_BITS = (8, PASSTHROUGH_BITS)

# Lower bound applied whenever a scale is perturbed.
MIN_SCALE = 1e-8


@dataclass
class QuantParams:
    """Quantization parameters of one quantization point.

    Attributes:
        scale: Positive step sizes; length 1 for per-tensor, one per channel
            along ``axis`` for per-channel.
        bitwidth: Number of bits; ``PASSTHROUGH_BITS`` disables quantization.
        granularity: ``"per_tensor"`` or ``"per_channel"``.
        axis: Channel axis for per-channel parameters.
        scheme: ``"uniform"`` (symmetric signed) or ``"log2"`` (power-of-two codes).
    """

    scale: np.ndarray
    bitwidth: int
    granularity: Granularity = "per_tensor"
    axis: Optional[int] = None
    scheme: Scheme = "uniform"

    def __post_init__(self) -> None:
        self.scale = np.ascontiguousarray(
            np.atleast_1d(self.scale), dtype=np.float32
        ).reshape(-1)
        self.bitwidth = int(self.bitwidth)
        self.validate()

    def validate(self) -> None:
        """Check the invariants; raises QuantParamError on violation."""
        if self.bitwidth < 2:
            raise QuantParamError(f"bitwidth must be >= 2, got {self.bitwidth}")
        if self.scheme not in ("uniform", "log2"):
            raise QuantParamError(f"unknown scheme '{self.scheme}'")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise QuantParamError(f"unknown granularity '{self.granularity}'")
        if self.scale.size == 0:
            raise QuantParamError("scale vector is empty")
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0):
            raise QuantParamError("every scale element must be finite and > 0")
        if self.granularity == "per_tensor" and self.scale.size != 1:
            raise QuantParamError(
                f"per-tensor params need one scale, got {self.scale.size}"
            )
        if self.granularity == "per_channel" and self.axis is None:
            raise QuantParamError("per-channel params need an axis")

    def check_shape(self, shape: Tuple[int, ...]) -> None:
        """Check that per-channel scales match ``shape`` along the channel axis."""
        if self.granularity != "per_channel":
            return
        if self.axis is None or not -len(shape) <= self.axis < len(shape):
            raise DimensionError(f"channel axis {self.axis} invalid for {shape}")
        if shape[self.axis] != self.scale.size:
            raise DimensionError(
                f"{self.scale.size} channel scales for axis of size {shape[self.axis]}"
            )

    @property
    def enabled(self) -> bool:
        """False for the pass-through sentinel bitwidth."""
        return self.bitwidth < PASSTHROUGH_BITS

    @property
    def max_code(self) -> int:
        """Largest code magnitude: 2^(b-1)-1 (uniform) or 2^b-1 (log2)."""
        if self.scheme == "log2":
            return 2**self.bitwidth - 1
        return 2 ** (self.bitwidth - 1) - 1

    def with_scale(self, scale: np.ndarray) -> "QuantParams":
        """Return a copy carrying a new scale vector (validated)."""
        return QuantParams(
            scale=np.array(scale, dtype=np.float32, copy=True),
            bitwidth=self.bitwidth,
            granularity=self.granularity,
            axis=self.axis,
            scheme=self.scheme,
        )

    def copy(self) -> "QuantParams":
        return self.with_scale(self.scale)

    def to_dict(self) -> Dict[str, Any]:
        """Converts the QuantParams object to a JSON-friendly dictionary."""
        return {
            "scale": [float(s) for s in self.scale],
            "bitwidth": self.bitwidth,
            "granularity": self.granularity,
            "axis": self.axis,
            "scheme": self.scheme,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuantParams":
        """Creates a QuantParams object from a dictionary."""
        return cls(
            scale=np.asarray(data["scale"], dtype=np.float32),
            bitwidth=data["bitwidth"],
            granularity=data.get("granularity", "per_tensor"),
            axis=data.get("axis"),
            scheme=data.get("scheme", "uniform"),
        )


@dataclass
class QuantizedTensor:
    """Integer codes plus the parameters needed to dequantize them."""

    codes: np.ndarray
    params: QuantParams
    shape: Tuple[int, ...]


@dataclass
class ViTConfig:
    """Shape and precision of the tiny vision transformer."""

    embed_dim: int = 32
    heads: int = 4
    blocks: int = 4
    tokens: int = 16
    classes: int = 10
    weight_bits: int = 8
    activation_bits: int = 8
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raise ParameterError when a field is out of range."""
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ParameterError(f"{f.name} must be a positive integer, got {value}")
        if self.embed_dim % self.heads != 0:
            raise ParameterError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        if self.weight_bits < 2 or self.activation_bits < 2:
            raise ParameterError("bitwidths must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def block_scale_count(self) -> int:
        """
        Closed-form length of one block's flattened scale vector.

        Attention weights contribute 3N per-head matrices with d_k channel
        scales each plus W^O with d scales (4d), attention activations
        contribute 6N+1 per-tensor scales, and the MLP contributes FC1
        (mlp_dim scales), FC2 (d scales) and two activation scales.
        """
        d, n = self.embed_dim, self.heads
        attention = 3 * n * self.head_dim + d + 6 * n + 1
        mlp = self.mlp_dim + d + 2
        return attention + mlp

    def to_dict(self) -> Dict[str, Any]:
        """Converts the ViTConfig object to a dictionary."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ViTConfig":
        """Creates a ViTConfig from a dictionary, using defaults for missing keys."""
        field_names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in field_names})


class ScaleSegment(NamedTuple):
    """Where one quantization point's scales live inside a BlockScales vector."""

    point: str
    offset: int
    length: int


@dataclass
class BlockScales:
    """Every scale element of one transformer block, flattened in table order.

    Attributes:
        values: Concatenated positive scales (float32).
        segments: Index map back to ``(point, channel)``.
    """

    values: np.ndarray
    segments: Tuple[ScaleSegment, ...]

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        self.segments = tuple(ScaleSegment(*s) for s in self.segments)
        expected = sum(s.length for s in self.segments)
        if expected != self.values.size:
            raise DimensionError(
                f"segments cover {expected} elements but values has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise QuantParamError("block scales must be finite and > 0")

    def __len__(self) -> int:
        return int(self.values.size)

    def locate(self, index: int) -> Tuple[str, int]:
        """Map a flat index to ``(point name, channel)``."""
        if not 0 <= index < self.values.size:
            raise DimensionError(f"index {index} out of range for {self.values.size}")
        for seg in self.segments:
            if seg.offset <= index < seg.offset + seg.length:
                return seg.point, index - seg.offset
        raise DimensionError(f"index {index} not covered by the index map")

    def point_slice(self, point: str) -> slice:
        """Slice of ``values`` holding the scales of ``point``."""
        for seg in self.segments:
            if seg.point == point:
                return slice(seg.offset, seg.offset + seg.length)
        raise KeyError(point)

    def mask(self, prefix: str = "") -> np.ndarray:
        """Boolean mask of elements whose point name starts with ``prefix``."""
        selected = np.zeros(self.values.size, dtype=bool)
        for seg in self.segments:
            if seg.point.startswith(prefix):
                selected[seg.offset : seg.offset + seg.length] = True
        return selected

    def with_values(self, values: np.ndarray) -> "BlockScales":
        """Return a copy carrying ``values`` (same index map)."""
        values = np.asarray(values, dtype=np.float32).reshape(-1)
        if values.size != self.values.size:
            raise DimensionError(
                f"expected {self.values.size} scale elements, got {values.size}"
            )
        return BlockScales(values=values.copy(), segments=self.segments)

    def to_points(self) -> Dict[str, np.ndarray]:
        """Unflatten into ``{point: scale vector}``."""
        return {
            seg.point: self.values[seg.offset : seg.offset + seg.length].copy()
            for seg in self.segments
        }


def default_epsilon(weight_bits: int) -> float:
    """Mutation range: 1e-3 for 8-bit (and wider) weights, 1e-4 below."""
    return 1e-3 if weight_bits >= 8 else 1e-4


@dataclass
class SearchSettings:
    """Block-wise evolutionary search settings (defaults: P=10, K=15, C=3, S=10)."""

    passes: int = 10
    population: int = 15
    cycles: int = 3
    samples: int = 10
    epsilon: float = 1e-3
    seed: int = 0
    attention_only: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raise ParameterError when settings are inconsistent."""
        if self.passes < 0 or self.cycles < 0:
            raise ParameterError("passes and cycles must be >= 0")
        if self.population < 1 or self.samples < 1:
            raise ParameterError("population and samples must be >= 1")
        if self.samples > self.population:
            raise ParameterError(
                f"samples ({self.samples}) cannot exceed population ({self.population})"
            )
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")

    def evaluations_per_visit(self) -> int:
        """Fresh fitness evaluations spent on one block visit: K-1 seeds + C children."""
        return (self.population - 1 + self.cycles) if self.cycles else 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SearchSettings":
        field_names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in field_names})


@dataclass
class Candidate:
    """One member of a search population (fitness is higher-is-better)."""

    scales: np.ndarray
    fitness: float
    birth_cycle: int
    candidate_id: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.fitness):
            raise ParameterError(f"candidate fitness must be finite, got {self.fitness}")


@dataclass
class SearchResult:
    """Outcome of a block visit or an unconstrained vector search."""

    best: Candidate
    initial_fitness: float
    evaluations: int
    best_history: List[float] = field(default_factory=list)
