"""
Configuration module.

This module provides the schema of a run configuration and the layering of
its sources: defaults, a JSON file, environment variables and command-line
flags, in increasing order of precedence.
"""

import json
import logging
import os
from typing import Any, Dict, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.error_handler import ConfigError
from core.models import (
    PASSTHROUGH_BITS,
    SUPPORTED_ACTIVATION_BITS,
    SUPPORTED_WEIGHT_BITS,
    SearchSettings,
    ViTConfig,
    default_epsilon,
)

logger = logging.getLogger(__name__)

ENV_SEED = "EVQ_SEED"
ENV_THREADS = "EVQ_THREADS"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    embed_dim: int = Field(32, ge=1)
    heads: int = Field(4, ge=1)
    blocks: int = Field(4, ge=1)
    tokens: int = Field(16, ge=1)
    classes: int = Field(10, ge=1)
    mlp_ratio: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> "ModelSection":
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        return self


class QuantSection(_Section):
    weight_bits: int = 8
    activation_bits: int = 8
    weight_init: Literal["minmax", "percentile", "omse"] = "minmax"
    percentile: float = Field(99.9, gt=0, le=100)
    bias_correction: bool = False

    @field_validator("weight_bits")
    @classmethod
    def _weight_bits_supported(cls, value: int) -> int:
        if value not in SUPPORTED_WEIGHT_BITS:
            raise ValueError(f"unsupported weight bitwidth {value}, expected one of {SUPPORTED_WEIGHT_BITS}")
        return value

    @field_validator("activation_bits")
    @classmethod
    def _activation_bits_supported(cls, value: int) -> int:
        if value not in SUPPORTED_ACTIVATION_BITS:
            raise ValueError(
                f"unsupported activation bitwidth {value}, expected one of {SUPPORTED_ACTIVATION_BITS}"
            )
        return value

    @model_validator(mode="after")
    def _passthrough_covers_activations(self) -> "QuantSection":
        # 32-bit weights mean a full pass-through model
        if self.weight_bits == PASSTHROUGH_BITS:
            self.activation_bits = PASSTHROUGH_BITS
        return self


class SearchSection(_Section):
    """Block-wise search settings; the defaults are P=10, K=15, C=3, S=10."""

    passes: int = Field(10, ge=0)
    population: int = Field(15, ge=1)
    cycles: int = Field(3, ge=0)
    samples: int = Field(10, ge=1)
    epsilon: Optional[float] = Field(None, gt=0)
    attention_only: bool = False

    @model_validator(mode="after")
    def _samples_fit_population(self) -> "SearchSection":
        if self.samples > self.population:
            raise ValueError(f"samples ({self.samples}) cannot exceed population ({self.population})")
        return self


class LossSection(_Section):
    kind: Literal["infonce", "mse", "cosine", "kl"] = "infonce"
    tau: float = Field(0.1, gt=0)
    label_aware_negatives: bool = False


class DataSection(_Section):
    model_path: Optional[str] = None
    quant_model_path: Optional[str] = None
    calib_path: Optional[str] = None
    eval_path: Optional[str] = None
    calib_size: Optional[int] = Field(256, ge=1)
    eval_size: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    shuffle_seed: Optional[int] = None
    synth_count: int = Field(256, ge=1)
    class_separation: float = Field(4.0, gt=0)


class LandscapeSection(_Section):
    block: int = Field(0, ge=0)
    steps: int = Field(21, ge=3)
    half_range: Optional[float] = Field(None, gt=0)
    direction_a: Optional[int] = Field(None, ge=0)
    direction_b: Optional[int] = Field(None, ge=0)
    heatmap: bool = True

    @field_validator("steps")
    @classmethod
    def _steps_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"steps must be odd, got {value}")
        return value


class CompareSection(_Section):
    """Paired optimizer comparison on egg-carton surfaces."""

    budget: int = Field(2000, ge=2)
    seeds: int = Field(10, ge=1)
    dim: int = Field(50, ge=1)
    frequency: float = Field(40.0, gt=0)
    amplitude: float = Field(1.0, ge=0)
    quadratic_weight: float = Field(0.1, ge=0)
    start_noise: float = Field(0.25, ge=0)
    lr: float = Field(1e-3, gt=0)
    epsilon: float = Field(0.005, gt=0)
    population: int = Field(15, ge=1)
    samples: int = Field(10, ge=1)


class RunConfig(_Section):
    """Complete, schema-checked configuration of one command."""

    model: ModelSection = Field(default_factory=ModelSection)
    quant: QuantSection = Field(default_factory=QuantSection)
    search: SearchSection = Field(default_factory=SearchSection)
    loss: LossSection = Field(default_factory=LossSection)
    data: DataSection = Field(default_factory=DataSection)
    landscape: LandscapeSection = Field(default_factory=LandscapeSection)
    compare: CompareSection = Field(default_factory=CompareSection)
    seed: int = 0
    threads: int = Field(1, ge=1)
    output_dir: str = "runs"
    trace_timing: bool = False

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            **self.model.model_dump(),
            weight_bits=self.quant.weight_bits,
            activation_bits=self.quant.activation_bits,
        )

    def epsilon(self) -> float:
        """Configured mutation range, or the bitwidth default."""
        if self.search.epsilon is not None:
            return self.search.epsilon
        return default_epsilon(self.quant.weight_bits)

    def search_settings(self) -> SearchSettings:
        s = self.search
        return SearchSettings(
            passes=s.passes,
            population=s.population,
            cycles=s.cycles,
            samples=s.samples,
            epsilon=self.epsilon(),
            seed=self.seed,
            attention_only=s.attention_only,
        )

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump()


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def set_dotted(data: Dict[str, Any], dotted_key: str, value: Any) -> None:
    """``set_dotted(d, "search.passes", 5)`` sets ``d["search"]["passes"]``."""
    parts = dotted_key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"'{dotted_key}' does not name a configuration section")
    node[parts[-1]] = value


def read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """``EVQ_SEED`` and ``EVQ_THREADS`` as configuration overrides."""
    environ = os.environ if environ is None else environ
    overrides: Dict[str, Any] = {}
    for name, key in ((ENV_SEED, "seed"), (ENV_THREADS, "threads")):
        raw = environ.get(name)
        if raw is None or raw == "":
            continue
        try:
            overrides[key] = int(raw)
        except ValueError:
            raise ConfigError(f"{name} must be an integer, got '{raw}'") from None
    return overrides


def load_config(
    path: Optional[str] = None,
    flags: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Build a RunConfig from every source.

    Args:
        path: Optional JSON configuration file.
        flags: Dotted-key overrides from the command line (highest precedence).
        environ: Environment to read; defaults to ``os.environ``.

    Returns:
        The validated configuration.

    Raises:
        ConfigError: On unknown keys, out-of-range values or unreadable JSON.
    """
    data: Dict[str, Any] = read_config_file(path) if path else {}
    data = _merge(data, environment_overrides(environ))
    nested: Dict[str, Any] = {}
    for key, value in (flags or {}).items():
        if value is not None:
            set_dotted(nested, key, value)
    data = _merge(data, nested)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    logger.debug(f"Configuration resolved (seed={config.seed}, threads={config.threads})")
    return config

