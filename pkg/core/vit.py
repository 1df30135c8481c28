"""
Tiny vision transformer module.

This module provides a configurable pre-LayerNorm vision transformer over
pre-tokenized embeddings. Its forward pass applies fake quantization at every
declared weight and activation point. Each block owns a quantization-point
table; the scales of one block can be read and written as a single flat
vector (BlockScales), which is what the scale search perturbs.

Per block and per head ``h`` the table holds:

- attention weights: ``attn.w_q.h``, ``attn.w_k.h``, ``attn.w_v.h`` and
  ``attn.w_o`` (3N+1, per-output-channel uniform);
- attention activations: ``attn.q.h``, ``attn.k.h``, ``attn.v.h``,
  ``attn.scores.h``, ``attn.softmax.h`` (log2), ``attn.head.h`` and
  ``attn.proj`` (6N+1, per-tensor);
- MLP points: ``mlp.w_fc1``, ``mlp.w_fc2`` (per-output-channel),
  ``mlp.gelu`` (log2) and ``mlp.fc2`` (per-tensor).

Weights are stored ``[in, out]``; every linear layer computes ``x @ W + b``.
"""

import copy
import dataclasses
import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from core.error_handler import CalibrationError, DimensionError, QuantParamError
from core.models import (
    PASSTHROUGH_BITS,
    BlockScales,
    QuantParams,
    ScaleSegment,
    ViTConfig,
)
from core.quantizer import (
    bias_correct,
    fake_quant,
    fake_quant_stacked,
    init_scale_log2,
    init_scale_minmax,
    init_scale_omse,
    init_scale_percentile,
)
from core.tensor_ops import (
    Tensor,
    add,
    as_tensor,
    concat,
    gelu,
    layernorm,
    matmul,
    mean_pool,
    scale,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

# tanh-GELU bottoms out near -0.17004; the log2 point shifts its input by at
# least this much so every quantized value is >= 0.
GELU_FLOOR = 0.1701

# Cache key of the fused, fake-quantized Q|K|V weight.
FUSED_QKV = "attn.w_qkv"

HEAD_ACTIVATIONS = ("q", "k", "v", "scores", "softmax", "head")
LOG2_POINTS = ("softmax", "gelu")

Observer = Callable[[str, Tensor], None]


def attention_weight_points(heads: int) -> List[str]:
    """Names of the 3N+1 attention weight points, in table order."""
    names = []
    for h in range(heads):
        names.extend([f"attn.w_q.{h}", f"attn.w_k.{h}", f"attn.w_v.{h}"])
    names.append("attn.w_o")
    return names


def qkv_weight_points(heads: int) -> List[str]:
    """Per-head projection weights in fused-column order: all Q, then K, then V."""
    return [f"attn.w_{kind}.{h}" for kind in ("q", "k", "v") for h in range(heads)]


def attention_activation_points(heads: int) -> List[str]:
    """Names of the 6N+1 attention activation points, in table order."""
    names = [f"attn.{kind}.{h}" for h in range(heads) for kind in HEAD_ACTIVATIONS]
    names.append("attn.proj")
    return names


MLP_POINTS = ("mlp.w_fc1", "mlp.w_fc2", "mlp.gelu", "mlp.fc2")
RESIDUAL_PROJECTIONS = ("attn.w_o", "mlp.w_fc2")


def point_table(heads: int) -> List[str]:
    """Every quantization point of one block, in BlockScales order."""
    return (
        attention_weight_points(heads)
        + attention_activation_points(heads)
        + list(MLP_POINTS)
    )


def is_weight_point(name: str) -> bool:
    return ".w_" in name


def is_log2_point(name: str) -> bool:
    return name.split(".")[1] in LOG2_POINTS


def gelu_log2_shift(scale: float) -> np.float32:
    """
    Offset added to GELU outputs in front of their log2 point.

    The largest ``scale * 2^-m`` that is still ``>= GELU_FLOOR``, so
    ``gelu(x) = 0`` lands exactly on a log2 level and dequantizes to 0.
    """
    steps = max(0, math.floor(math.log2(scale / GELU_FLOOR)))
    return np.float32(scale * 2.0**-steps)


def bias_name(weight_point: str) -> str:
    """``attn.w_q.0`` -> ``attn.b_q.0``."""
    return weight_point.replace(".w_", ".b_", 1)


class ViTBlock:
    """
    One quantization-aware MHSA + MLP block.

    Attributes:
        config: Model configuration.
        weights: Weight matrices, biases and (unquantized) LayerNorm params.
        points: Quantization-point table, ordered as ``point_table``.
    """

    def __init__(
        self,
        config: ViTConfig,
        weights: Dict[str, np.ndarray],
        points: Dict[str, QuantParams],
    ):
        self.config = config
        self.weights = {k: as_tensor(v) for k, v in weights.items()}
        expected = point_table(config.heads)
        if list(points) != expected:
            missing = set(expected) ^ set(points)
            raise DimensionError(f"quantization-point table mismatch: {sorted(missing)}")
        self.points = dict(points)
        self._qweights: Dict[str, Tensor] = {}

    # -- quantization table ------------------------------------------------

    def scale_segments(self) -> List[ScaleSegment]:
        segments = []
        offset = 0
        for name, params in self.points.items():
            segments.append(ScaleSegment(name, offset, params.scale.size))
            offset += params.scale.size
        return segments

    def get_scales(self) -> BlockScales:
        values = np.concatenate([p.scale for p in self.points.values()])
        return BlockScales(values=values, segments=tuple(self.scale_segments()))

    def set_scales(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32).reshape(-1)
        segments = self.scale_segments()
        total = sum(s.length for s in segments)
        if values.size != total:
            raise DimensionError(f"block expects {total} scale elements, got {values.size}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise QuantParamError("every scale element must be finite and > 0")
        for seg in segments:
            chunk = values[seg.offset : seg.offset + seg.length]
            self.points[seg.point] = self.points[seg.point].with_scale(chunk)
        self._qweights.clear()

    def set_point(self, name: str, params: QuantParams) -> None:
        if name not in self.points:
            raise KeyError(name)
        self.points[name] = params
        if is_weight_point(name):
            self._qweights.pop(name, None)
            if name.split(".")[1] in ("w_q", "w_k", "w_v"):
                self._qweights.pop(FUSED_QKV, None)

    def weight(self, name: str, quantized: bool) -> Tensor:
        """The weight matrix of ``name``, fake-quantized when requested."""
        if not quantized:
            return self.weights[name]
        if name not in self._qweights:
            self._qweights[name] = fake_quant(self.weights[name], self.points[name])
        return self._qweights[name]

    def warm_weights(self) -> None:
        """Fill the fake-quantized weight cache before concurrent forwards."""
        for name in self.points:
            if is_weight_point(name):
                self.weight(name, quantized=True)
        self.fused_qkv_weight()

    def fused_qkv_weight(self) -> Tensor:
        """Fake-quantized per-head Q, K, V weights side by side, ``[d, 3*N*dk]``."""
        if FUSED_QKV not in self._qweights:
            names = qkv_weight_points(self.config.heads)
            self._qweights[FUSED_QKV] = concat([self.weight(n, True) for n in names], axis=1)
        return self._qweights[FUSED_QKV]

    # -- forward -----------------------------------------------------------

    def _act(
        self,
        name: str,
        x: Tensor,
        quantized: bool,
        observer: Optional[Observer],
    ) -> Tensor:
        if observer is not None:
            observer(name, x)
        params = self.points[name]
        if not quantized or not params.enabled:
            return x
        if name != "mlp.gelu":
            return fake_quant(x, params)
        shift = gelu_log2_shift(float(params.scale[0]))
        return (fake_quant(x + shift, params) - shift).astype(np.float32, copy=False)

    def _linear(
        self,
        x: Tensor,
        weight_point: str,
        quantized: bool,
        observer: Optional[Observer],
    ) -> Tensor:
        if observer is not None:
            observer(f"input:{weight_point}", x)
        return add(
            matmul(x, self.weight(weight_point, quantized)),
            self.weights[bias_name(weight_point)],
        )

    def _heads_act(
        self,
        kind: str,
        x: Tensor,
        quantized: bool,
        observer: Optional[Observer],
    ) -> Tensor:
        """Per-head activation points on a head-stacked ``[batch, N, ...]`` tensor."""
        names = [f"attn.{kind}.{h}" for h in range(self.config.heads)]
        if observer is not None:
            for h, name in enumerate(names):
                observer(name, x[:, h])
        if not quantized:
            return x
        return fake_quant_stacked(x, [self.points[name] for name in names], axis=1)

    def _qkv(self, x: Tensor, quantized: bool, observer: Optional[Observer]) -> Tensor:
        """All per-head Q, K and V projections as one ``[batch, T, 3*N*dk]`` product."""
        names = qkv_weight_points(self.config.heads)
        if observer is not None:
            for name in names:
                observer(f"input:{name}", x)
        if quantized:
            weight = self.fused_qkv_weight()
        else:
            weight = concat([self.weights[n] for n in names], axis=1)
        bias = concat([self.weights[bias_name(n)] for n in names], axis=0)
        return add(matmul(x, weight), bias)

    def attention(
        self, x: Tensor, quantized: bool, observer: Optional[Observer] = None
    ) -> Tensor:
        """
        Multi-head self-attention ``concat(H_0 .. H_N) W^O`` on ``[batch, T, d]``.

        Each head computes ``softmax(q k^T / sqrt(d_k)) v``. Heads run stacked
        along axis 1; every head keeps its own activation scales.
        """
        cfg = self.config
        batch, tokens = x.shape[0], x.shape[1]
        qkv = self._qkv(x, quantized, observer)
        qkv = qkv.reshape(batch, tokens, 3, cfg.heads, cfg.head_dim).transpose(2, 0, 3, 1, 4)
        q = self._heads_act("q", qkv[0], quantized, observer)
        k = self._heads_act("k", qkv[1], quantized, observer)
        v = self._heads_act("v", qkv[2], quantized, observer)
        scores = self._heads_act(
            "scores", scale(matmul(q, transpose(k)), 1.0 / math.sqrt(cfg.head_dim)), quantized, observer
        )
        probs = self._heads_act("softmax", softmax(scores, axis=-1), quantized, observer)
        heads = self._heads_act("head", matmul(probs, v), quantized, observer)
        merged = transpose(heads, (0, 2, 1, 3)).reshape(batch, tokens, cfg.embed_dim)
        return self._act(
            "attn.proj", self._linear(merged, "attn.w_o", quantized, observer), quantized, observer
        )

    def mlp(self, x: Tensor, quantized: bool, observer: Optional[Observer] = None) -> Tensor:
        """FC1 -> GELU -> FC2 with the GELU output log2-quantized."""
        hidden = gelu(self._linear(x, "mlp.w_fc1", quantized, observer))
        hidden = self._act("mlp.gelu", hidden, quantized, observer)
        return self._act(
            "mlp.fc2", self._linear(hidden, "mlp.w_fc2", quantized, observer), quantized, observer
        )

    def forward(self, x: Tensor, quantized: bool, observer: Optional[Observer] = None) -> Tensor:
        """Pre-LN residual block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
        w = self.weights
        x = add(x, self.attention(layernorm(x, w["ln1.gamma"], w["ln1.beta"]), quantized, observer))
        return add(x, self.mlp(layernorm(x, w["ln2.gamma"], w["ln2.beta"]), quantized, observer))


class TinyViT:
    """
    Token embeddings -> B quantization-aware blocks -> mean-pool -> linear head.

    The classifier head stays full precision.
    """

    def __init__(
        self,
        config: ViTConfig,
        blocks: Sequence[ViTBlock],
        head_weight: np.ndarray,
        head_bias: np.ndarray,
    ):
        if len(blocks) != config.blocks:
            raise DimensionError(f"config declares {config.blocks} blocks, got {len(blocks)}")
        self.config = config
        self.blocks = list(blocks)
        self.head_weight = as_tensor(head_weight)
        self.head_bias = as_tensor(head_bias)

    def check_input(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.tokens, cfg.embed_dim):
            raise DimensionError(
                f"expected input [batch, {cfg.tokens}, {cfg.embed_dim}], got {x.shape}"
            )
        return x

    def forward_blocks(
        self,
        x: Tensor,
        quantized: bool,
        start: int = 0,
        stop: Optional[int] = None,
        observer: Optional[Observer] = None,
    ) -> Tensor:
        """Run blocks ``start .. stop-1`` on a residual stream ``x``."""
        stop = self.config.blocks if stop is None else stop
        for block in self.blocks[start:stop]:
            x = block.forward(x, quantized, observer)
        return x

    def block_outputs(self, x: Tensor, quantized: bool) -> List[Tensor]:
        """Residual stream after every block (used for locality checks)."""
        x = self.check_input(x)
        outputs = []
        for block in self.blocks:
            x = block.forward(x, quantized)
            outputs.append(x)
        return outputs

    def head(self, x: Tensor) -> Tensor:
        """Mean-pool tokens and apply the full-precision classifier."""
        return add(matmul(mean_pool(x, axis=1), self.head_weight), self.head_bias)

    def forward(
        self, x: Tensor, quantized: bool = True, observer: Optional[Observer] = None
    ) -> Tensor:
        """Logits ``[batch, classes]`` for an input batch ``[batch, T, d]``."""
        return self.head(self.forward_blocks(self.check_input(x), quantized, observer=observer))

    def get_block_scales(self, block_index: int) -> BlockScales:
        return self._block(block_index).get_scales()

    def set_block_scales(self, block_index: int, scales) -> None:
        values = scales.values if isinstance(scales, BlockScales) else scales
        self._block(block_index).set_scales(values)

    def all_points(self) -> Iterable:
        """Yield ``(block_index, point name, params)`` over the whole model."""
        for i, block in enumerate(self.blocks):
            for name, params in block.points.items():
                yield i, name, params

    def copy(self) -> "TinyViT":
        return copy.deepcopy(self)

    def _block(self, block_index: int) -> ViTBlock:
        if not 0 <= block_index < len(self.blocks):
            raise DimensionError(
                f"block index {block_index} out of range for {len(self.blocks)} blocks"
            )
        return self.blocks[block_index]


def forward(model: TinyViT, input_batch: Tensor, quantized: bool = True) -> Tensor:
    """Logits of ``model`` on ``input_batch``; see ``TinyViT.forward``."""
    return model.forward(input_batch, quantized=quantized)


def get_block_scales(model: TinyViT, block_index: int) -> BlockScales:
    """Flattened scales of one block."""
    return model.get_block_scales(block_index)


def set_block_scales(model: TinyViT, block_index: int, scales) -> None:
    """Install a flattened scale vector (BlockScales or array) into one block."""
    model.set_block_scales(block_index, scales)


# -- construction and calibration --------------------------------------------


def _placeholder_points(config: ViTConfig) -> Dict[str, QuantParams]:
    """Unit-scale table; weight scales are replaced by calibration."""
    points = {}
    for name in point_table(config.heads):
        if is_weight_point(name):
            points[name] = None  # filled by init_weight_scales
        else:
            points[name] = QuantParams(
                scale=np.ones(1),
                bitwidth=config.activation_bits,
                scheme="log2" if is_log2_point(name) else "uniform",
            )
    return points


def _block_weight_shapes(config: ViTConfig) -> Dict[str, tuple]:
    d, dk, mlp = config.embed_dim, config.head_dim, config.mlp_dim
    shapes = {}
    for h in range(config.heads):
        for kind in ("q", "k", "v"):
            shapes[f"attn.w_{kind}.{h}"] = (d, dk)
    shapes["attn.w_o"] = (d, d)
    shapes["mlp.w_fc1"] = (d, mlp)
    shapes["mlp.w_fc2"] = (mlp, d)
    return shapes


def block_tensor_shapes(config: ViTConfig) -> Dict[str, tuple]:
    """Shape of every tensor a block stores: weights, their biases and both LayerNorms."""
    shapes = {}
    for name, shape in _block_weight_shapes(config).items():
        shapes[name] = shape
        shapes[bias_name(name)] = (shape[1],)
    for ln in ("ln1", "ln2"):
        shapes[f"{ln}.gamma"] = (config.embed_dim,)
        shapes[f"{ln}.beta"] = (config.embed_dim,)
    return shapes


def init_weight_scales(
    model: TinyViT,
    method: str = "minmax",
    percentile: float = 99.9,
) -> None:
    """
    (Re)initialize every weight point per output channel.

    Args:
        model: Model to update in place.
        method: ``"minmax"``, ``"percentile"`` or ``"omse"``.
        percentile: Percentile used by the percentile method.
    """
    bits = model.config.weight_bits
    for block in model.blocks:
        for name in list(block.points):
            if not is_weight_point(name):
                continue
            w = block.weights[name]
            if method == "omse" and bits < PASSTHROUGH_BITS:
                params = init_scale_omse(w, bits, "per_channel", axis=1)
            elif method == "percentile":
                params = init_scale_percentile(w, bits, percentile, "per_channel", axis=1)
            else:
                params = init_scale_minmax(w, bits, "per_channel", axis=1)
            block.set_point(name, params)
    logger.debug(f"Initialized weight scales with {method} at {bits} bits")


class ActivationObserver:
    """Collects per-point activation ranges and layer-input means."""

    def __init__(self) -> None:
        self.block_index = 0
        self.peaks: Dict[tuple, float] = {}
        self.input_sums: Dict[tuple, np.ndarray] = {}
        self.input_counts: Dict[tuple, int] = {}

    def __call__(self, name: str, x: Tensor) -> None:
        key = (self.block_index, name)
        if name.startswith("input:"):
            flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
            self.input_sums[key] = self.input_sums.get(key, 0.0) + flat.sum(axis=0)
            self.input_counts[key] = self.input_counts.get(key, 0) + flat.shape[0]
            return
        peak = float(np.max(x)) if is_log2_point(name) else float(np.max(np.abs(x)))
        self.peaks[key] = max(self.peaks.get(key, 0.0), peak)

    def input_mean(self, block_index: int, weight_point: str) -> np.ndarray:
        key = (block_index, f"input:{weight_point}")
        return self.input_sums[key] / self.input_counts[key]


def observe(model: TinyViT, batches: Iterable[Tensor]) -> ActivationObserver:
    """Run the full-precision forward pass over ``batches`` and record ranges."""
    observer = ActivationObserver()
    seen = 0
    for batch in batches:
        x = model.check_input(batch)
        for i, block in enumerate(model.blocks):
            observer.block_index = i
            x = block.forward(x, quantized=False, observer=observer)
        seen += 1
    if seen == 0:
        raise CalibrationError("calibration needs at least one batch")
    return observer


def calibrate_activations(model: TinyViT, batches: Iterable[Tensor]) -> ActivationObserver:
    """
    Set every activation scale from full-precision calibration ranges.

    Uniform points use MinMax per tensor; log2 points use the observed peak.
    """
    observer = observe(model, batches)
    bits = model.config.activation_bits
    for i, block in enumerate(model.blocks):
        for name in list(block.points):
            if is_weight_point(name):
                continue
            peak = observer.peaks.get((i, name), 0.0)
            if name == "mlp.gelu":
                # room for the level-aligned shift (< 2 * GELU_FLOOR)
                peak += 2 * GELU_FLOOR
            peak = np.array([peak], dtype=np.float32)
            if is_log2_point(name):
                params = init_scale_log2(peak, bits)
            else:
                params = init_scale_minmax(peak, bits)
            block.set_point(name, params)
    logger.debug(f"Calibrated activation scales of {len(model.blocks)} blocks")
    return observer


def apply_bias_correction(model: TinyViT, observer: ActivationObserver) -> None:
    """Correct every linear-layer bias for its weight-quantization error."""
    for i, block in enumerate(model.blocks):
        for name in block.points:
            if not is_weight_point(name) or not block.points[name].enabled:
                continue
            mean_input = observer.input_mean(i, name).reshape(1, -1)
            b = bias_name(name)
            block.weights[b] = bias_correct(
                block.weights[name], block.weight(name, quantized=True), block.weights[b], mean_input
            )
    logger.debug("Applied bias correction to all quantized linear layers")


def init_model(
    config: ViTConfig,
    seed: int,
    calib: Optional[Iterable[Tensor]] = None,
) -> TinyViT:
    """
    Build a tiny ViT with scaled Gaussian weights.

    Every matrix draws from N(0, 1/fan_in); the two projections that write
    into the residual stream (``attn.w_o``, ``mlp.w_fc2``) are further scaled
    by ``1/sqrt(2B)`` so B blocks together keep the stream near unit scale.

    Weight scales are initialized with per-channel MinMax. When ``calib``
    batches are given, activation scales are calibrated on them; otherwise
    activation scales stay at 1.

    Args:
        config: Model configuration.
        seed: Seed of the weight generator.
        calib: Optional iterable of ``[batch, T, d]`` calibration batches.

    Returns:
        The initialized model.
    """
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    residual_scale = 1.0 / math.sqrt(2 * config.blocks)
    blocks = []
    for _ in range(config.blocks):
        weights: Dict[str, np.ndarray] = {}
        for name, shape in _block_weight_shapes(config).items():
            std = 1.0 / math.sqrt(shape[0])
            if name in RESIDUAL_PROJECTIONS:
                std *= residual_scale
            weights[name] = (rng.standard_normal(shape) * std).astype(np.float32)
            weights[bias_name(name)] = np.zeros(shape[1], dtype=np.float32)
        for ln in ("ln1", "ln2"):
            weights[f"{ln}.gamma"] = np.ones(d, dtype=np.float32)
            weights[f"{ln}.beta"] = np.zeros(d, dtype=np.float32)
        points = _placeholder_points(config)
        for name, shape in _block_weight_shapes(config).items():
            points[name] = init_scale_minmax(weights[name], config.weight_bits, "per_channel", axis=1)
        blocks.append(ViTBlock(config, weights, points))

    head_weight = (rng.standard_normal((d, config.classes)) / math.sqrt(d)).astype(np.float32)
    model = TinyViT(config, blocks, head_weight, np.zeros(config.classes, dtype=np.float32))
    if calib is not None:
        calibrate_activations(model, calib)
    logger.info(
        f"Initialized tiny ViT (d={d}, N={config.heads}, B={config.blocks}, "
        f"T={config.tokens}) with seed {seed}"
    )
    return model


def quantize_model(
    model: TinyViT,
    calib: Sequence[Tensor],
    weight_bits: int,
    activation_bits: int,
    weight_init: str = "minmax",
    percentile: float = 99.9,
    bias_correction: bool = False,
) -> TinyViT:
    """
    A quantized copy of ``model`` at the given bitwidths.

    Weight scales come from ``weight_init`` (per output channel), activation
    scales from full-precision calibration ranges on ``calib``. With
    ``bias_correction`` every linear bias absorbs the expected output shift
    of its quantized weights. ``model`` itself is left untouched.

    ``weight_bits == PASSTHROUGH_BITS`` disables every point, activations
    included, so the copy reproduces the full-precision forward exactly.
    """
    if weight_bits == PASSTHROUGH_BITS and activation_bits != PASSTHROUGH_BITS:
        logger.info("Weight pass-through requested; disabling activation quantization too")
        activation_bits = PASSTHROUGH_BITS
    quantized = model.copy()
    config = dataclasses.replace(
        model.config, weight_bits=weight_bits, activation_bits=activation_bits
    )
    quantized.config = config
    for block in quantized.blocks:
        block.config = config
    init_weight_scales(quantized, weight_init, percentile)
    observer = calibrate_activations(quantized, calib)
    if bias_correction:
        apply_bias_correction(quantized, observer)
    logger.info(
        f"Quantized model to W{weight_bits}A{activation_bits} with {weight_init} weight scales"
        f"{' and bias correction' if bias_correction else ''}"
    )
    return quantized


def agreement(
    quant_model: TinyViT,
    fp_model: TinyViT,
    batches: Iterable[Tensor],
) -> float:
    """Fraction of samples whose quantized top-1 class equals the FP top-1 class."""
    matches = 0
    total = 0
    for batch in batches:
        p = quant_model.forward(batch, quantized=True)
        o = fp_model.forward(batch, quantized=False)
        matches += int(np.sum(np.argmax(p, axis=1) == np.argmax(o, axis=1)))
        total += p.shape[0]
    return matches / total if total else 0.0
