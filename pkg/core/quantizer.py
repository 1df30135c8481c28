"""
Simulated quantization module.

This module provides symmetric uniform quantization, power-of-two (log2)
quantization for post-softmax/post-GELU activations, the scale initializers
(MinMax, Percentile, OMSE) and bias correction for quantized linear layers.
"""

import logging
from typing import Optional, Sequence

import numpy as np

from core.error_handler import CalibrationError, DimensionError, DomainError, QuantParamError
from core.models import Granularity, QuantizedTensor, QuantParams
from core.tensor_ops import Tensor, as_tensor

logger = logging.getLogger(__name__)

DEFAULT_PERCENTILE = 99.9
OMSE_GRID_POINTS = 100
OMSE_GRID_LOW = 0.2
OMSE_GRID_HIGH = 1.2
# Largest log2 code range dequantized through a lookup table.
LOG2_TABLE_LIMIT = 2**16


def _broadcast_scale(params: QuantParams, ndim: int) -> np.ndarray:
    """Reshape the scale vector so it broadcasts against an ``ndim`` tensor."""
    if params.granularity == "per_tensor":
        return params.scale.reshape((1,) * ndim) if ndim else params.scale[0]
    shape = [1] * ndim
    shape[params.axis] = -1
    return params.scale.reshape(shape)


def quantize_uniform(x: Tensor, params: QuantParams) -> QuantizedTensor:
    """
    Symmetric signed quantization: clip(round(x / scale), -qmax, qmax).

    Rounding is half-to-even (``numpy.rint``) and ``qmax = 2^(b-1) - 1``.

    Args:
        x: Input tensor.
        params: Uniform-scheme parameters; per-channel scales apply along
            ``params.axis``.

    Returns:
        The integer codes and their parameters.

    Raises:
        QuantParamError: If the parameters are not uniform-scheme.
        DimensionError: If per-channel scales do not match ``x``.
    """
    x = as_tensor(x)
    if params.scheme != "uniform":
        raise QuantParamError(f"quantize_uniform got a '{params.scheme}' scheme")
    params.check_shape(x.shape)
    qmax = params.max_code
    scale = _broadcast_scale(params, x.ndim)
    codes = np.clip(np.rint(x / scale), -qmax, qmax).astype(np.int32)
    return QuantizedTensor(codes=codes, params=params, shape=tuple(x.shape))


def quantize_log2(x: Tensor, params: QuantParams) -> QuantizedTensor:
    """
    Power-of-two quantization for non-negative activations.

    ``code = clip(round(-log2(max(x, floor) / s)), 0, 2^b - 1)`` with
    ``floor = s * 2^-(2^b - 1)``, so zero maps to the largest code.

    Args:
        x: Non-negative input tensor.
        params: Log2-scheme, per-tensor parameters (scale ``s``).

    Returns:
        The integer codes and their parameters.

    Raises:
        DomainError: If any element is negative.
        QuantParamError: If the parameters are not log2-scheme.
    """
    x = as_tensor(x)
    if params.scheme != "log2":
        raise QuantParamError(f"quantize_log2 got a '{params.scheme}' scheme")
    if np.any(x < 0):
        raise DomainError("log2 quantization requires non-negative input")
    params.check_shape(x.shape)
    max_code = params.max_code
    s = _broadcast_scale(params, x.ndim).astype(np.float64)
    floor = s * np.exp2(-float(max_code))
    ratio = np.maximum(x.astype(np.float64), floor) / s
    codes = np.clip(np.rint(-np.log2(ratio)), 0, max_code).astype(np.int32)
    return QuantizedTensor(codes=codes, params=params, shape=tuple(x.shape))


def quantize(x: Tensor, params: QuantParams) -> QuantizedTensor:
    """Dispatch on ``params.scheme``."""
    if params.scheme == "log2":
        return quantize_log2(x, params)
    return quantize_uniform(x, params)


def dequantize(q: QuantizedTensor) -> Tensor:
    """
    Map codes back to real values.

    Uniform codes dequantize to ``code * scale``; log2 codes to
    ``scale * 2^-code``, read from a per-channel table of the
    ``2^b`` possible values.
    """
    params = q.params
    if params.scheme == "log2" and params.max_code > LOG2_TABLE_LIMIT:
        s = _broadcast_scale(params, q.codes.ndim).astype(np.float64)
        return (s * np.exp2(-q.codes.astype(np.float64))).astype(np.float32)
    if params.scheme == "log2":
        exponents = np.exp2(-np.arange(params.max_code + 1, dtype=np.float64))
        table = (params.scale.astype(np.float64)[:, None] * exponents).astype(np.float32)
        if params.granularity == "per_tensor":
            return table[0][q.codes]
        channel = np.arange(params.scale.size).reshape(
            _broadcast_scale(params, q.codes.ndim).shape
        )
        return table[channel, q.codes]
    scale = _broadcast_scale(params, q.codes.ndim)
    return (q.codes.astype(np.float32) * scale).astype(np.float32, copy=False)


def fake_quant(x: Tensor, params: Optional[QuantParams]) -> Tensor:
    """
    Quantize-then-dequantize; the identity when ``params`` is None or disabled.
    """
    if params is None or not params.enabled:
        return as_tensor(x)
    return dequantize(quantize(x, params))


def fake_quant_stacked(x: Tensor, params: Sequence[QuantParams], axis: int) -> Tensor:
    """
    Fake-quantize every slice of ``x`` along ``axis`` with its own per-tensor params.

    Equal elementwise to calling ``fake_quant`` slice by slice; slices that
    share a scheme and bitwidth are processed in one pass.

    Raises:
        DimensionError: If ``params`` does not have one entry per slice.
    """
    x = as_tensor(x)
    if len(params) != x.shape[axis]:
        raise DimensionError(f"{len(params)} params for {x.shape[axis]} slices along axis {axis}")
    if not any(p.enabled for p in params):
        return x
    kinds = {(p.scheme, p.bitwidth, p.granularity, p.enabled) for p in params}
    if len(kinds) != 1 or params[0].granularity != "per_tensor":
        slices = [fake_quant(np.take(x, i, axis=axis), p) for i, p in enumerate(params)]
        return np.stack(slices, axis=axis)
    first = params[0]
    stacked = QuantParams(
        scale=np.concatenate([p.scale for p in params]),
        bitwidth=first.bitwidth,
        granularity="per_channel",
        axis=axis % x.ndim,
        scheme=first.scheme,
    )
    return dequantize(quantize(x, stacked))


def _reduce_abs_max(x: np.ndarray, granularity: Granularity, axis: Optional[int]) -> np.ndarray:
    magnitude = np.abs(x.astype(np.float64))
    if granularity == "per_tensor":
        return np.array([magnitude.max()])
    if axis is None:
        raise QuantParamError("per-channel initialization needs an axis")
    moved = np.moveaxis(magnitude, axis, 0).reshape(x.shape[axis], -1)
    return moved.max(axis=1)


def _scales_from_range(ranges: np.ndarray, bitwidth: int) -> np.ndarray:
    qmax = 2 ** (bitwidth - 1) - 1
    scales = ranges / qmax
    # Degenerate (all-zero) channels get a unit scale.
    return np.where(ranges > 0, scales, 1.0)


def init_scale_minmax(
    x: Tensor,
    bitwidth: int,
    granularity: Granularity = "per_tensor",
    axis: Optional[int] = None,
) -> QuantParams:
    """
    MinMax initialization: scale = max|x| / (2^(b-1) - 1).

    Args:
        x: Non-empty tensor to calibrate on.
        bitwidth: Number of bits.
        granularity: Per-tensor or per-channel.
        axis: Channel axis for per-channel scales.

    Returns:
        Uniform-scheme parameters; all-zero channels get scale 1.
    """
    x = as_tensor(x)
    if x.size == 0:
        raise CalibrationError("cannot initialize a scale from an empty tensor")
    ranges = _reduce_abs_max(x, granularity, axis)
    return QuantParams(
        scale=_scales_from_range(ranges, bitwidth),
        bitwidth=bitwidth,
        granularity=granularity,
        axis=axis if granularity == "per_channel" else None,
    )


def init_scale_percentile(
    x: Tensor,
    bitwidth: int,
    pct: float = DEFAULT_PERCENTILE,
    granularity: Granularity = "per_tensor",
    axis: Optional[int] = None,
) -> QuantParams:
    """
    Percentile initialization: scale = percentile(|x|, pct) / (2^(b-1) - 1).

    The percentile uses linear interpolation; ``pct = 100`` reproduces MinMax.

    Raises:
        QuantParamError: If ``pct`` is outside ``(0, 100]``.
    """
    if not 0 < pct <= 100:
        raise QuantParamError(f"percentile must be in (0, 100], got {pct}")
    x = as_tensor(x)
    if x.size == 0:
        raise CalibrationError("cannot initialize a scale from an empty tensor")
    magnitude = np.abs(x.astype(np.float64))
    if granularity == "per_tensor":
        ranges = np.array([np.percentile(magnitude, pct, method="linear")])
    else:
        if axis is None:
            raise QuantParamError("per-channel initialization needs an axis")
        moved = np.moveaxis(magnitude, axis, 0).reshape(x.shape[axis], -1)
        ranges = np.percentile(moved, pct, axis=1, method="linear")
    return QuantParams(
        scale=_scales_from_range(ranges, bitwidth),
        bitwidth=bitwidth,
        granularity=granularity,
        axis=axis if granularity == "per_channel" else None,
    )


def _uniform_mse(x: np.ndarray, scale: float, qmax: int) -> float:
    x32 = x.astype(np.float32)
    s = np.float32(scale)
    recon = np.clip(np.rint(x32 / s), -qmax, qmax).astype(np.float32) * s
    diff = x.astype(np.float64) - recon.astype(np.float64)
    return float(np.mean(diff * diff))


def omse_search(x: np.ndarray, bitwidth: int, minmax_scale: float) -> float:
    """
    Grid search of the MSE-optimal scale for one tensor or channel.

    Candidates are 100 points spanning [0.2, 1.2] x the MinMax scale plus the
    MinMax scale itself; ties go to the larger scale.
    """
    qmax = 2 ** (bitwidth - 1) - 1
    grid = np.linspace(OMSE_GRID_LOW, OMSE_GRID_HIGH, OMSE_GRID_POINTS) * minmax_scale
    candidates = np.unique(np.append(grid.astype(np.float32), np.float32(minmax_scale)))
    best_scale = float(candidates[0])
    best_mse = np.inf
    for candidate in candidates:
        mse = _uniform_mse(x, float(candidate), qmax)
        # ascending candidates: "<=" keeps the larger scale on ties
        if mse <= best_mse:
            best_mse = mse
            best_scale = float(candidate)
    return best_scale


def init_scale_omse(
    x: Tensor,
    bitwidth: int,
    granularity: Granularity = "per_tensor",
    axis: Optional[int] = None,
) -> QuantParams:
    """
    OMSE initialization: the scale minimizing ||x - fake_quant(x)||^2.

    Starts from the MinMax scale and searches the grid described in
    ``omse_search``; the MinMax scale is always a candidate, so the result
    never has a larger error than MinMax.
    """
    x = as_tensor(x)
    minmax = init_scale_minmax(x, bitwidth, granularity, axis)
    if granularity == "per_tensor":
        scales = [omse_search(x.reshape(-1), bitwidth, float(minmax.scale[0]))]
    else:
        moved = np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)
        scales = [
            omse_search(channel, bitwidth, float(s))
            for channel, s in zip(moved, minmax.scale)
        ]
    logger.debug(f"OMSE scales for {x.shape}: {len(scales)} channel(s) searched")
    return minmax.with_scale(np.asarray(scales, dtype=np.float32))


def init_scale_log2(x: Tensor, bitwidth: int) -> QuantParams:
    """
    Log2 initialization: ``s = max(x)`` so the largest activation gets code 0.

    Raises:
        DomainError: If ``x`` has negative entries.
    """
    x = as_tensor(x)
    if x.size == 0:
        raise CalibrationError("cannot initialize a scale from an empty tensor")
    if np.any(x < 0):
        raise DomainError("log2 calibration requires non-negative input")
    peak = float(x.max())
    return QuantParams(
        scale=np.array([peak if peak > 0 else 1.0]),
        bitwidth=bitwidth,
        scheme="log2",
    )


def bias_correct(
    weights: Tensor,
    quantized_weights: Tensor,
    bias: Tensor,
    calib_inputs: Tensor,
) -> Tensor:
    """
    Shift a layer bias by the expected output error of weight quantization.

    Weights are stored ``[in, out]`` (the layer computes ``x @ W + b``), so
    the correction is ``mean(x) @ (W - W_hat)``, averaged over every
    calibration token.

    Args:
        weights: Full-precision weights ``[in, out]``.
        quantized_weights: Fake-quantized weights, same shape.
        bias: Current bias ``[out]``.
        calib_inputs: Layer inputs ``[..., in]`` collected on calibration data.

    Returns:
        The corrected bias (float32).

    Raises:
        CalibrationError: If no calibration inputs are provided.
        DimensionError: On shape mismatches.
    """
    weights = as_tensor(weights)
    quantized_weights = as_tensor(quantized_weights)
    bias = as_tensor(bias)
    calib_inputs = as_tensor(calib_inputs)
    if calib_inputs.size == 0:
        raise CalibrationError("bias correction needs calibration inputs")
    if weights.shape != quantized_weights.shape or weights.ndim != 2:
        raise DimensionError(
            f"weight shapes differ: {weights.shape} vs {quantized_weights.shape}"
        )
    if calib_inputs.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"inputs {calib_inputs.shape} / bias {bias.shape} incompatible with {weights.shape}"
        )
    mean_input = calib_inputs.reshape(-1, weights.shape[0]).astype(np.float64).mean(axis=0)
    error = weights.astype(np.float64) - quantized_weights.astype(np.float64)
    return (bias.astype(np.float64) + mean_input @ error).astype(np.float32)
