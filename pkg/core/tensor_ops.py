"""
Dense tensor kernel.

This module provides the small set of float32 array operations the tiny
vision-transformer forward pass needs. Tensors are plain ``numpy`` arrays of
dtype ``float32``; every operation here is pure and returns a new array.

Matrix products accumulate over the inner dimension one term at a time, in
index order, with separate multiply and add roundings. That makes every
output element bit-identical to a naive triple loop run in float32, which is
what keeps fitness values reproducible at the 1e-6 scale.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from core.error_handler import DimensionError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float32]

# tanh approximation of GELU:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
GELU_SQRT_2_OVER_PI = np.float32(0.7978845608028654)
GELU_CUBIC_COEF = np.float32(0.044715)

LAYERNORM_EPS = 1e-5


def as_tensor(values) -> Tensor:
    """
    Convert array-like input into a contiguous float32 tensor.

    Args:
        values: Anything ``numpy.asarray`` accepts.

    Returns:
        A C-contiguous float32 array (no copy when already one).
    """
    return np.ascontiguousarray(values, dtype=np.float32)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with a fixed, left-to-right accumulation order.

    Leading (batch) dimensions broadcast; the last two dimensions multiply as
    ``[m, k] x [k, n] -> [m, n]``.

    Args:
        a: Tensor of shape ``[..., m, k]``.
        b: Tensor of shape ``[..., k, n]``.

    Returns:
        Tensor of shape ``[..., m, n]``.

    Raises:
        DimensionError: If either operand has fewer than two dimensions or the
            inner dimensions disagree.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs operands with >= 2 dims, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    try:
        batch_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f"matmul batch dimensions differ: {e}") from e

    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    if b.ndim == 2:
        rows = a.reshape(-1, k)
        return _accumulate(rows.T, b, (rows.shape[0], n)).reshape(a.shape[:-1] + (n,))
    a_cols = np.moveaxis(np.broadcast_to(a, batch_shape + (m, k)), -1, 0)[..., None]
    b_rows = np.moveaxis(np.broadcast_to(b, batch_shape + (k, n)), -2, 0)[..., None, :]
    return _accumulate(a_cols, b_rows, batch_shape + (m, n))


def _accumulate(a_cols: np.ndarray, b_rows: np.ndarray, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``a_cols[p] * b_rows[p]`` over ``p`` in index order, in place."""
    a_cols = np.ascontiguousarray(a_cols)
    b_rows = np.ascontiguousarray(b_rows)
    out = np.zeros(shape, dtype=np.float32)
    term = np.empty(shape, dtype=np.float32)
    for p in range(a_cols.shape[0]):
        col = a_cols[p] if a_cols.ndim > 2 else a_cols[p][:, None]
        np.multiply(col, b_rows[p], out=term)
        np.add(out, term, out=out)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Numerically stable softmax (max-subtraction) along ``axis``.

    Args:
        x: Input tensor.
        axis: Axis to normalize over.

    Returns:
        Tensor of the same shape whose slices along ``axis`` sum to 1.

    Raises:
        DimensionError: If ``axis`` is out of range.
    """
    x = as_tensor(x)
    _check_axis(x, axis)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(np.float32)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (see the module constants)."""
    x = as_tensor(x)
    inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x)
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))).astype(
        np.float32
    )


def layernorm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS
) -> Tensor:
    """
    Layer normalization over the last axis.

    Args:
        x: Tensor of shape ``[..., d]``.
        gamma: Scale vector of length ``d``.
        beta: Shift vector of length ``d``.
        eps: Variance floor; a constant row normalizes to ``beta``.

    Returns:
        Normalized tensor with the shape of ``x``.

    Raises:
        DimensionError: If ``gamma``/``beta`` do not match the last axis.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm parameters {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    mean = np.mean(x, axis=-1, keepdims=True, dtype=np.float32)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True, dtype=np.float32)
    normed = centered / np.sqrt(var + np.float32(eps))
    return (normed * gamma + beta).astype(np.float32)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """
    Concatenate tensors along ``axis``.

    Raises:
        DimensionError: If the list is empty or the other dimensions differ.
    """
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        return np.concatenate([as_tensor(t) for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shape mismatch: {e}") from e


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    """
    Permute dimensions; by default swaps the last two.

    Raises:
        DimensionError: If ``axes`` is not a permutation of the dimensions.
    """
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"cannot swap last two dims of shape {x.shape}")
        return np.ascontiguousarray(np.swapaxes(x, -1, -2))
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"axes {axes} is not a permutation for shape {x.shape}")
    return np.ascontiguousarray(np.transpose(x, axes))


def add(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise sum; ``b`` may be a trailing-dimension bias (e.g. shape ``[n]``).

    Raises:
        DimensionError: If ``b`` does not match the trailing shape of ``a``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return (a + b).astype(np.float32)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply every element by ``factor`` (rounded to float32 first)."""
    return (as_tensor(x) * np.float32(factor)).astype(np.float32)


def mean_pool(x: Tensor, axis: int = 1) -> Tensor:
    """
    Mean over ``axis`` (token pooling before the classifier head).

    Slices are summed in index order, so a sample's result does not depend
    on how many other samples share the batch.
    """
    x = as_tensor(x)
    _check_axis(x, axis)
    slices = np.moveaxis(x, axis, 0)
    if slices.shape[0] == 0:
        raise DimensionError(f"cannot pool over an empty axis {axis} of {x.shape}")
    total = slices[0].copy()
    for item in slices[1:]:
        np.add(total, item, out=total)
    return (total / np.float32(slices.shape[0])).astype(np.float32, copy=False)


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
