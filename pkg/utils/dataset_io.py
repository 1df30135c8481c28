"""
EVQD dataset container and deterministic batch iteration.

Layout (little-endian):

    magic "EVQD" | version u8 | count u32 | tokens u32 | dim u32 | has_labels u8
    samples f32[count * tokens * dim] | labels u16[count] (when has_labels)
"""

import logging
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from core.error_handler import CalibrationError, DataFormatError, ParameterError

logger = logging.getLogger(__name__)

MAGIC = b"EVQD"
VERSION = 1
HEADER = struct.Struct("<4sBIIIB")


@dataclass
class DatasetFile:
    """Token embeddings ``[count, T, d]`` with optional class labels."""

    samples: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 3:
            raise ParameterError(f"samples must be [count, T, d], got {self.samples.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
            if self.labels.shape != (self.count,):
                raise ParameterError(
                    f"expected {self.count} labels, got shape {self.labels.shape}"
                )

    @property
    def count(self) -> int:
        return int(self.samples.shape[0])

    @property
    def tokens(self) -> int:
        return int(self.samples.shape[1])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[2])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, size: int) -> "DatasetFile":
        """The first ``size`` samples."""
        if not 1 <= size <= self.count:
            raise ParameterError(f"subset size {size} outside 1..{self.count}")
        labels = self.labels[:size] if self.labels is not None else None
        return DatasetFile(self.samples[:size].copy(), None if labels is None else labels.copy())


def to_bytes(dataset: DatasetFile) -> bytes:
    header = HEADER.pack(
        MAGIC, VERSION, dataset.count, dataset.tokens, dataset.dim, int(dataset.has_labels)
    )
    parts = [header, dataset.samples.astype("<f4").tobytes()]
    if dataset.labels is not None:
        parts.append(dataset.labels.astype("<u2").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> DatasetFile:
    """
    Parse an EVQD buffer.

    Raises:
        DataFormatError: On a bad magic, unknown version, truncation or
            trailing bytes; the message carries the byte offset.
    """
    if len(data) < HEADER.size:
        raise DataFormatError("truncated EVQD header", offset=len(data))
    magic, version, count, tokens, dim, has_labels = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported EVQD version {version}", offset=4)
    if has_labels not in (0, 1):
        raise DataFormatError(f"invalid label flag {has_labels}", offset=HEADER.size - 1)

    offset = HEADER.size
    payload = count * tokens * dim * 4
    if len(data) < offset + payload:
        raise DataFormatError(
            f"sample payload needs {payload} bytes, {len(data) - offset} present", offset=len(data)
        )
    samples = np.frombuffer(data, dtype="<f4", count=count * tokens * dim, offset=offset)
    offset += payload

    labels = None
    if has_labels:
        if len(data) < offset + count * 2:
            raise DataFormatError("truncated label block", offset=len(data))
        labels = np.frombuffer(data, dtype="<u2", count=count, offset=offset)
        offset += count * 2
    if offset != len(data):
        raise DataFormatError(f"{len(data) - offset} trailing bytes", offset=offset)

    return DatasetFile(
        samples=samples.astype(np.float32).reshape(count, tokens, dim),
        labels=None if labels is None else labels.astype(np.uint16),
    )


def save(path: str, dataset: DatasetFile) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(dataset))
    logger.info(f"Dataset with {dataset.count} samples saved to {path}")


def load(path: str) -> DatasetFile:
    with open(path, "rb") as f:
        data = f.read()
    dataset = from_bytes(data)
    logger.info(f"Dataset with {dataset.count} samples loaded from {path}")
    return dataset


@dataclass(frozen=True)
class BatchPlan:
    """
    How a dataset is cut into batches.

    Attributes:
        batch_size: Samples per batch (>= 2 for infoNCE).
        shuffle_seed: Permutation seed; None keeps file order.
        drop_ragged: Drop the last partial batch.
    """

    batch_size: int
    shuffle_seed: Optional[int] = None
    drop_ragged: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class Batch:
    samples: np.ndarray
    labels: Optional[np.ndarray]
    indices: np.ndarray


def batch_order(count: int, plan: BatchPlan) -> List[np.ndarray]:
    """Sample indices per batch; a pure function of (seed, count, batch size)."""
    if plan.shuffle_seed is None:
        order = np.arange(count)
    else:
        order = np.random.default_rng(plan.shuffle_seed).permutation(count)
    full = count // plan.batch_size
    batches = [order[i * plan.batch_size : (i + 1) * plan.batch_size] for i in range(full)]
    if not plan.drop_ragged and count % plan.batch_size:
        batches.append(order[full * plan.batch_size :])
    return batches


def iterate(dataset: DatasetFile, plan: BatchPlan) -> Iterator[Batch]:
    """Yield batches in plan order."""
    for indices in batch_order(dataset.count, plan):
        labels = dataset.labels[indices] if dataset.labels is not None else None
        yield Batch(samples=dataset.samples[indices], labels=labels, indices=indices)


def calibration_batches(dataset: DatasetFile, plan: BatchPlan) -> List[Batch]:
    """Materialized batch list; raises CalibrationError when it is empty."""
    batches = list(iterate(dataset, plan))
    if not batches:
        raise CalibrationError(
            f"{dataset.count} samples give no full batch of {plan.batch_size}"
        )
    return batches
