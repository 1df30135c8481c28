"""
EVQM model container.

Layout (little-endian):

    magic "EVQM" | version u8 | 8 x u32 config
      (embed_dim, heads, blocks, tokens, classes, weight_bits, activation_bits, mlp_ratio)
    record_count u32
    record table, per record:
      name_len u16 | name utf-8 | dtype u8 (0 = f32) | ndim u8 | dims u32[ndim] | offset u64
    payload: raw f32 tensors; offsets are relative to the payload start

Records are written in canonical order, so equal models give equal bytes.
Quantization parameters are stored as two records per point:
``block.{i}.scale.{point}`` (the scale vector) and ``block.{i}.qmeta.{point}``
holding ``[bitwidth, scheme code, channel axis or -1]``.
"""

import hashlib
import logging
import struct
from typing import Dict, List, Tuple

import numpy as np

from core.error_handler import DataFormatError, ParameterError
from core.models import QuantParams, ViTConfig
from core.vit import TinyViT, ViTBlock, block_tensor_shapes, point_table

logger = logging.getLogger(__name__)

MAGIC = b"EVQM"
VERSION = 1
DTYPE_F32 = 0
CONFIG_FIELDS = (
    "embed_dim",
    "heads",
    "blocks",
    "tokens",
    "classes",
    "weight_bits",
    "activation_bits",
    "mlp_ratio",
)
HEADER = struct.Struct("<4sB" + "I" * len(CONFIG_FIELDS) + "I")
SCHEME_CODES = {"uniform": 0, "log2": 1}
SCHEME_NAMES = {v: k for k, v in SCHEME_CODES.items()}


def _qmeta(params: QuantParams) -> np.ndarray:
    axis = params.axis if params.granularity == "per_channel" else -1
    return np.array([params.bitwidth, SCHEME_CODES[params.scheme], axis], dtype=np.float32)


def _params_from_records(scale: np.ndarray, meta: np.ndarray) -> QuantParams:
    bitwidth, scheme_code, axis = (int(v) for v in meta)
    if scheme_code not in SCHEME_NAMES:
        raise DataFormatError(f"unknown scheme code {scheme_code}")
    return QuantParams(
        scale=scale,
        bitwidth=bitwidth,
        granularity="per_channel" if axis >= 0 else "per_tensor",
        axis=axis if axis >= 0 else None,
        scheme=SCHEME_NAMES[scheme_code],
    )


def model_records(model: TinyViT) -> List[Tuple[str, np.ndarray]]:
    """Every tensor of ``model`` as ``(name, array)`` in canonical order."""
    records = []
    for i, block in enumerate(model.blocks):
        for name in sorted(block.weights):
            records.append((f"block.{i}.{name}", block.weights[name]))
        for name, params in block.points.items():
            records.append((f"block.{i}.scale.{name}", params.scale))
            records.append((f"block.{i}.qmeta.{name}", _qmeta(params)))
    records.append(("head.weight", model.head_weight))
    records.append(("head.bias", model.head_bias))
    return records


def to_bytes(model: TinyViT) -> bytes:
    return records_to_bytes(model.config, model_records(model))


def records_to_bytes(cfg: ViTConfig, records: List[Tuple[str, np.ndarray]]) -> bytes:
    """Encode ``records`` (in the given order) under a header for ``cfg``."""
    header = HEADER.pack(MAGIC, VERSION, *(getattr(cfg, f) for f in CONFIG_FIELDS), len(records))

    table = []
    payload = []
    offset = 0
    for name, array in records:
        data = np.ascontiguousarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        entry = struct.pack("<H", len(encoded)) + encoded
        entry += struct.pack("<BB", DTYPE_F32, data.ndim)
        entry += struct.pack(f"<{data.ndim}I", *data.shape)
        entry += struct.pack("<Q", offset)
        table.append(entry)
        raw = data.tobytes()
        payload.append(raw)
        offset += len(raw)
    return b"".join([header] + table + payload)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DataFormatError("truncated EVQM record table", offset=len(self.data))
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise DataFormatError("truncated EVQM record table", offset=len(self.data))
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk


def read_records(data: bytes) -> Tuple[ViTConfig, Dict[str, np.ndarray]]:
    """Parse the header and every record of an EVQM buffer."""
    if len(data) < HEADER.size:
        raise DataFormatError("truncated EVQM header", offset=len(data))
    values = HEADER.unpack_from(data, 0)
    if values[0] != MAGIC:
        raise DataFormatError(f"bad magic {values[0]!r}, expected {MAGIC!r}", offset=0)
    if values[1] != VERSION:
        raise DataFormatError(f"unsupported EVQM version {values[1]}", offset=4)
    try:
        config = ViTConfig(**dict(zip(CONFIG_FIELDS, values[2:-1])))
    except ParameterError as e:
        raise DataFormatError(f"invalid model configuration in header: {e}", offset=5) from e
    count = values[-1]

    reader = _Reader(data)
    reader.pos = HEADER.size
    entries = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataFormatError("record name is not valid UTF-8", offset=reader.pos - name_len) from e
        dtype, ndim = reader.unpack("<BB")
        if dtype != DTYPE_F32:
            raise DataFormatError(f"record '{name}' has unknown dtype {dtype}", offset=reader.pos - 2)
        shape = reader.unpack(f"<{ndim}I")
        (offset,) = reader.unpack("<Q")
        entries.append((name, shape, offset))

    base = reader.pos
    records = {}
    end = base
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = base + offset
        if start + 4 * n > len(data):
            raise DataFormatError(f"payload of '{name}' is truncated", offset=len(data))
        records[name] = (
            np.frombuffer(data, dtype="<f4", count=n, offset=start).astype(np.float32).reshape(shape)
        )
        end = max(end, start + 4 * n)
    if end != len(data):
        raise DataFormatError(f"{len(data) - end} trailing bytes", offset=end)
    return config, records


def _check_tensors(found: Dict[str, np.ndarray], expected: Dict[str, tuple], prefix: str) -> None:
    missing = sorted(set(expected) - set(found))
    if missing:
        raise DataFormatError(f"missing record(s): {', '.join(prefix + m for m in missing)}")
    for name, shape in expected.items():
        if found[name].shape != shape:
            raise DataFormatError(
                f"record '{prefix}{name}' has shape {found[name].shape}, expected {shape}"
            )


def from_bytes(data: bytes) -> TinyViT:
    config, records = read_records(data)
    expected = block_tensor_shapes(config)
    known = {"head.weight", "head.bias"}
    for i in range(config.blocks):
        known.update(f"block.{i}.{name}" for name in expected)
        for point in point_table(config.heads):
            known.update((f"block.{i}.scale.{point}", f"block.{i}.qmeta.{point}"))
    unknown = sorted(set(records) - known)
    if unknown:
        raise DataFormatError(f"unexpected record(s): {', '.join(unknown)}")
    try:
        blocks = []
        for i in range(config.blocks):
            prefix = f"block.{i}."
            weights = {
                name[len(prefix) :]: array
                for name, array in records.items()
                if name.startswith(prefix) and not name.startswith((prefix + "scale.", prefix + "qmeta."))
            }
            _check_tensors(weights, expected, prefix)
            points = {
                point: _params_from_records(
                    records[f"{prefix}scale.{point}"], records[f"{prefix}qmeta.{point}"]
                )
                for point in point_table(config.heads)
            }
            for point, params in points.items():
                if point in weights:
                    params.check_shape(weights[point].shape)
            blocks.append(ViTBlock(config, weights, points))
        head = {"head.weight": records["head.weight"], "head.bias": records["head.bias"]}
        _check_tensors(
            head,
            {"head.weight": (config.embed_dim, config.classes), "head.bias": (config.classes,)},
            "",
        )
        return TinyViT(config, blocks, head["head.weight"], head["head.bias"])
    except KeyError as e:
        raise DataFormatError(f"missing record {e}") from e
    except ParameterError as e:
        raise DataFormatError(f"invalid model record: {e}") from e


def save(path: str, model: TinyViT) -> str:
    """Write ``model`` to ``path``; returns its SHA-256 digest."""
    data = to_bytes(model)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Model saved to {path}")
    return hashlib.sha256(data).hexdigest()


def load(path: str) -> TinyViT:
    with open(path, "rb") as f:
        data = f.read()
    model = from_bytes(data)
    logger.info(f"Model loaded from {path}")
    return model


def model_digest(model: TinyViT) -> str:
    """SHA-256 of the serialized model; equal digests mean equal state."""
    return hashlib.sha256(to_bytes(model)).hexdigest()
