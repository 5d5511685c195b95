"""
TRGW model checkpoints

Layout (little-endian): magic "TRGW", u32 version, u32 config length, config
JSON, u32 record count, then per record u32 name length, name, u32 rank,
u32 extents, float32 values. Batch-norm running statistics are stored as
records named "<site>.running_mean" / "<site>.running_var".
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from ai_models.model_zoo import ModelConfig, TrgModel, build_variant
from core.exceptions import CheckpointFormatError, ConfigurationError

logger = logging.getLogger(__name__)

MAGIC = b"TRGW"
VERSION = 1


def _records(model: TrgModel) -> Dict[str, np.ndarray]:
    records = {p.name: p.tensor.data for p in model.named_parameters()}
    for name, state in model.named_buffers():
        records[f"{name}.running_mean"] = state.running_mean
        records[f"{name}.running_var"] = state.running_var
    return records


def encode_checkpoint(model: TrgModel) -> bytes:
    out = io.BytesIO()
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(config)))
    out.write(config)
    records = _records(model)
    out.write(struct.pack("<I", len(records)))
    for name, values in records.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        out.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointFormatError(
                f"truncated {what}: expected {count} bytes at offset {self.offset}, "
                f"found {len(self.payload) - self.offset}"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(payload: bytes) -> TrgModel:
    reader = _Reader(payload)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("not a TRGW checkpoint (bad magic)")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(reader.u32("config length"), "config")))
    except (ValueError, TypeError, ConfigurationError) as e:
        raise CheckpointFormatError(f"invalid checkpoint config: {e}") from e

    model = build_variant(config, np.random.default_rng(0))
    expected = _records(model)
    params = {p.name: p.tensor for p in model.named_parameters()}
    buffers = dict(model.named_buffers())

    count = reader.u32("record count")
    seen = set()
    for _ in range(count):
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        rank = reader.u32("rank")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, "shape"))
        values = np.frombuffer(reader.take(4 * int(np.prod(shape)), f"values of {name}"), dtype="<f4").reshape(shape)
        if name not in expected:
            raise CheckpointFormatError(f"unexpected record {name}")
        if shape != expected[name].shape:
            raise CheckpointFormatError(f"record {name} has shape {shape}, model expects {expected[name].shape}")
        if name in params:
            params[name].assign(values)
        else:
            site, stat = name.rsplit(".", 1)
            setattr(buffers[site], stat, values.astype(config.dtype))
        seen.add(name)
    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - reader.offset} trailing bytes after last record")
    missing = set(expected) - seen
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks records: {sorted(missing)}")
    return model


def save_checkpoint(model: TrgModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> TrgModel:
    model = decode_checkpoint(Path(path).read_bytes())
    logger.info(f"Loaded {model} from {path}")
    return model
