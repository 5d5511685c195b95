"""
TRGD dataset files

Header (little-endian, 33 bytes): magic "TRGD", u32 version, u32 sample count,
u32 T_raw, C, H, W, u32 class count, u8 label mode (0 single, 1 multi).
Per sample: u64 seed, label (u32 class id or one byte per class), then the
frames as float32.
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from core.exceptions import DatasetFormatError, MagicError, TrailingDataError, TruncatedDataError, VersionError
from synthetic.grammar import SyntheticDataset, SyntheticSample

logger = logging.getLogger(__name__)

MAGIC = b"TRGD"
VERSION = 1
HEADER = struct.Struct("<4s7IB")
LABEL_MODES = {"single": 0, "multi": 1}


def _record_size(frame_values: int, num_classes: int, label_mode: str) -> int:
    label = 4 if label_mode == "single" else num_classes
    return 8 + label + 4 * frame_values


def encode_dataset(dataset: SyntheticDataset) -> bytes:
    shape = dataset.frame_shape if len(dataset) else (0, 0, 0, 0)
    parts = [HEADER.pack(MAGIC, VERSION, len(dataset), *shape, dataset.num_classes, LABEL_MODES[dataset.label_mode])]
    for sample in dataset.samples:
        parts.append(struct.pack("<Q", sample.seed))
        if dataset.label_mode == "single":
            parts.append(struct.pack("<I", int(sample.label)))
        else:
            parts.append(np.asarray(sample.label, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(sample.frames, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(payload: bytes) -> SyntheticDataset:
    if len(payload) < 4 or payload[:4] != MAGIC:
        raise MagicError(f"not a TRGD file (magic {payload[:4]!r})")
    if len(payload) < HEADER.size:
        raise TruncatedDataError(HEADER.size, len(payload), "header")
    _, version, count, t_raw, c, h, w, num_classes, mode = HEADER.unpack_from(payload)
    if version != VERSION:
        raise VersionError(f"unsupported TRGD version {version}, expected {VERSION}")
    modes = {code: name for name, code in LABEL_MODES.items()}
    if mode not in modes:
        raise DatasetFormatError(f"unknown label mode byte {mode}, expected 0 (single) or 1 (multi)")
    label_mode = modes[mode]
    frame_shape = (t_raw, c, h, w)
    frame_values = t_raw * c * h * w
    record = _record_size(frame_values, num_classes, label_mode)
    expected = HEADER.size + count * record
    if len(payload) < expected:
        raise TruncatedDataError(expected, len(payload))
    if len(payload) > expected:
        raise TrailingDataError(expected, len(payload))

    samples = []
    offset = HEADER.size
    for _ in range(count):
        (seed,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        if label_mode == "single":
            (label,) = struct.unpack_from("<I", payload, offset)
            offset += 4
        else:
            label = np.frombuffer(payload, dtype=np.uint8, count=num_classes, offset=offset).copy()
            offset += num_classes
        frames = np.frombuffer(payload, dtype="<f4", count=frame_values, offset=offset)
        frames = frames.reshape(frame_shape).astype(np.float32)
        offset += 4 * frame_values
        samples.append(SyntheticSample(frames, label, seed))
    return SyntheticDataset(samples, num_classes, label_mode)


def write_dataset(dataset: SyntheticDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(dataset))
    logger.info(f"Wrote {len(dataset)} samples to {path}")
    return path


def read_dataset(path: Union[str, Path]) -> SyntheticDataset:
    dataset = decode_dataset(Path(path).read_bytes())
    logger.info(f"Read {len(dataset)} samples ({dataset.num_classes} classes) from {path}")
    return dataset
