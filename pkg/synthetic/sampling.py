"""
Frame sampling: sparse segment sampling and dense strided windows
"""

import logging
from enum import Enum
from typing import Optional

import numpy as np

from core.exceptions import SamplingError
from core.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_STRIDE = 4


class SamplingMode(str, Enum):
    SPARSE = "sparse"
    DENSE = "dense"


def _segment(t: int, raw_frames: int, frames: int):
    """Integer indices inside [t*R/T, (t+1)*R/T)"""
    lo = -(-t * raw_frames // frames)
    hi = -(-(t + 1) * raw_frames // frames)
    return lo, hi


def sparse_indices(
    raw_frames: int,
    frames: int,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    clip: int = 0,
    num_clips: int = 1,
) -> np.ndarray:
    if not 1 <= frames <= raw_frames:
        raise SamplingError(f"sparse sampling needs 1 <= T <= T_raw, got T={frames}, T_raw={raw_frames}")
    out = np.empty(frames, dtype=np.int64)
    for t in range(frames):
        lo, hi = _segment(t, raw_frames, frames)
        if training:
            if rng is None:
                raise SamplingError("training-mode sampling needs a random generator")
            out[t] = rng.integers(lo, hi)
        elif num_clips == 1:
            out[t] = min(max((2 * t + 1) * raw_frames // (2 * frames), lo), hi - 1)
        else:
            out[t] = lo + int((clip + 0.5) * (hi - lo) / num_clips)
    return out


def dense_indices(
    raw_frames: int,
    frames: int,
    stride: int = DEFAULT_STRIDE,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    clip: int = 0,
    num_clips: int = 1,
) -> np.ndarray:
    if frames < 1 or stride < 1 or frames * stride > raw_frames:
        raise SamplingError(
            f"dense sampling needs T*stride <= T_raw, got T={frames}, stride={stride}, T_raw={raw_frames}"
        )
    span = raw_frames - frames * stride
    if training:
        if rng is None:
            raise SamplingError("training-mode sampling needs a random generator")
        start = int(rng.integers(0, span + 1))
    elif num_clips == 1:
        start = span // 2
    else:
        start = clip * span // (num_clips - 1)
    return start + stride * np.arange(frames)


def sample_indices(
    raw_frames: int,
    frames: int,
    mode: SamplingMode = SamplingMode.SPARSE,
    stride: int = DEFAULT_STRIDE,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    clip: int = 0,
    num_clips: int = 1,
) -> np.ndarray:
    if not 0 <= clip < num_clips:
        raise SamplingError(f"clip {clip} out of range for {num_clips} clips")
    if SamplingMode(mode) == SamplingMode.SPARSE:
        return sparse_indices(raw_frames, frames, training, rng, clip, num_clips)
    return dense_indices(raw_frames, frames, stride, training, rng, clip, num_clips)


def sample_frames(
    frames: np.ndarray,
    count: int,
    mode: SamplingMode = SamplingMode.SPARSE,
    stride: int = DEFAULT_STRIDE,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    clip: int = 0,
    num_clips: int = 1,
    dtype=np.float32,
) -> Tensor:
    """T x C x H x W clip taken from a T_raw x C x H x W sample"""
    indices = sample_indices(frames.shape[0], count, mode, stride, training, rng, clip, num_clips)
    return Tensor(frames[indices], dtype=dtype)
