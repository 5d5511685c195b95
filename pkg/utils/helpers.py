"""
Helper functions for seeding, initialisation and file checksums
"""

import hashlib
import math
from pathlib import Path
from typing import Tuple, Union

import numpy as np

# Named random sub-streams; every stream is derived from the run's root seed
STREAMS = {
    "data": 0,
    "init": 1,
    "sampling": 2,
    "projection": 3,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for (root seed, stream name, keys...)"""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream: {name}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, keys)]))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """64-bit seed for a sub-stream, stored alongside generated samples"""
    state = np.random.SeedSequence([int(seed), STREAMS[name], *map(int, keys)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def fan_in_uniform(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    fan_in: int,
    gain: float = 1.0,
    dtype=np.float32,
) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# He-uniform gain for relu layers: bound = sqrt(6 / fan_in)
RELU_GAIN = math.sqrt(6.0)


def file_checksum(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
