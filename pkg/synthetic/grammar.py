"""
Event grammar and order-sensitive synthetic dataset generation

Each class is an ordered string of events ("A,B"); each event is a fixed
C x H x W prototype pattern. A sample renders its class's events over T_raw
frames with additive Gaussian noise. Classes that are permutations of each
other have identical frame multisets, so only an order-aware model can tell
them apart.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import GrammarError, LabelError
from utils.helpers import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_CLASS_STRINGS = ["A,B", "B,A", "A,C", "C,A", "B", "C"]

# stripe direction (dy, dx) per prototype, cycled
_STRIPES = [(1, 0), (0, 1), (1, 1), (1, -1)]


def event_index(name: str) -> int:
    name = name.strip().upper()
    if len(name) != 1 or not name.isalpha():
        raise GrammarError(f"event names are single letters, got {name!r}")
    return ord(name) - ord("A")


def prototype_pattern(k: int, channels: int, height: int, width: int) -> np.ndarray:
    """Channel colour code from the bits of k+1 plus an oriented stripe of amplitude 0.5"""
    code = np.array([1.0 if (k + 1) >> c & 1 else -1.0 for c in range(channels)])
    dy, dx = _STRIPES[k % len(_STRIPES)]
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    stripe = np.where(((yy * dy + xx * dx) // 2) % 2 == 0, 0.5, -0.5)
    return (code[:, None, None] + stripe[None]).astype(np.float32)


@dataclass
class EventGrammar:
    prototypes: int = 3
    class_strings: List[str] = field(default_factory=lambda: list(DEFAULT_CLASS_STRINGS))
    in_channels: int = 3
    height: int = 16
    width: int = 16
    noise: float = 0.25
    frames_per_event: int = 8
    raw_frames: int = 16
    label_mode: str = "single"

    @property
    def num_classes(self) -> int:
        return len(self.class_strings)

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return self.in_channels, self.height, self.width

    def events(self, class_id: int) -> Tuple[int, ...]:
        return tuple(event_index(e) for e in self.class_strings[class_id].split(","))

    def prototype_bank(self) -> np.ndarray:
        return np.stack([prototype_pattern(k, *self.frame_shape) for k in range(self.prototypes)])

    def permutation_pairs(self) -> List[Tuple[int, int]]:
        pairs = []
        for i, j in combinations(range(self.num_classes), 2):
            a, b = self.events(i), self.events(j)
            if a != b and sorted(a) == sorted(b):
                pairs.append((i, j))
        return pairs

    def order_blind_ceiling(self) -> float:
        """Best accuracy of any classifier that only sees the frame multiset: (K - P/2) / K"""
        in_pairs = {c for pair in self.permutation_pairs() for c in pair}
        return (self.num_classes - len(in_pairs) / 2) / self.num_classes

    def validate(self) -> "EventGrammar":
        if self.prototypes < 1 or self.num_classes < 1:
            raise GrammarError("a grammar needs at least one prototype and one class")
        if min(self.in_channels, self.height, self.width, self.frames_per_event, self.raw_frames) < 1:
            raise GrammarError("frame extents, frames_per_event and raw_frames must be positive")
        if self.noise < 0:
            raise GrammarError(f"noise must be >= 0, got {self.noise}")
        if self.label_mode not in ("single", "multi"):
            raise GrammarError(f"label_mode must be single or multi, got {self.label_mode}")
        strings = [tuple(self.events(c)) for c in range(self.num_classes)]
        if len(set(strings)) != len(strings):
            raise GrammarError("class event strings must be distinct")
        max_events = self.raw_frames // self.frames_per_event
        for c, events in enumerate(strings):
            if any(e >= self.prototypes for e in events):
                raise GrammarError(f"class {c} ({self.class_strings[c]}) uses an undefined event")
            if len(events) > max_events:
                raise GrammarError(
                    f"class {c} ({self.class_strings[c]}) has {len(events)} events but only "
                    f"{max_events} fit in {self.raw_frames} frames at {self.frames_per_event} frames per event"
                )
        if not self.permutation_pairs():
            raise GrammarError("grammar needs at least one pair of classes that are permutations of each other")
        bank = self.prototype_bank().reshape(self.prototypes, -1)
        if self.prototypes > 1:
            gaps = [np.linalg.norm(bank[i] - bank[j]) for i, j in combinations(range(self.prototypes), 2)]
            bound = 4 * self.noise * math.sqrt(bank.shape[1])
            if min(gaps) <= bound:
                raise GrammarError(
                    f"prototypes not distinguishable: min pairwise distance {min(gaps):.3f} <= {bound:.3f}"
                )
        return self

    def frame_events(self, class_id: int) -> np.ndarray:
        """Event shown at each of the T_raw frames"""
        events = self.events(class_id)
        t = np.arange(self.raw_frames)
        return np.array(events)[t * len(events) // self.raw_frames]

    def label_for(self, class_id: int) -> Union[int, np.ndarray]:
        if self.label_mode == "single":
            return class_id
        own = self.events(class_id)
        labels = np.zeros(self.num_classes, dtype=np.uint8)
        for c in range(self.num_classes):
            run = self.events(c)
            labels[c] = any(own[i:i + len(run)] == run for i in range(len(own) - len(run) + 1))
        return labels

    def class_from_label(self, label: Union[int, np.ndarray]) -> int:
        """Own class of a label; a multi-label vector's own class has the longest positive event string"""
        if np.ndim(label) == 0:
            return int(label)
        label = np.asarray(label)
        positives = np.flatnonzero(label)
        if label.shape != (self.num_classes,) or positives.size == 0:
            raise LabelError(f"label {label.tolist()} has no positive class among {self.num_classes}")
        # every positive is a sub-run of the own class, and distinct classes differ
        return int(max(positives, key=lambda c: len(self.events(c))))


@dataclass
class SyntheticSample:
    frames: np.ndarray
    label: Union[int, np.ndarray]
    seed: int

    @property
    def class_id(self) -> int:
        if np.ndim(self.label) != 0:
            raise LabelError("a multi-label sample's class depends on its grammar; use EventGrammar.class_from_label")
        return int(self.label)


@dataclass
class SyntheticDataset:
    samples: List[SyntheticSample]
    num_classes: int
    label_mode: str = "single"
    class_ids: Optional[List[int]] = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> SyntheticSample:
        return self.samples[index]

    @property
    def frame_shape(self) -> Tuple[int, ...]:
        return self.samples[0].frames.shape if self.samples else (0,)

    def class_of(self, index: int) -> int:
        if self.class_ids is not None:
            return self.class_ids[index]
        return self.samples[index].class_id

    def resolve_classes(self, grammar: "EventGrammar") -> "SyntheticDataset":
        """Recover per-sample classes from the labels, e.g. after reading a file"""
        if grammar.num_classes != self.num_classes:
            raise LabelError(f"grammar has {grammar.num_classes} classes, dataset {self.num_classes}")
        self.class_ids = [grammar.class_from_label(s.label) for s in self.samples]
        return self

    def class_counts(self) -> List[int]:
        counts = [0] * self.num_classes
        for i in range(len(self)):
            counts[self.class_of(i)] += 1
        return counts

    def subset(self, indices: Sequence[int]) -> "SyntheticDataset":
        ids = None if self.class_ids is None else [self.class_ids[i] for i in indices]
        return SyntheticDataset([self.samples[i] for i in indices], self.num_classes, self.label_mode, ids)

    def split(self, train_count: int) -> Tuple["SyntheticDataset", "SyntheticDataset"]:
        """First train_count samples train, remainder held out"""
        return self.subset(range(train_count)), self.subset(range(train_count, len(self)))

    def equals(self, other: "SyntheticDataset") -> bool:
        if (len(self), self.num_classes, self.label_mode) != (len(other), other.num_classes, other.label_mode):
            return False
        return all(
            a.seed == b.seed
            and np.array_equal(a.label, b.label)
            and a.frames.dtype == b.frames.dtype
            and np.array_equal(a.frames, b.frames)
            for a, b in zip(self.samples, other.samples)
        )


def render_sample(grammar: EventGrammar, index: int, root_seed: int) -> SyntheticSample:
    """Sample `index` depends only on (grammar, index, root seed)"""
    class_id = index % grammar.num_classes
    seed = derive_seed(root_seed, "data", index)
    rng = np.random.default_rng(seed)
    frames = grammar.prototype_bank()[grammar.frame_events(class_id)]
    if grammar.noise > 0:
        frames = frames + grammar.noise * rng.standard_normal(frames.shape)
    return SyntheticSample(frames.astype(np.float32), grammar.label_for(class_id), seed)


def _render_chunk(args) -> List[SyntheticSample]:
    grammar, indices, root_seed = args
    return [render_sample(grammar, i, root_seed) for i in indices]


def generate(grammar: EventGrammar, count: int, seed: int, workers: int = 1) -> SyntheticDataset:
    """Balanced dataset (class = index mod K); identical for any worker count"""
    grammar.validate()
    if count < 0:
        raise GrammarError(f"sample count must be >= 0, got {count}")
    logger.info(f"Generating {count} samples over {grammar.num_classes} classes (workers={workers})")
    if workers > 1 and count > 1:
        chunks = [list(c) for c in np.array_split(np.arange(count), workers) if len(c)]
        with ProcessPoolExecutor(max_workers=workers) as executor:
            parts = executor.map(_render_chunk, [(grammar, c, seed) for c in chunks])
            samples = [s for part in parts for s in part]
    else:
        samples = [render_sample(grammar, i, seed) for i in range(count)]
    class_ids = [i % grammar.num_classes for i in range(count)]
    return SyntheticDataset(samples, grammar.num_classes, grammar.label_mode, class_ids)


def decode_events(frames: np.ndarray, bank: np.ndarray) -> Tuple[int, ...]:
    """Nearest-prototype label per frame, collapsed into the event string"""
    flat = frames.reshape(frames.shape[0], -1)
    distances = np.linalg.norm(flat[:, None, :] - bank.reshape(bank.shape[0], -1)[None], axis=-1)
    per_frame = distances.argmin(axis=1)
    events = [int(per_frame[0])]
    for e in per_frame[1:]:
        if e != events[-1]:
            events.append(int(e))
    return tuple(events)


def oracle_predict(grammar: EventGrammar, frames: np.ndarray) -> int:
    """Class whose event string matches the decoded sequence; -1 when none does"""
    decoded = decode_events(frames, grammar.prototype_bank())
    for c in range(grammar.num_classes):
        if grammar.events(c) == decoded:
            return c
    return -1


def multiset_oracle_predict(grammar: EventGrammar, frames: np.ndarray) -> int:
    """Order-blind oracle: first class whose event multiset matches the decoded frames"""
    decoded = sorted(decode_events(frames, grammar.prototype_bank()))
    for c in range(grammar.num_classes):
        if sorted(grammar.events(c)) == decoded:
            return c
    return -1
