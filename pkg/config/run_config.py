"""
Run configuration: one flat JSON object, every key optional
"""

import json
import logging
import numbers
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Union, get_args, get_origin, get_type_hints

from ai_models.model_zoo import ModelConfig
from config.settings import DATASET_FILE
from core.exceptions import RunConfigError
from synthetic.grammar import DEFAULT_CLASS_STRINGS, EventGrammar
from synthetic.sampling import SamplingMode
from training.optimizer import OptimizerState, Schedule

logger = logging.getLogger(__name__)


def _matches(value, annotation) -> bool:
    origin = get_origin(annotation)
    if origin is Union:
        return any(_matches(value, arg) for arg in get_args(annotation))
    if origin is list:
        return isinstance(value, list) and all(_matches(v, get_args(annotation)[0]) for v in value)
    if annotation is type(None):
        return value is None
    # bool is an int subclass; only bool fields take true/false
    if isinstance(value, bool) or annotation is bool:
        return isinstance(value, bool) and annotation is bool
    if annotation is float:
        return isinstance(value, numbers.Real)
    if annotation is int:
        return isinstance(value, numbers.Integral)
    return isinstance(value, annotation)


def _type_name(annotation) -> str:
    origin = get_origin(annotation)
    if origin is Union:
        return " or ".join(_type_name(arg) for arg in get_args(annotation))
    if origin is list:
        return f"list of {_type_name(get_args(annotation)[0])}"
    return "null" if annotation is type(None) else annotation.__name__


@dataclass
class RunConfig:
    seed: int = 7
    # model
    frames: int = 8
    in_channels: int = 3
    height: int = 16
    width: int = 16
    channels: int = 16
    heads: int = 3
    trg_layers: int = 1
    trg_placement: str = "top"
    similarity: str = "dot"
    similarity_width: Optional[int] = None
    variant: str = "full"
    label_mode: str = "single"
    batchnorm: bool = True
    similarity_batchnorm: bool = False
    scale_similarity: bool = False
    w_prime_mode: str = "shared"
    zero_init_spatial: bool = False
    # grammar
    prototypes: int = 3
    class_strings: List[str] = field(default_factory=lambda: list(DEFAULT_CLASS_STRINGS))
    raw_frames: int = 16
    frames_per_event: int = 8
    noise: float = 0.25
    train_count: int = 1200
    val_count: int = 300
    # sampling
    sampling: str = "sparse"
    stride: int = 4
    num_test_clips: int = 2
    # schedule and optimizer
    epochs: int = 30
    drop_epoch: int = 15
    drop_factor: float = 10.0
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    batch_size: int = 8
    # run
    workers: int = 1
    out_dir: str = "runs"
    heads_sweep: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 6, 8])
    dataset: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise RunConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
        cls.check_types(data)
        return cls(**data)

    @classmethod
    def check_types(cls, data: Dict):
        """Every value must match its field annotation; "false" is not a bool, "30" is not an int"""
        hints = get_type_hints(cls)
        for name, value in data.items():
            if not _matches(value, hints[name]):
                raise RunConfigError(
                    f"config key {name} must be {_type_name(hints[name])}, got {type(value).__name__} {value!r}"
                )

    @classmethod
    def load(cls, path: Union[str, Path], defaults: Optional[Dict] = None) -> "RunConfig":
        """Parse a config file; keys it leaves out fall back to `defaults`, then to field defaults"""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise RunConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise RunConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise RunConfigError(f"{path}: run config must be a JSON object")
        return cls.from_dict({**(defaults or {}), **data})

    def to_dict(self) -> Dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def override(self, **values) -> "RunConfig":
        """Copy with the given keys replaced; None values are ignored"""
        data = self.to_dict()
        data.update({k: v for k, v in values.items() if v is not None})
        return RunConfig.from_dict(data)

    # --- derived views ---------------------------------------------------------

    def model_config(self, dtype: str = "float32") -> ModelConfig:
        return ModelConfig(
            frames=self.frames,
            in_channels=self.in_channels,
            height=self.height,
            width=self.width,
            channels=self.channels,
            heads=self.heads,
            trg_layers=self.trg_layers,
            trg_placement=self.trg_placement,
            similarity=self.similarity,
            similarity_width=self.similarity_width,
            variant=self.variant,
            num_classes=len(self.class_strings),
            label_mode=self.label_mode,
            batchnorm=self.batchnorm,
            similarity_batchnorm=self.similarity_batchnorm,
            scale_similarity=self.scale_similarity,
            w_prime_mode=self.w_prime_mode,
            zero_init_spatial=self.zero_init_spatial,
            dtype=dtype,
        )

    def grammar(self) -> EventGrammar:
        return EventGrammar(
            prototypes=self.prototypes,
            class_strings=list(self.class_strings),
            in_channels=self.in_channels,
            height=self.height,
            width=self.width,
            noise=self.noise,
            frames_per_event=self.frames_per_event,
            raw_frames=self.raw_frames,
            label_mode=self.label_mode,
        )

    def schedule(self) -> Schedule:
        return Schedule(self.learning_rate, self.drop_factor, self.drop_epoch, self.epochs)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.momentum, self.weight_decay, self.nesterov)

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out_dir) / DATASET_FILE

    def validate(self) -> "RunConfig":
        """Check every cross-module precondition before any work starts"""
        self.check_types(self.to_dict())
        self.model_config().validate()
        self.grammar().validate()
        self.schedule().validate()
        self.optimizer_state().validate()
        if self.sampling not in {m.value for m in SamplingMode}:
            raise RunConfigError(f"sampling must be sparse or dense, got {self.sampling}")

        if self.seed < 0 or self.seed >= 2 ** 64:
            raise RunConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.sampling == "sparse" and self.frames > self.raw_frames:
            raise RunConfigError(f"frames ({self.frames}) exceed raw_frames ({self.raw_frames})")
        if self.sampling == "dense" and self.frames * self.stride > self.raw_frames:
            raise RunConfigError(
                f"dense window frames*stride = {self.frames * self.stride} exceeds raw_frames ({self.raw_frames})"
            )
        for name in ("batch_size", "workers", "num_test_clips", "train_count", "val_count", "stride"):
            if getattr(self, name) < 1:
                raise RunConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.heads_sweep or any(n < 1 for n in self.heads_sweep):
            raise RunConfigError(f"heads_sweep must list positive head counts, got {self.heads_sweep}")
        logger.debug("Run config validated")
        return self
