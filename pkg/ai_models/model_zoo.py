"""
Model assembly: backbone stub, TRG stack, ordered classifier head and ablation variants
"""

import logging
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.exceptions import ConfigurationError, DimensionError
from core.tensor import (
    BatchNormState,
    Tensor,
    add,
    avg_pool2d,
    conv2d,
    matmul,
    mean,
    relu,
    reshape,
)
from core.trg_block import (
    HeadFusion,
    NamedParameter,
    SimilarityKind,
    TrgLayerParams,
    TrgTrace,
    trg_forward_traced,
)
from utils.helpers import RELU_GAIN, fan_in_uniform

logger = logging.getLogger(__name__)

BACKBONE_STAGES = 2


class TemporalVariant(str, Enum):
    FULL = "full"
    AVGPOOL = "avgpool"
    CONCAT = "concat"
    ELEMAVG = "elemavg"


class LabelMode(str, Enum):
    SINGLE = "single"
    MULTI = "multi"


VARIANT_FUSION = {
    TemporalVariant.FULL: HeadFusion.AGGREGATOR,
    TemporalVariant.CONCAT: HeadFusion.CONCAT,
    TemporalVariant.ELEMAVG: HeadFusion.MEAN,
}


@dataclass
class ModelConfig:
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
    num_classes: int = 6
    label_mode: str = "single"
    batchnorm: bool = True
    similarity_batchnorm: bool = False
    scale_similarity: bool = False
    w_prime_mode: str = "shared"
    zero_init_spatial: bool = False
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        for name in ("frames", "in_channels", "height", "width", "channels", "heads", "trg_layers", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.height % 4 or self.width % 4:
            raise ConfigurationError(f"frame size {self.height}x{self.width} must be divisible by 4")
        if self.similarity_width is not None and self.similarity_width < 1:
            raise ConfigurationError(f"similarity_width must be positive, got {self.similarity_width}")
        try:
            TemporalVariant(self.variant)
        except ValueError:
            raise ConfigurationError(f"unknown variant: {self.variant}") from None
        try:
            SimilarityKind(self.similarity)
            LabelMode(self.label_mode)
        except ValueError as e:
            raise ConfigurationError(str(e)) from None
        if self.trg_placement not in ("top", "bottom"):
            raise ConfigurationError(f"trg_placement must be top or bottom, got {self.trg_placement}")
        if self.w_prime_mode not in ("shared", "per_head"):
            raise ConfigurationError(f"w_prime_mode must be shared or per_head, got {self.w_prime_mode}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        return self

    @property
    def trg_resolution(self) -> Tuple[int, int]:
        factor = 4 if self.trg_placement == "top" else 2
        return self.height // factor, self.width // factor

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


# --- building blocks ------------------------------------------------------------

def backbone_stage(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 conv + relu + 2x average pooling, every frame independently"""
    return avg_pool2d(relu(conv2d(x, kernel, padding=1)), 2)


def backbone_stub(frames: Tensor, kernels: List[Tensor]) -> Tensor:
    if frames.ndim != 4 or frames.shape[1] != kernels[0].shape[1]:
        raise DimensionError(f"frames {frames.shape} do not match backbone input channels {kernels[0].shape[1]}")
    x = frames
    for kernel in kernels:
        x = backbone_stage(x, kernel)
    return x


def classify(h: Tensor, weight: Tensor, bias: Tensor, variant: TemporalVariant) -> Tensor:
    """Per-frame spatial mean, then ordered T*C concatenation (or mean over T for avgpool) into one affine layer"""
    t, c = h.shape[:2]
    pooled = mean(h, axis=(2, 3))
    if variant == TemporalVariant.AVGPOOL:
        features = reshape(mean(pooled, axis=0), (1, c))
    else:
        features = reshape(pooled, (1, t * c))
    if features.shape[1] != weight.shape[0]:
        raise DimensionError(f"classifier expects {weight.shape[0]} features, got {features.shape[1]}")
    return add(reshape(matmul(features, weight), (weight.shape[1],)), bias)


# --- model ----------------------------------------------------------------------

class TrgModel:
    """Backbone stub -> TRG layers -> classifier for one clip of T frames"""

    def __init__(
        self,
        config: ModelConfig,
        backbone: List[Tensor],
        layers: List[TrgLayerParams],
        classifier_weight: Tensor,
        classifier_bias: Tensor,
    ):
        self.config = config
        self.variant = TemporalVariant(config.variant)
        self.backbone = backbone
        self.layers = layers
        self.classifier_weight = classifier_weight
        self.classifier_bias = classifier_bias

    def _run_layers(self, x: Tensor, training: bool, traces: List[TrgTrace]) -> Tensor:
        for layer in self.layers:
            x, trace = trg_forward_traced(x, layer, training)
            traces.append(trace)
        return x

    def features_traced(self, frames: Tensor, training: bool = False) -> Tuple[Tensor, List[TrgTrace]]:
        """Feature sequence entering the classifier, plus one trace per TRG layer"""
        traces: List[TrgTrace] = []
        if self.config.trg_placement == "bottom":
            x = backbone_stub(frames, self.backbone[:1])
            x = self._run_layers(x, training, traces)
            x = backbone_stub(x, self.backbone[1:])
        else:
            x = backbone_stub(frames, self.backbone)
            x = self._run_layers(x, training, traces)
        return x, traces

    def features(self, frames: Tensor, training: bool = False) -> Tensor:
        return self.features_traced(frames, training)[0]

    def logits(self, frames: Tensor, training: bool = False) -> Tensor:
        return classify(self.features(frames, training), self.classifier_weight, self.classifier_bias, self.variant)

    def embedding(self, frames: Tensor) -> np.ndarray:
        """Classifier input vector in eval mode"""
        h = self.features(frames, training=False)
        pooled = h.data.mean(axis=(2, 3))
        if self.variant == TemporalVariant.AVGPOOL:
            return pooled.mean(axis=0)
        return pooled.reshape(-1)

    def named_parameters(self) -> List[NamedParameter]:
        params = [
            NamedParameter(f"backbone.stage{i}", kernel, "backbone")
            for i, kernel in enumerate(self.backbone)
        ]
        for i, layer in enumerate(self.layers):
            params.extend(layer.named_parameters(f"trg.{i}"))
        params.append(NamedParameter("classifier.weight", self.classifier_weight, "classifier"))
        params.append(NamedParameter("classifier.bias", self.classifier_bias, "classifier"))
        return params

    def trg_parameters(self) -> List[NamedParameter]:
        return [p for p in self.named_parameters() if p.name.startswith("trg.")]

    def named_buffers(self) -> List[Tuple[str, BatchNormState]]:
        buffers = []
        for i, layer in enumerate(self.layers):
            buffers.extend(layer.named_buffers(f"trg.{i}"))
        return buffers

    def zero_grad(self):
        for p in self.named_parameters():
            p.tensor.zero_grad()

    def __repr__(self) -> str:
        return (f"TrgModel(variant={self.variant.value}, layers={len(self.layers)}, "
                f"heads={self.config.heads}, params={sum(p.tensor.size for p in self.named_parameters())})")


def build_variant(config: ModelConfig, rng: np.random.Generator) -> TrgModel:
    """Initialise a model; draw order is backbone, TRG layers, classifier"""
    config.validate()
    variant = TemporalVariant(config.variant)
    dtype = np.dtype(config.dtype)
    c = config.channels

    backbone = []
    in_c = config.in_channels
    for i in range(BACKBONE_STAGES):
        backbone.append(Tensor(
            fan_in_uniform(rng, (c, in_c, 3, 3), 9 * in_c, RELU_GAIN, dtype),
            requires_grad=True, name=f"backbone.stage{i}",
        ))
        in_c = c

    layers = []
    if variant != TemporalVariant.AVGPOOL:
        h, w = config.trg_resolution
        for _ in range(config.trg_layers):
            layers.append(TrgLayerParams.create(
                rng, c, h, w,
                heads=config.heads,
                kind=SimilarityKind(config.similarity),
                similarity_width=config.similarity_width,
                fusion=VARIANT_FUSION[variant],
                batchnorm=config.batchnorm,
                similarity_batchnorm=config.similarity_batchnorm,
                scale_similarity=config.scale_similarity,
                per_head_w_prime=config.w_prime_mode == "per_head",
                zero_init_spatial=config.zero_init_spatial,
                dtype=dtype,
            ))

    width = c if variant == TemporalVariant.AVGPOOL else config.frames * c
    weight = Tensor(
        fan_in_uniform(rng, (width, config.num_classes), width, dtype=dtype),
        requires_grad=True, name="classifier.weight",
    )
    bias = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True, name="classifier.bias")

    model = TrgModel(config, backbone, layers, weight, bias)
    logger.debug(f"Built {model}")
    return model
