"""
Temporal Reasoning Graph layer

Builds N learnable T x T adjacency matrices over the frames of a feature
sequence, convolves the features through each graph, combines the heads and
adds the result back onto the input: H = relu(X + Z).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError, ContractError, DimensionError
from core.tensor import (
    DEFAULT_DTYPE,
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    concat,
    conv2d,
    global_avg_pool,
    matmul,
    mul,
    relu,
    reshape,
    select,
    softmax_rows,
    stack,
    tanh,
    transpose,
)
from utils.helpers import RELU_GAIN, fan_in_uniform

logger = logging.getLogger(__name__)


class SimilarityKind(str, Enum):
    SUM = "sum"
    DOT = "dot"
    BILINEAR = "bilinear"


class HeadFusion(str, Enum):
    """How per-head graph outputs are combined into Z"""
    AGGREGATOR = "aggregator"
    CONCAT = "concat"
    MEAN = "mean"


class NamedParameter(NamedTuple):
    """(name, tensor, group) record used for optimisation, checkpoints and accounting"""
    name: str
    tensor: Tensor
    group: str

    @property
    def decays(self) -> bool:
        return self.group != "batchnorm"


@dataclass
class SimilarityFunction:
    """g(u, v): Sum carries V of length D, Bilinear carries a D x D matrix W1"""
    kind: SimilarityKind
    weight: Optional[Tensor] = None

    def validate(self, dim: int):
        if self.kind == SimilarityKind.DOT:
            return
        if self.weight is None:
            raise ConfigurationError(f"{self.kind.value} similarity needs a weight")
        expected = (dim,) if self.kind == SimilarityKind.SUM else (dim, dim)
        if self.weight.shape != expected:
            raise DimensionError(
                f"{self.kind.value} similarity weight has shape {self.weight.shape}, "
                f"features have length {dim}"
            )


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, name: str = "bn") -> "NormParams":
        return cls(
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            BatchNormState(channels, dtype=dtype),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)


@dataclass
class TrgLayerParams:
    sim_kernels: List[Tensor]
    similarities: List[SimilarityFunction]
    spatial_kernels: List[Tensor]
    norms: List[NormParams] = field(default_factory=list)
    sim_norms: List[NormParams] = field(default_factory=list)
    w_prime: Optional[Tensor] = None
    fuse_kernel: Optional[Tensor] = None
    fusion: HeadFusion = HeadFusion.AGGREGATOR
    scale_similarity: bool = False

    @property
    def heads(self) -> int:
        return len(self.spatial_kernels)

    @property
    def channels(self) -> int:
        return self.spatial_kernels[0].shape[0]

    @property
    def similarity_width(self) -> int:
        return self.sim_kernels[0].shape[0]

    @property
    def kind(self) -> SimilarityKind:
        return self.similarities[0].kind

    @property
    def batchnorm(self) -> bool:
        return bool(self.norms)

    def validate(self):
        n = self.heads
        if n < 1:
            raise ConfigurationError("a TRG layer needs at least one head")
        if len(self.sim_kernels) != n or len(self.similarities) != n:
            raise ConfigurationError(
                f"expected {n} similarity transforms, got {len(self.sim_kernels)} kernels "
                f"and {len(self.similarities)} similarity functions"
            )
        c = self.channels
        for k, kernel in enumerate(self.spatial_kernels):
            if kernel.shape != (c, c, 3, 3):
                raise DimensionError(f"spatial kernel {k} has shape {kernel.shape}, expected {(c, c, 3, 3)}")
        for k, kernel in enumerate(self.sim_kernels):
            if kernel.shape[1:] != (c, 1, 1):
                raise DimensionError(f"similarity kernel {k} has shape {kernel.shape}")
        if self.norms and len(self.norms) != n:
            raise ConfigurationError(f"expected {n} batch-norm sites, got {len(self.norms)}")
        if self.fusion == HeadFusion.AGGREGATOR:
            if self.w_prime is None or self.w_prime.shape not in ((1,), (n,)):
                raise ConfigurationError("aggregator weight must have shape (1,) or (heads,)")
        if self.fusion == HeadFusion.CONCAT:
            if self.fuse_kernel is None or self.fuse_kernel.shape != (c, n * c, 1, 1):
                raise ConfigurationError(f"concat fusion needs a ({c}, {n * c}, 1, 1) kernel")

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        channels: int,
        height: int,
        width: int,
        heads: int = 3,
        kind: SimilarityKind = SimilarityKind.DOT,
        similarity_width: Optional[int] = None,
        fusion: HeadFusion = HeadFusion.AGGREGATOR,
        batchnorm: bool = True,
        similarity_batchnorm: bool = False,
        scale_similarity: bool = False,
        per_head_w_prime: bool = False,
        zero_init_spatial: bool = False,
        dtype=DEFAULT_DTYPE,
    ) -> "TrgLayerParams":
        """Initialise a layer; draws per head (similarity kernel, similarity weight, spatial kernel), then fusion"""
        if heads < 1:
            raise ConfigurationError(f"heads must be >= 1, got {heads}")
        kind = SimilarityKind(kind)
        fusion = HeadFusion(fusion)
        width_c = similarity_width or math.ceil(channels / 2)
        dim = width_c * height * width

        sim_kernels, similarities, spatial = [], [], []
        for k in range(heads):
            sim_kernels.append(Tensor(
                fan_in_uniform(rng, (width_c, channels, 1, 1), channels, dtype=dtype),
                requires_grad=True, name=f"sim_kernel.{k}",
            ))
            weight = None
            if kind == SimilarityKind.SUM:
                weight = Tensor(fan_in_uniform(rng, (dim,), dim, dtype=dtype), requires_grad=True, name=f"similarity.{k}")
            elif kind == SimilarityKind.BILINEAR:
                weight = Tensor(fan_in_uniform(rng, (dim, dim), dim, dtype=dtype), requires_grad=True, name=f"similarity.{k}")
            similarities.append(SimilarityFunction(kind, weight))
            shape = (channels, channels, 3, 3)
            values = (np.zeros(shape, dtype=dtype) if zero_init_spatial
                      else fan_in_uniform(rng, shape, 9 * channels, RELU_GAIN, dtype))
            spatial.append(Tensor(values, requires_grad=True, name=f"spatial_kernel.{k}"))

        params = cls(
            sim_kernels=sim_kernels,
            similarities=similarities,
            spatial_kernels=spatial,
            norms=[NormParams.create(channels, dtype, f"bn.{k}") for k in range(heads)] if batchnorm else [],
            sim_norms=[NormParams.create(width_c, dtype, f"sim_bn.{k}") for k in range(heads)] if similarity_batchnorm else [],
            fusion=fusion,
            scale_similarity=scale_similarity,
        )
        if fusion == HeadFusion.AGGREGATOR:
            params.w_prime = Tensor(
                np.ones(heads if per_head_w_prime else 1, dtype=dtype), requires_grad=True, name="w_prime"
            )
        elif fusion == HeadFusion.CONCAT:
            params.fuse_kernel = Tensor(
                fan_in_uniform(rng, (channels, heads * channels, 1, 1), heads * channels, dtype=dtype),
                requires_grad=True, name="fuse_kernel",
            )
        params.validate()
        return params

    def named_parameters(self, prefix: str = "trg") -> List[NamedParameter]:
        out = []
        for k in range(self.heads):
            out.append(NamedParameter(f"{prefix}.sim_kernel.{k}", self.sim_kernels[k], "similarity_transform"))
            if self.similarities[k].weight is not None:
                out.append(NamedParameter(f"{prefix}.similarity.{k}", self.similarities[k].weight, "similarity_params"))
            out.append(NamedParameter(f"{prefix}.spatial_kernel.{k}", self.spatial_kernels[k], "spatial_transform"))
        for tag, norms in (("bn", self.norms), ("sim_bn", self.sim_norms)):
            for k, norm in enumerate(norms):
                out.append(NamedParameter(f"{prefix}.{tag}.{k}.gamma", norm.gamma, "batchnorm"))
                out.append(NamedParameter(f"{prefix}.{tag}.{k}.beta", norm.beta, "batchnorm"))
        if self.w_prime is not None:
            out.append(NamedParameter(f"{prefix}.w_prime", self.w_prime, "aggregator"))
        if self.fuse_kernel is not None:
            out.append(NamedParameter(f"{prefix}.fuse_kernel", self.fuse_kernel, "fusion"))
        return out

    def named_buffers(self, prefix: str = "trg") -> List[Tuple[str, BatchNormState]]:
        out = []
        for tag, norms in (("bn", self.norms), ("sim_bn", self.sim_norms)):
            out.extend((f"{prefix}.{tag}.{k}", norm.state) for k, norm in enumerate(norms))
        return out


@dataclass
class AdjacencyStack:
    """N x T x T head-indexed row-stochastic matrices"""
    values: np.ndarray

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def nodes(self) -> int:
        return self.values.shape[1]

    def is_row_stochastic(self, tol: float = 1e-6) -> bool:
        v = self.values
        return bool(np.all(v >= 0) and np.all(v <= 1) and np.allclose(v.sum(axis=-1), 1.0, atol=tol, rtol=0))

    def to_frame(self, head: int) -> pd.DataFrame:
        frames = range(self.nodes)
        return pd.DataFrame(self.values[head], index=pd.Index(frames, name="frame"), columns=list(frames))

    def export_csv(self, directory, prefix: str = "adjacency") -> List[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k in range(self.heads):
            path = directory / f"{prefix}_head{k}.csv"
            self.to_frame(k).to_csv(path, float_format="%.8f", lineterminator="\n")
            paths.append(path)
        logger.info(f"Wrote {len(paths)} adjacency matrices to {directory}")
        return paths


@dataclass
class TrgTrace:
    adjacency: AdjacencyStack
    head_weights: Optional[np.ndarray] = None

    def export_head_weights(self, directory, prefix: str = "adjacency") -> Optional[Path]:
        """Per-node aggregator weights (T x N) as "{prefix}_head_weights.csv"; None without an aggregator"""
        if self.head_weights is None:
            return None
        path = Path(directory) / f"{prefix}_head_weights.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(
            self.head_weights,
            index=pd.Index(range(self.head_weights.shape[0]), name="frame"),
            columns=[f"head{k}" for k in range(self.head_weights.shape[1])],
        )
        frame.to_csv(path, float_format="%.8f", lineterminator="\n")
        return path


# --- similarity and adjacency -----------------------------------------------

def similarity(u: Tensor, v: Tensor, fn: SimilarityFunction) -> Tensor:
    """Scalar g(u, v) for one pair of flattened feature vectors"""
    if u.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"similarity needs two vectors of equal length, got {u.shape} and {v.shape}")
    dim = u.shape[0]
    fn.validate(dim)
    row = reshape(u, (1, dim))
    col = reshape(v, (dim, 1))
    if fn.kind == SimilarityKind.DOT:
        out = matmul(row, col)
    elif fn.kind == SimilarityKind.BILINEAR:
        out = matmul(matmul(row, fn.weight), col)
    else:
        out = matmul(reshape(tanh(add(u, v)), (1, dim)), reshape(fn.weight, (dim, 1)))
    return reshape(out, ())


def similarity_matrix(features: Tensor, fn: SimilarityFunction) -> Tensor:
    """e_ij = g(f_i, f_j) for all frame pairs of a T x D matrix"""
    t, dim = features.shape
    fn.validate(dim)
    if fn.kind == SimilarityKind.DOT:
        return matmul(features, transpose(features))
    if fn.kind == SimilarityKind.BILINEAR:
        return matmul(matmul(features, fn.weight), transpose(features))
    pairs = tanh(add(reshape(features, (t, 1, dim)), reshape(features, (1, t, dim))))
    scores = matmul(reshape(pairs, (t * t, dim)), reshape(fn.weight, (dim, 1)))
    return reshape(scores, (t, t))


def build_adjacency(x: Tensor, params: TrgLayerParams, head: int, training: bool = False) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"feature sequence must be T x C x H x W, got {x.shape}")
    transformed = conv2d(x, params.sim_kernels[head], padding=0)
    if params.sim_norms:
        transformed = params.sim_norms[head](transformed, training)
    t = x.shape[0]
    features = reshape(transformed, (t, -1))
    scores = similarity_matrix(features, params.similarities[head])
    if params.scale_similarity:
        scores = mul(scores, 1.0 / math.sqrt(features.shape[1]))
    return softmax_rows(scores)


# --- graph convolution and head fusion ---------------------------------------

def graph_conv(
    x: Tensor,
    adj: Tensor,
    kernel: Tensor,
    norm: Optional[NormParams] = None,
    training: bool = False,
) -> Tensor:
    """y_i = relu(bn(sum_j a_ij conv3x3(x_j)))"""
    t = x.shape[0]
    if adj.shape != (t, t):
        raise DimensionError(f"adjacency {adj.shape} does not match {t} nodes")
    transformed = conv2d(x, kernel, padding=1)
    mixed = reshape(matmul(adj, reshape(transformed, (t, -1))), transformed.shape)
    if norm is not None:
        mixed = norm(mixed, training)
    return relu(mixed)


def _check_heads(heads: List[Tensor]):
    if not heads:
        raise ContractError("at least one head output is required")
    shapes = {h.shape for h in heads}
    if len(shapes) != 1:
        raise DimensionError(f"head outputs disagree in shape: {sorted(shapes)}")


def aggregate(heads: List[Tensor], w_prime: Tensor) -> Tuple[Tensor, Tensor]:
    """Convex per-node combination of head outputs; returns (Z, beta') with beta' of shape T x N"""
    _check_heads(heads)
    t = heads[0].shape[0]
    pooled = stack([global_avg_pool(h) for h in heads], axis=1)
    weights = softmax_rows(relu(mul(pooled, w_prime)))
    out = None
    for k, head in enumerate(heads):
        term = mul(reshape(select(weights, k, axis=1), (t, 1, 1, 1)), head)
        out = term if out is None else add(out, term)
    return out, weights


def fuse_concat(heads: List[Tensor], kernel: Tensor) -> Tensor:
    _check_heads(heads)
    return conv2d(concat(heads, axis=1), kernel, padding=0)


def fuse_mean(heads: List[Tensor]) -> Tensor:
    _check_heads(heads)
    total = heads[0]
    for head in heads[1:]:
        total = add(total, head)
    return mul(total, 1.0 / len(heads))


def trg_forward_traced(x: Tensor, params: TrgLayerParams, training: bool = False) -> Tuple[Tensor, TrgTrace]:
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise DimensionError(f"input {x.shape} does not match a TRG layer with {params.channels} channels")
    heads, adjacency = [], []
    for k in range(params.heads):
        adj = build_adjacency(x, params, k, training)
        norm = params.norms[k] if params.norms else None
        heads.append(graph_conv(x, adj, params.spatial_kernels[k], norm, training))
        adjacency.append(adj.data)

    weights = None
    if params.fusion == HeadFusion.AGGREGATOR:
        z, weights = aggregate(heads, params.w_prime)
    elif params.fusion == HeadFusion.CONCAT:
        z = fuse_concat(heads, params.fuse_kernel)
    else:
        z = fuse_mean(heads)

    trace = TrgTrace(
        AdjacencyStack(np.stack(adjacency)),
        None if weights is None else np.array(weights.data),
    )
    return relu(add(x, z)), trace


def trg_forward(x: Tensor, params: TrgLayerParams, training: bool = False) -> Tensor:
    return trg_forward_traced(x, params, training)[0]
