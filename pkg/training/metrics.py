"""
Evaluation metrics, metric logs and parameter accounting
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.exceptions import MetricError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "loss", "top1", "top5", "map"]


def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties keep ascending index"""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def topk_precision(ranked: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> float:
    if len(ranked) == 0:
        raise MetricError("top-k precision of an empty test set is undefined")
    if len(ranked) != len(truths):
        raise MetricError(f"{len(ranked)} rankings for {len(truths)} ground-truth labels")
    hits = 0
    for labels, truth in zip(ranked, truths):
        if len(labels) < k:
            raise MetricError(f"ranking of length {len(labels)} is shorter than k={k}")
        hits += int(truth) in list(labels[:k])
    return hits / len(ranked)


def average_precision(scores: np.ndarray, relevant: np.ndarray) -> float:
    """(1/N_pos) * sum_k P(k) * rel(k) over the descending-score ranking"""
    order = np.argsort(-np.asarray(scores), kind="stable")
    rel = np.asarray(relevant)[order].astype(np.float64)
    positives = rel.sum()
    if positives == 0:
        raise MetricError("average precision needs at least one positive")
    precision = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float((precision * rel).sum() / positives)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AP over classes that have at least one positive"""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal-shaped matrices")
    per_class = [
        average_precision(scores[:, c], labels[:, c])
        for c in range(scores.shape[1])
        if labels[:, c].any()
    ]
    if not per_class:
        raise MetricError("mAP is undefined: no class has a positive sample")
    return float(np.mean(per_class))


@dataclass
class MetricsReport:
    epoch: int
    split: str
    loss: float
    top1: float
    top5: float
    map: Optional[float] = None
    wall_time: float = 0.0

    def describe(self) -> str:
        line = f"epoch {self.epoch} {self.split}: loss={self.loss:.4f} top1={self.top1:.4f} top5={self.top5:.4f}"
        if self.map is not None:
            line += f" mAP={self.map:.4f}"
        return f"{line} ({self.wall_time:.1f}s)"


@dataclass
class MetricsLog:
    reports: List[MetricsReport] = field(default_factory=list)

    def append(self, report: MetricsReport):
        self.reports.append(report)

    def to_frame(self) -> pd.DataFrame:
        rows = [{c: getattr(r, c) for c in METRIC_COLUMNS} for r in self.reports]
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(
            path, index=False, float_format="%.6f", na_rep="", lineterminator="\n", encoding="utf-8"
        )
        return path

    def best(self, split: str = "val") -> Optional[MetricsReport]:
        candidates = [r for r in self.reports if r.split == split]
        return max(candidates, key=lambda r: r.top1) if candidates else None

    def last(self, split: str = "val") -> Optional[MetricsReport]:
        candidates = [r for r in self.reports if r.split == split]
        return candidates[-1] if candidates else None


# --- parameter accounting -------------------------------------------------------

def trg_formula(layers: Sequence[Tuple[int, int]]) -> int:
    """sum over layers of N*C^2 + 9*N*C^2 + N^2, for (N, C) per layer"""
    return sum(n * c * c + 9 * n * c * c + n * n for n, c in layers)


@dataclass
class ParamReport:
    total: int
    trg_only: int
    formula: int
    # enumerated similarity and spatial kernels plus the closed form's N^2 aggregator term;
    # the model's aggregator holds W' instead of an N x N matrix
    formula_accounted: int
    deltas: Dict[str, int]

    def describe(self) -> List[str]:
        lines = [
            f"total parameters:        {self.total}",
            f"TRG parameters:          {self.trg_only}",
            f"closed-form TRG count:   {self.formula}",
            f"enumerated kernels + N^2 from the closed form: {self.formula_accounted}",
        ]
        lines += [f"  delta {name:<20} {value:+d}" for name, value in self.deltas.items() if value]
        return lines


def param_count(model) -> ParamReport:
    """Enumerate trainable scalars and compare the TRG part against the closed form"""
    total = sum(p.tensor.size for p in model.named_parameters())
    trg_only = sum(p.tensor.size for p in model.trg_parameters())

    formula = trg_formula([(layer.heads, layer.channels) for layer in model.layers])
    accounted = 0
    deltas = {"similarity_width": 0, "batchnorm": 0, "similarity_params": 0, "aggregator": 0, "fusion": 0}
    for layer in model.layers:
        n, c = layer.heads, layer.channels
        sim = sum(k.size for k in layer.sim_kernels)
        spatial = sum(k.size for k in layer.spatial_kernels)
        accounted += sim + spatial + n * n
        deltas["similarity_width"] += sim - n * c * c
        for p in layer.named_parameters():
            if p.group in deltas:
                deltas[p.group] += p.tensor.size
        deltas["aggregator"] -= n * n
    report = ParamReport(total, trg_only, formula, accounted, deltas)
    if formula + sum(deltas.values()) != trg_only:
        raise MetricError("parameter accounting does not balance")
    return report
