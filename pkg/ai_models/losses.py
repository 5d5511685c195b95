"""
Classification losses for single- and multi-label training
"""

import logging

import numpy as np

from core.exceptions import DimensionError, LabelError
from core.tensor import Node, Tensor, apply_op, register_backward, stable_sigmoid

logger = logging.getLogger(__name__)


def _logit_vector(logits: Tensor) -> np.ndarray:
    if logits.ndim != 1:
        raise DimensionError(f"logits must be a vector, got shape {logits.shape}")
    return logits.data


def cross_entropy_loss(logits: Tensor, target: int) -> Tensor:
    """-s_g + log sum_j exp(s_j)"""
    s = _logit_vector(logits)
    if not 0 <= int(target) < s.shape[0]:
        raise LabelError(f"class index {target} out of range for {s.shape[0]} classes")
    top = s.max()
    shifted = np.exp(s - top)
    total = shifted.sum()
    loss = np.log(total) - (s[int(target)] - top)
    return apply_op("cross_entropy", (logits,), loss, probs=shifted / total, target=int(target))


@register_backward("cross_entropy")
def _cross_entropy_backward(node: Node, grad: np.ndarray):
    d = np.array(node.saved["probs"], copy=True)
    d[node.saved["target"]] -= 1.0
    return (grad * d,)


def binary_sigmoid_loss(logits: Tensor, labels) -> Tensor:
    """sum_j max(s,0) - s*y + log(1 + exp(-|s|))"""
    s = _logit_vector(logits)
    y = np.asarray(labels)
    if y.shape != s.shape:
        raise DimensionError(f"labels {y.shape} do not match logits {s.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError(f"multi-label targets must be 0/1, got {np.unique(y).tolist()}")
    y = y.astype(s.dtype)
    loss = (np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))).sum()
    return apply_op("binary_sigmoid", (logits,), loss, labels=y)


@register_backward("binary_sigmoid")
def _binary_sigmoid_backward(node: Node, grad: np.ndarray):
    s = node.inputs[0].data
    return (grad * (stable_sigmoid(s) - node.saved["labels"]),)
