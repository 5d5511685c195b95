"""
Central finite-difference gradient checking
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from core.tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(1e-8, |a| + |n|), elementwise"""
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    base = np.array(tensor.data, copy=True)
    grad = np.zeros_like(base)
    shifted = base.copy()
    try:
        for idx in np.ndindex(base.shape):
            shifted[idx] = base[idx] + h
            tensor.assign(shifted)
            plus = fn().item()
            shifted[idx] = base[idx] - h
            tensor.assign(shifted)
            minus = fn().item()
            shifted[idx] = base[idx]
            grad[idx] = (plus - minus) / (2 * h)
    finally:
        tensor.assign(base)
    return grad


def analytic_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> List[np.ndarray]:
    for tensor in tensors:
        tensor.zero_grad()
    with Tape():
        loss = fn()
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


@dataclass
class GroupReport:
    group: str
    max_error: float
    coordinates: int
    passed: bool
    detail: str = ""

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.group:<24} max_rel_err={self.max_error:.3e} ({self.coordinates} coords)"
        return f"{line} {self.detail}" if self.detail else line


def check_gradients(
    fn: Callable[[], Tensor],
    groups: Dict[str, List[Tensor]],
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> List[GroupReport]:
    """Compare analytic and numeric gradients for every tensor, reported per named group"""
    ordered = [t for tensors in groups.values() for t in tensors]
    analytic = dict(zip(map(id, ordered), analytic_gradients(fn, ordered)))

    reports = []
    for group, tensors in groups.items():
        worst = 0.0
        coords = 0
        detail = ""
        for tensor in tensors:
            grad = analytic[id(tensor)]
            if not np.all(np.isfinite(grad)):
                worst = float("inf")
                detail = f"non-finite gradient in {tensor.name}"
                break
            numeric = numerical_gradient(fn, tensor, h)
            err = relative_error(grad.astype(np.float64), numeric.astype(np.float64))
            coords += err.size
            if err.size and float(err.max()) > worst:
                worst = float(err.max())
                detail = f"worst in {tensor.name}"
        report = GroupReport(group, worst, coords, worst < tolerance, detail)
        logger.debug(report.describe())
        reports.append(report)
    return reports
