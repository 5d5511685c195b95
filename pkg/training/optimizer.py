"""
SGD with Nesterov momentum and a step learning-rate schedule
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.exceptions import ConfigurationError, DimensionError
from core.trg_block import NamedParameter

logger = logging.getLogger(__name__)


@dataclass
class Schedule:
    initial_lr: float = 0.001
    drop_factor: float = 10.0
    drop_epoch: int = 50
    epochs: int = 100

    def validate(self) -> "Schedule":
        if self.initial_lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.initial_lr}")
        if self.drop_factor <= 0:
            raise ConfigurationError(f"drop factor must be positive, got {self.drop_factor}")
        if not 0 <= self.drop_epoch < self.epochs:
            raise ConfigurationError(f"drop epoch {self.drop_epoch} must lie in [0, {self.epochs})")
        return self


def lr_at(epoch: int, schedule: Schedule) -> float:
    if epoch < schedule.drop_epoch:
        return schedule.initial_lr
    return schedule.initial_lr / schedule.drop_factor


@dataclass
class OptimizerState:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> "OptimizerState":
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight decay must be >= 0, got {self.weight_decay}")
        return self


def sgd_step(
    params: Sequence[NamedParameter],
    state: OptimizerState,
    grads: Optional[List[np.ndarray]] = None,
):
    """
    Per parameter: g' = g + wd*p (wd = 0 for batch-norm affine terms),
    v = mu*v + g', update = g' + mu*v (Nesterov) or v, p -= lr*update.
    Gradients default to each tensor's accumulated .grad; missing ones count as zero.
    """
    if grads is not None and len(grads) != len(params):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, (name, tensor, _) in enumerate(params):
        grad = grads[i] if grads is not None else tensor.grad
        p = tensor.data.astype(np.float64)
        g = np.zeros_like(p) if grad is None else np.asarray(grad, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        decay = state.weight_decay if params[i].decays else 0.0
        g = g + decay * p
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        update = g + state.momentum * v if state.nesterov else v
        tensor.assign(p - state.lr * update)
