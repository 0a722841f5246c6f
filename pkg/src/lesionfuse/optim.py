"""Plain SGD with a step-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, StateError
from .tensor import Tensor


@dataclass
class OptimizerState:
    base_lr: float = 0.01
    step_size: int = 15
    gamma: float = 0.1
    current_epoch: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.step_size < 1:
            raise ConfigError("step_size must be a positive number of epochs")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.current_epoch < 0:
            raise ConfigError("current_epoch must be nonnegative")

    @property
    def lr(self) -> float:
        return lr_at_epoch(self, self.current_epoch)


def lr_at_epoch(state: OptimizerState, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return state.base_lr * state.gamma ** (epoch // state.step_size)


def sgd_step(params: Iterable[Tensor], state: OptimizerState,
             lr: Optional[float] = None) -> None:
    """``p <- p - lr * grad(p)`` for every parameter, then zero the grads.

    ``lr`` overrides the scheduled rate (mostly for tests).
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or '?'} has no gradient")
    step = state.lr if lr is None else lr
    if not math.isfinite(step):
        raise ConfigError("learning rate must be finite")
    for p in params:
        if step != 0:
            p.data -= p.data.dtype.type(step) * p.grad
        p.grad = np.zeros_like(p.data)
