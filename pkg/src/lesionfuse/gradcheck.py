"""Central finite-difference gradient checking.

The numerical side only ever calls the forward function on raw arrays, so it
is independent of the tape and of every backward rule.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3,
                    max_entries: Optional[int] = None, seed: int = 0,
                    floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps tensors to a scalar tensor.  Runs in 64-bit.  With
    ``max_entries`` only a seeded random subset of each input is probed.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with precision(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        backward(fn(*tensors))
        worst = 0.0
        for k, t in enumerate(tensors):
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat_idx = np.arange(t.data.size)
            if max_entries is not None and t.data.size > max_entries:
                flat_idx = rng.choice(t.data.size, size=max_entries, replace=False)
            for idx in flat_idx:
                numeric = _central_difference(fn, arrays, k, int(idx), eps)
                err = relative_error(np.array(analytic.reshape(-1)[idx]),
                                     np.array(numeric), floor)
                worst = max(worst, float(err))
    return worst


def _central_difference(fn, arrays, k, idx, eps) -> float:
    def evaluate(delta):
        probe = [a.copy() for a in arrays]
        probe[k].reshape(-1)[idx] += delta
        with no_grad():
            return fn(*(Tensor(a) for a in probe)).item()

    return (evaluate(eps) - evaluate(-eps)) / (2 * eps)
