"""Adam optimizer and the exponential learning-rate schedule."""

from dataclasses import dataclass, field
from typing import Dict, Mapping, MutableMapping, Tuple

import numpy as np

from ..exceptions import ShapeMismatchError, ValidationError

LR_DECAY_PER_EPOCH = 0.96


@dataclass
class AdamState:
    """First/second moment estimates per parameter name and the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[MutableMapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to every buffer in ``params``.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    if lr <= 0:
        raise ValidationError(f"Learning rate must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValidationError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")

    for name, grad in grads.items():
        if name not in params:
            raise ShapeMismatchError(f"Gradient for unknown parameter '{name}'")
        if np.shape(grad) != params[name].shape:
            raise ShapeMismatchError(
                f"Parameter '{name}': gradient shape {np.shape(grad)} != {params[name].shape}"
            )

    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, param in params.items():
        grad = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        elif m.shape != param.shape:
            raise ShapeMismatchError(f"Optimizer state for '{name}' has shape {m.shape}")
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param -= update
    return params, state


def lr_at(epoch: int, lr0: float, decay: float = LR_DECAY_PER_EPOCH) -> float:
    """Learning rate for a zero-based epoch index."""
    return float(lr0 * decay ** max(int(epoch), 0))
