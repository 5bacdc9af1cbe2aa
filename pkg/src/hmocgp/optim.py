"""RMSprop on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonFiniteGradientError


@dataclass
class OptimizerState:
    """Running RMSprop statistics.

    ``second_moment`` is created lazily with the length of the first gradient.
    """

    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    second_moment: np.ndarray | None = None
    skipped_steps: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


def rmsprop_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """One descent step; returns ``(new_params, state)``.

    To ascend an objective pass the gradient of its negation.  Non-finite
    gradients leave both ``params`` and the running moments untouched, bump
    ``state.skipped_steps`` and raise :class:`NonFiniteGradientError`.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if state.second_moment is None:
        state.second_moment = np.zeros_like(params)
    elif state.second_moment.shape != params.shape:
        raise ValueError("optimizer state does not match parameter length")
    if not np.all(np.isfinite(grads)):
        state.skipped_steps += 1
        raise NonFiniteGradientError("non-finite gradient passed to rmsprop_step")
    v = state.decay * state.second_moment + (1.0 - state.decay) * grads * grads
    state.second_moment = v
    new = params - state.learning_rate * grads / (np.sqrt(v) + state.epsilon)
    return new, state
