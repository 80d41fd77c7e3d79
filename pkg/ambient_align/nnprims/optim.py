"""
AdamW with decoupled weight decay, and EMA parameter tracking.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .params import ParamSet


@dataclass
class OptimizerState:
    """Hyperparameters, moment buffers and step count for AdamW."""
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet, learning_rate: float = 1e-4,
                   weight_decay: float = 1e-4) -> "OptimizerState":
        state = cls(learning_rate=learning_rate, weight_decay=weight_decay)
        for name in params:
            state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        return state


def adamw_update(params: ParamSet, grads: Optional[Dict[str, np.ndarray]],
                 state: OptimizerState) -> ParamSet:
    """One AdamW step, applied in place.

    Args:
        params: Parameters to update
        grads: Gradients by name (defaults to ``params.grads``)
        state: Optimizer state; its step count is incremented

    Returns:
        The updated ParamSet
    """
    grads = params.grads if grads is None else grads

    for name in params:
        if name not in grads:
            raise KeyError(f"No gradient for parameter '{name}'")
        if grads[name].shape != params[name].shape:
            raise ValueError(f"Gradient for '{name}' has shape {grads[name].shape}, "
                             f"expected {params[name].shape}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"Nonfinite gradient for parameter '{name}'")
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for name in params:
        theta = params[name]
        grad = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]

        # Decoupled decay, separate from the adaptive step
        if state.weight_decay:
            theta -= state.learning_rate * state.weight_decay * theta

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        m_hat = m / correction1
        v_hat = v / correction2
        theta -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)

    return params


def ema_update(momentum_params: ParamSet, online_params: ParamSet, m: float) -> ParamSet:
    """theta_mom <- m * theta_mom + (1 - m) * theta_online, in place."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"EMA momentum must satisfy 0 <= m < 1, got {m}")
    if set(momentum_params.names()) != set(online_params.names()):
        raise ValueError("Momentum and online parameter sets have different names")
    for name in momentum_params:
        target = momentum_params[name]
        source = online_params[name]
        if target.shape != source.shape:
            raise ValueError(f"EMA shape mismatch for '{name}': {target.shape} vs {source.shape}")
        target *= m
        target += (1.0 - m) * source
    return momentum_params
