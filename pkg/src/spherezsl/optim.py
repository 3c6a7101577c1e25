"""Adam optimizer over named parameter dicts, functional and deterministic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter moment estimates plus hyperparameters.

    ``step_count`` increments by exactly one per :func:`adam_step`; moments
    always mirror the parameter shapes.
    """

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, np.ndarray], learning_rate: float = 3e-4,
             beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        return cls(
            first_moment={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            second_moment={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            step_count=0,
            learning_rate=learning_rate,
            beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state, inputs untouched."""
    t = state.step_count + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{name} shape {np.shape(p)}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_params[name] = np.asarray(p, dtype=np.float64) - \
            state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(
        first_moment=new_m, second_moment=new_v, step_count=t,
        learning_rate=state.learning_rate, beta1=state.beta1,
        beta2=state.beta2, epsilon=state.epsilon,
    )


class Adam:
    """Stateful convenience wrapper around :func:`adam_step` for training loops."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.state = AdamState.init(self.params, learning_rate, beta1, beta2, epsilon)

    def step(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.params, self.state = adam_step(self.params, grads, self.state)
        return self.params
