"""Adam with bias correction, operating on dictionaries of named arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 10.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class AdamState:
    """First and second moments per parameter plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: AdamConfig = AdamConfig(),
    maximize: bool = False,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update of the parameters named in ``grads``.

    Parameters absent from ``grads`` are returned untouched. With
    ``maximize=True`` the step ascends the objective. A positive
    ``weight_decay`` shrinks each updated parameter by
    ``learning_rate * weight_decay`` of its value, decoupled from the moments.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name}", "update")
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    sign = -1.0 if maximize else 1.0
    for name, g in grads.items():
        g = sign * np.asarray(g, dtype=np.float64)
        m_prev = m.get(name, np.zeros_like(g))
        v_prev = v.get(name, np.zeros_like(g))
        m[name] = config.beta1 * m_prev + (1.0 - config.beta1) * g
        v[name] = config.beta2 * v_prev + (1.0 - config.beta2) * g * g
        update = config.learning_rate * (m[name] / c1) / (np.sqrt(v[name] / c2) + config.eps)
        decay = config.learning_rate * config.weight_decay * params[name] if config.weight_decay else 0.0
        new_params[name] = params[name] - update - decay
    return new_params, AdamState(m, v, t)
