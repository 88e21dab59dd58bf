"""SGD (momentum/Nesterov, iteration decay) and Adam as pure update functions.

Both optimizers map (params, grads, state) -> (new params, new state) without
mutating their inputs, so a step is reproducible from its arguments alone.
Parameter collections are plain ``dict[str, np.ndarray]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.01
    decay: float = 1e-6
    momentum: float = 0.7
    nesterov: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"SGD lr must be > 0, got {self.lr}")
        if self.decay < 0:
            raise ConfigError(f"SGD decay must be >= 0, got {self.decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"SGD momentum must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"Adam epsilon must be > 0, got {self.epsilon}")


@dataclass
class SgdState:
    velocity: Params = field(default_factory=dict)


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0


OptState = SgdState | AdamState


def init_sgd_state(params: Params) -> SgdState:
    return SgdState(velocity={k: np.zeros_like(p) for k, p in params.items()})


def init_adam_state(params: Params) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def _check_shapes(params: Params, grads: Params) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"missing gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")


def sgd_step(params: Params, grads: Params, state: SgdState, config: SGDConfig, t: int) -> tuple[Params, SgdState]:
    """One SGD update at iteration ``t`` (0-based) with lr_t = lr/(1 + decay*t).

    v' = momentum*v - lr_t*g; classical applies theta + v', Nesterov applies
    theta + momentum*v' - lr_t*g.
    """
    _check_shapes(params, grads)
    if t < 0:
        raise ConfigError(f"iteration index must be >= 0, got {t}")
    lr_t = config.lr / (1.0 + config.decay * t)
    new_params: Params = {}
    new_vel: Params = {}
    for name, p in params.items():
        g = grads[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v_new = config.momentum * v - lr_t * g
        if config.nesterov:
            new_params[name] = p + config.momentum * v_new - lr_t * g
        else:
            new_params[name] = p + v_new
        new_vel[name] = v_new
    return new_params, SgdState(velocity=new_vel)


def adam_step(params: Params, grads: Params, state: AdamState, config: AdamConfig) -> tuple[Params, AdamState]:
    """One Adam update with bias-corrected first/second moments."""
    _check_shapes(params, grads)
    t_new = state.t + 1
    bc1 = 1.0 - config.beta1 ** t_new
    bc2 = 1.0 - config.beta2 ** t_new
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
        if v is None:
            v = np.zeros_like(p)
        m_new = config.beta1 * m + (1.0 - config.beta1) * g
        v_new = config.beta2 * v + (1.0 - config.beta2) * g * g
        m_hat = m_new / bc1
        v_hat = v_new / bc2
        new_params[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
        new_m[name] = m_new
        new_v[name] = v_new
    return new_params, AdamState(m=new_m, v=new_v, t=t_new)
