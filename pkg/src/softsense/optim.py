"""Adam, the inverse-square-root warmup schedule, and loss-based early stopping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ScheduleConfig:
    scale: float = 0.1
    d: int = 64
    warmup: int = 4000
    per_batch: bool = False  # advance per optimizer step instead of per epoch

    def __post_init__(self):
        if self.warmup < 1 or self.d < 1:
            raise ValueError("schedule needs warmup >= 1 and d >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def noam_lr(step: int, cfg: ScheduleConfig) -> float:
    """``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return cfg.scale * cfg.d**-0.5 * min(step**-0.5, step * cfg.warmup**-1.5)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of every parameter that has a gradient."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        # new array rather than in-place: callers may hold references to old params
        params[name] = params[name] - (lr / c1) * m / denom


@dataclass
class EarlyStopState:
    patience: int = 100
    min_delta: float = 1e-9
    best: float = math.inf
    best_epoch: int = -1
    since_improvement: int = 0
    epoch: int = 0
    stopped: bool = False
    failed: bool = False


def early_stop_update(state: EarlyStopState, epoch_loss: float) -> bool:
    """Record one epoch's monitored loss; returns True when it is a new best."""
    state.epoch += 1
    if not math.isfinite(epoch_loss):
        state.stopped = state.failed = True
        return False
    if epoch_loss < state.best - state.min_delta:
        state.best = epoch_loss
        state.best_epoch = state.epoch
        state.since_improvement = 0
        return True
    state.since_improvement += 1
    if state.since_improvement > state.patience:
        state.stopped = True
    return False
