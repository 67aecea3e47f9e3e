"""Imbalance-weighted binary cross-entropy and the SuperLoss confidence wrapper.

SuperLoss rescales each sample's loss by a confidence ``sigma`` that minimises
``(l - tau) * sigma + lam * log(sigma)**2``. The minimiser has the closed form
``exp(-W(0.5 * max(-2/e, (l - tau) / lam)))`` with ``W`` the principal branch
of the Lambert-W function. Confidence is treated as a constant weight during
backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numeric import NumericError, as_tensor

MINUS_INV_E = -math.exp(-1.0)
PRED_CLAMP = 1e-12


@dataclass
class ClassWeights:
    beta: np.ndarray
    active: np.ndarray  # False where the task had no positives; beta is 0 there


def compute_beta(counts, N: int, m: int) -> ClassWeights:
    """``beta_j = N / (2 m n_j)``; tasks with no positives get beta 0 and are deactivated."""
    counts = np.asarray(counts, dtype=np.float64)
    if N <= 0 or m < 1:
        raise ValueError(f"need N > 0 and m >= 1, got N={N}, m={m}")
    active = counts > 0
    beta = np.zeros_like(counts)
    beta[active] = N / (2.0 * m * counts[active])
    return ClassWeights(beta, active)


def bce_elements(y, yhat, beta, mask):
    """Per-(sample, task) weighted BCE and its derivative w.r.t. ``yhat`` (masked)."""
    y = as_tensor(y)
    yhat = as_tensor(yhat)
    mask = as_tensor(mask)
    beta = np.broadcast_to(as_tensor(beta), y.shape)
    if not (y.shape == yhat.shape == mask.shape):
        raise ValueError(f"shape mismatch: y {y.shape}, yhat {yhat.shape}, mask {mask.shape}")
    p = np.clip(yhat, PRED_CLAMP, 1.0 - PRED_CLAMP)
    loss = -(beta * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = -(beta * y / p - (1.0 - y) / (1.0 - p))
    return loss * mask, grad * mask


def weighted_bce(y, yhat, beta, mask):
    """Task-averaged masked weighted BCE per sample.

    Returns ``(per_sample [B], d per_sample / d yhat [B, M])``. A sample with
    every task masked gets loss 0 and zero gradient.
    """
    loss, grad = bce_elements(y, yhat, beta, mask)
    n_valid = as_tensor(mask).sum(axis=1)
    denom = np.where(n_valid > 0, n_valid, 1.0)
    return loss.sum(axis=1) / denom, grad / denom[:, None]


def lambert_w0(x):
    """Principal-branch Lambert W for real ``x >= -1/e`` (scalar or array).

    Halley iteration from a branch-point series near ``-1/e`` and Winitzki's
    approximation elsewhere; stops once ``|w e^w - x| < 1e-12 max(1, |x|)``
    or after 50 iterations.
    """
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    x = np.atleast_1d(arr).copy()
    if np.any(np.isnan(x)):
        raise NumericError("lambert_w0 of NaN")
    if np.any(x < MINUS_INV_E - 1e-15):
        raise NumericError(f"lambert_w0 domain is x >= -1/e, got min {x.min()!r}")
    x = np.maximum(x, MINUS_INV_E)

    near = x < -0.25
    w = np.empty_like(x)
    p = np.sqrt(np.maximum(2.0 * (math.e * x[near] + 1.0), 0.0))
    w[near] = -1.0 + p - p * p / 3.0 + (11.0 / 72.0) * p**3
    lx = np.log1p(x[~near])
    w[~near] = lx * (1.0 - np.log1p(lx) / (2.0 + lx))

    tol = 1e-12 * np.maximum(1.0, np.abs(x))
    for _ in range(50):
        ew = np.exp(w)
        f = w * ew - x
        live = np.abs(f) >= tol
        if not live.any():
            break
        wl, el, fl = w[live], ew[live], f[live]
        wp1 = wl + 1.0
        # at the branch point the derivative vanishes; leave those entries alone
        ok = wp1 > 1e-300
        step = np.zeros_like(wl)
        step[ok] = fl[ok] / (el[ok] * wp1[ok] - (wl[ok] + 2.0) * fl[ok] / (2.0 * wp1[ok]))
        w[live] = wl - step
        if not ok.any():
            break
    w = np.maximum(w, -1.0)
    w[x == 0.0] = 0.0
    w[x == MINUS_INV_E] = -1.0
    return float(w[0]) if scalar else w.reshape(arr.shape)


@dataclass
class SuperLossConfig:
    lam: float = 0.25
    C: int | None = None
    tau: float | None = None
    granularity: str = "sample"

    def resolve(self, num_tasks: int) -> "SuperLossConfig":
        """Fill ``C`` (defaults to the task count) and ``tau = log(C)``."""
        C = self.C if self.C is not None else num_tasks
        tau = self.tau if self.tau is not None else math.log(C)
        out = SuperLossConfig(self.lam, int(C), float(tau), self.granularity)
        out.validate()
        return out

    def validate(self) -> None:
        if self.lam <= 0:
            raise ValueError("SuperLoss lambda must be positive")
        if self.C is not None and self.C < 2 and self.tau is None:
            raise ValueError("SuperLoss needs C >= 2 so that tau = log(C) > 0")
        if self.granularity not in ("sample", "task"):
            raise ValueError(f"granularity must be 'sample' or 'task', got {self.granularity!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def superloss_sigma(l, cfg: SuperLossConfig):
    """Closed-form optimal confidence; non-increasing in ``l`` with range ``(0, e]``."""
    l = np.asarray(l, dtype=np.float64)
    arg = 0.5 * np.maximum(2.0 * MINUS_INV_E, (l - cfg.tau) / cfg.lam)
    sigma = np.exp(-lambert_w0(arg))
    return float(sigma) if np.ndim(sigma) == 0 else sigma


def superloss_value(l, sigma, cfg: SuperLossConfig):
    return (l - cfg.tau) * sigma + cfg.lam * np.log(sigma) ** 2


def superloss(per_sample_l, cfg: SuperLossConfig | None, valid=None):
    """Returns ``(objective, weights)``.

    ``cfg=None`` is the plain ablation: the objective is ``mean(l)`` and all
    weights are 1. Rows flagged invalid contribute nothing to the objective.
    """
    l = as_tensor(per_sample_l)
    valid = np.ones(l.shape, bool) if valid is None else np.asarray(valid, bool)
    B = l.shape[0] if l.ndim else 1
    if cfg is None:
        return float(np.sum(np.where(valid, l, 0.0)) / B), np.ones_like(l)
    sigma = superloss_sigma(l, cfg)
    terms = np.where(valid, superloss_value(l, sigma, cfg), 0.0)
    return float(np.sum(terms) / B), np.where(valid, sigma, 0.0)


@dataclass
class LossReport:
    per_sample: np.ndarray  # task-averaged base loss per sample
    sigma: np.ndarray  # confidences ([B], or [B, M] at task granularity)
    objective: float
    dY: np.ndarray  # gradient of the objective w.r.t. predictions


def compute_loss(y, yhat, weights: ClassWeights, mask, cfg: SuperLossConfig | None) -> LossReport:
    """Full loss stage: masked weighted BCE, optional SuperLoss, gradient seed.

    ``cfg=None`` selects plain weighted BCE.
    """
    mask = as_tensor(mask) * weights.active[None, :]
    B = mask.shape[0]
    n_valid = mask.sum(axis=1)
    has_any = n_valid > 0
    per_sample, d_per_sample = weighted_bce(y, yhat, weights.beta, mask)
    if cfg is None or cfg.granularity == "sample":
        objective, sigma = superloss(per_sample, cfg, has_any)
        dY = d_per_sample * (sigma / B)[:, None]
        return LossReport(per_sample, sigma, objective, dY)

    elem, d_elem = bce_elements(y, yhat, weights.beta, mask)
    sigma = np.where(mask > 0, superloss_sigma(elem, cfg), 0.0)
    denom = np.where(has_any, n_valid, 1.0)[:, None]
    terms = np.where(mask > 0, superloss_value(elem, np.where(mask > 0, sigma, 1.0), cfg), 0.0)
    objective = float(np.sum(terms / denom) / B)
    dY = d_elem * sigma / denom / B
    return LossReport(per_sample, sigma, objective, dY)
