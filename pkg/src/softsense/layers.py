"""Forward passes with cached activations and their exact analytic backward passes.

Every ``*_forward`` returns ``(output, cache)``; ``layer_backward(cache, dy)``
returns ``(dx, param_grads)`` where ``param_grads`` is a dict keyed by the
local parameter name (``"W"``, ``"b"``, ``"gamma"`` ...). A cache may be
consumed once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (
    NumericError,
    as_tensor,
    check_finite,
    conv1d_dilated,
    pad_time,
    same_offset,
    sigmoid,
)


class StaleCacheError(RuntimeError):
    pass


@dataclass
class LayerCache:
    kind: str
    saved: dict
    used: bool = False


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.99, epsilon: float = 1e-5):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )


def _check_mode(mode: str) -> None:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# --- dense -----------------------------------------------------------------


def dense_forward(x, W, b):
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise NumericError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    y = x @ W + b
    return check_finite(y, "dense output"), LayerCache("dense", {"x": x, "W": W})


def _dense_backward(saved, dy):
    x, W = saved["x"], saved["W"]
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}


# --- gated linear unit -----------------------------------------------------


def glu_forward(x, W_a, b_a, W_b, b_b):
    """``(x W_a + b_a) * sigmoid(x W_b + b_b)``."""
    if W_a.shape != W_b.shape:
        raise NumericError(f"GLU branch widths differ: {W_a.shape} vs {W_b.shape}")
    x = as_tensor(x)
    lin, _ = dense_forward(x, W_a, b_a)
    gate_pre, _ = dense_forward(x, W_b, b_b)
    gate = sigmoid(gate_pre)
    cache = LayerCache("glu", {"x": x, "W_a": W_a, "W_b": W_b, "lin": lin, "gate": gate})
    return lin * gate, cache


def _glu_backward(saved, dy):
    x, lin, gate = saved["x"], saved["lin"], saved["gate"]
    d_lin = dy * gate
    d_pre = dy * lin * gate * (1.0 - gate)
    x2 = x.reshape(-1, x.shape[-1])
    dl2 = d_lin.reshape(-1, d_lin.shape[-1])
    dp2 = d_pre.reshape(-1, d_pre.shape[-1])
    dx = d_lin @ saved["W_a"].T + d_pre @ saved["W_b"].T
    grads = {
        "W_a": x2.T @ dl2,
        "b_a": dl2.sum(axis=0),
        "W_b": x2.T @ dp2,
        "b_b": dp2.sum(axis=0),
    }
    return dx, grads


# --- dilated convolution ---------------------------------------------------


def conv_forward(x, kernel, bias, dilation: int):
    """Same-padded dilated convolution over ``[B, T, C_in]``; ``bias`` may be None."""
    x = as_tensor(x)
    y = conv1d_dilated(x, kernel, dilation, mode="same")
    if bias is not None:
        y = y + bias
    saved = {"x": x, "kernel": kernel, "dilation": dilation, "has_bias": bias is not None}
    return y, LayerCache("conv", saved)


def _conv_backward(saved, dy):
    x, kernel, d = saved["x"], saved["kernel"], saved["dilation"]
    K = kernel.shape[0]
    T = x.shape[-2]
    left = same_offset(K, d)
    right = (K - 1) * d - left
    xp = pad_time(x, left, right)
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    dy2 = dy.reshape(-1, dy.shape[-1])
    for k in range(K):
        s = k * d
        window = xp[..., s : s + T, :]
        dkernel[k] = window.reshape(-1, window.shape[-1]).T @ dy2
        dxp[..., s : s + T, :] += dy @ kernel[k].T
    dx = dxp[..., left : left + T, :]
    grads = {"kernel": dkernel}
    if saved["has_bias"]:
        grads["bias"] = dy2.sum(axis=0)
    return dx, grads


# --- batch normalization ---------------------------------------------------


def batchnorm_forward(x, state: BatchNormState, mode: str):
    """Per-channel normalization over every axis but the last.

    In train mode the updated running statistics are left on
    ``cache.saved["running_mean"/"running_var"]``; the caller decides whether
    to commit them.
    """
    _check_mode(mode)
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))
    if mode == "train":
        if count < 2:
            raise NumericError("batchnorm train mode needs at least 2 values per channel")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        new_mean = m * state.running_mean + (1.0 - m) * mu
        new_var = m * state.running_var + (1.0 - m) * var
    else:
        mu = state.running_mean
        var = state.running_var
        new_mean, new_var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mu) * inv_std
    y = state.gamma * xhat + state.beta
    cache = LayerCache(
        "batchnorm",
        {
            "mode": mode,
            "xhat": xhat,
            "inv_std": inv_std,
            "gamma": state.gamma,
            "count": count,
            "running_mean": new_mean,
            "running_var": new_var,
        },
    )
    return check_finite(y, "batchnorm output"), cache


def _batchnorm_backward(saved, dy):
    xhat, inv_std, gamma = saved["xhat"], saved["inv_std"], saved["gamma"]
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if saved["mode"] == "train":
        n = saved["count"]
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )
    else:
        dx = dxhat * inv_std
    return dx, {"gamma": dgamma, "beta": dbeta}


# --- elementwise activations ----------------------------------------------


def swish_forward(x):
    x = as_tensor(x)
    s = sigmoid(x)
    return x * s, LayerCache("swish", {"x": x, "s": s})


def _swish_backward(saved, dy):
    x, s = saved["x"], saved["s"]
    return dy * (s + x * s * (1.0 - s)), {}


def sigmoid_forward(x):
    y = sigmoid(as_tensor(x))
    return y, LayerCache("sigmoid", {"y": y})


def _sigmoid_backward(saved, dy):
    y = saved["y"]
    return dy * y * (1.0 - y), {}


def dropout_forward(x, rate: float, rng: np.random.Generator | None, mode: str):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "infer" or rate == 0.0:
        return x, LayerCache("dropout", {"mask": None})
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, LayerCache("dropout", {"mask": mask})


def _dropout_backward(saved, dy):
    mask = saved["mask"]
    return (dy if mask is None else dy * mask), {}


def gap_forward(x):
    """Mean over the time axis: ``[B, T, C] -> [B, C]``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise NumericError(f"global average pool needs a non-empty time axis, got {x.shape}")
    return x.mean(axis=-2), LayerCache("gap", {"T": x.shape[-2]})


def _gap_backward(saved, dy):
    T = saved["T"]
    return np.repeat(dy[..., None, :], T, axis=-2) / T, {}


_BACKWARD = {
    "dense": _dense_backward,
    "glu": _glu_backward,
    "conv": _conv_backward,
    "batchnorm": _batchnorm_backward,
    "swish": _swish_backward,
    "sigmoid": _sigmoid_backward,
    "dropout": _dropout_backward,
    "gap": _gap_backward,
}


def layer_backward(cache: LayerCache, upstream: np.ndarray):
    if cache.used:
        raise StaleCacheError(f"{cache.kind} cache already consumed by a backward pass")
    cache.used = True
    dx, grads = _BACKWARD[cache.kind](cache.saved, as_tensor(upstream))
    return dx, grads
