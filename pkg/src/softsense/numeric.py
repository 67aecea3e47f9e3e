"""Deterministic float64 tensor helpers and the dilated 1-D convolution kernel.

Tensors are plain ``numpy.ndarray`` values of dtype float64, row-major.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class NumericError(ArithmeticError):
    """Raised when a value leaves the finite range or shapes do not line up."""


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """PCG64 generator; identical seed gives identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise NumericError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise NumericError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def same_offset(kernel_size: int, dilation: int) -> int:
    return ((kernel_size - 1) * dilation) // 2


def conv1d_dilated(
    x: np.ndarray, kernel: np.ndarray, dilation: int = 1, mode: str = "same"
) -> np.ndarray:
    """Dilated 1-D convolution (cross-correlation) along the second-to-last axis.

    ``x`` is ``[..., T, C_in]`` and ``kernel`` is ``[K, C_in, C_out]``.
    ``out[t, o] = sum_{k,c} x[t + k*dilation - offset, c] * kernel[k, c, o]``
    where ``offset`` is ``((K-1)*dilation)//2`` in "same" mode (zeros outside
    the input) and 0 in "valid" mode.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise NumericError(f"dilation must be a positive integer, got {dilation!r}")
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise NumericError(f"conv1d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    K = kernel.shape[0]
    T = x.shape[-2]
    span = (K - 1) * dilation
    if mode == "same":
        xp = pad_time(x, same_offset(K, dilation), span - same_offset(K, dilation))
        T_out = T
    elif mode == "valid":
        if T < span + 1:
            raise NumericError(f"valid conv needs T >= {span + 1}, got {T}")
        xp = x
        T_out = T - span
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    out = np.zeros(x.shape[:-2] + (T_out, kernel.shape[2]))
    for k in range(K):
        s = k * dilation
        out += xp[..., s : s + T_out, :] @ kernel[k]
    return check_finite(out, "conv1d output")


def pad_time(x: np.ndarray, left: int, right: int) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    return np.pad(x, widths)


def glorot_init(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Glorot-uniform draw.

    For rank-3 conv kernels ``[K, C_in, C_out]`` the receptive field multiplies
    both fans, matching the usual Keras convention.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError(f"glorot_init needs at least 2 axes, got {shape}")
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in = shape[-2] * receptive
    fan_out = shape[-1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))
