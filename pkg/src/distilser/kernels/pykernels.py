"""Pure-numpy kernel implementations (fallback backend).

Convolutions are expressed as window gathers followed by BLAS matmuls
(im2col); the backward pass scatters gradients back per kernel tap, which
keeps all index arrays collision-free for any stride >= 1.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

NAME = "python"

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int) -> np.ndarray:
    """x: [c_in, t], w: [c_out, c_in//groups, k] -> [c_out, t_out]."""
    c_in, _ = x.shape
    c_out, c_in_g, k = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad)))
    t_out = (x.shape[1] - k) // stride + 1
    idx = stride * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    out = np.empty((c_out, t_out), dtype=np.float64)
    cpg = c_out // groups
    for g in range(groups):
        xg = x[g * c_in_g:(g + 1) * c_in_g]
        cols = xg[:, idx].transpose(1, 0, 2).reshape(t_out, c_in_g * k)
        wg = w[g * cpg:(g + 1) * cpg].reshape(cpg, c_in_g * k)
        out[g * cpg:(g + 1) * cpg] = wg @ cols.T
    return out


def conv1d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    stride: int,
    pad: int,
    groups: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv1d_forward w.r.t. input and weight."""
    c_in, t = x.shape
    c_out, c_in_g, k = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad))) if pad else x
    t_out = grad_out.shape[1]
    idx = stride * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    grad_xp = np.zeros_like(xp)
    grad_w = np.empty_like(w)
    cpg = c_out // groups
    base = stride * np.arange(t_out)
    for g in range(groups):
        xg = xp[g * c_in_g:(g + 1) * c_in_g]
        cols = xg[:, idx].transpose(1, 0, 2).reshape(t_out, c_in_g * k)
        go = grad_out[g * cpg:(g + 1) * cpg]
        grad_w[g * cpg:(g + 1) * cpg] = (go @ cols).reshape(cpg, c_in_g, k)
        gcols = (w[g * cpg:(g + 1) * cpg].reshape(cpg, -1).T @ go).reshape(c_in_g, k, t_out)
        gx = grad_xp[g * c_in_g:(g + 1) * c_in_g]
        for kk in range(k):
            gx[:, base + kk] += gcols[:, kk, :]
    grad_x = grad_xp[:, pad:pad + t] if pad else grad_xp
    return grad_x, grad_w


def gelu_forward(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)
