"""Dense kernels with hand-written backward passes.

Tensors are plain ``float64`` numpy arrays. Only the handful of operations the
heads and losses need live here, each as a forward/backward pair, together with
a central-difference gradient checker used throughout the test-suite.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class DataIntegrityError(ValueError):
    """Raised when an input tensor carries NaN or infinite values."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.size == 0:
        raise ValueError("tensor must have at least one dimension and one element")
    return arr


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DataIntegrityError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# mxpool
# ---------------------------------------------------------------------------

def mxpool(channel) -> float:
    """Signed sparse pooling: ``max(ReLU(K)) - max(ReLU(-K))``."""
    k = as_tensor(channel)
    _check_finite(k, "mxpool input")
    return float(max(k.max(), 0.0) - max(-k.min(), 0.0))


def mxpool_backward(channel, upstream: float) -> np.ndarray:
    k = as_tensor(channel)
    _check_finite(k, "mxpool input")
    flat = k.reshape(-1)
    grad = np.zeros_like(flat)
    i_pos = int(np.argmax(flat))
    i_neg = int(np.argmin(flat))
    if flat[i_pos] > 0:
        grad[i_pos] += upstream
    if flat[i_neg] < 0:
        grad[i_neg] += upstream
    return grad.reshape(k.shape)


def mxpool_batch(x: np.ndarray):
    """Pool the trailing spatial axis of ``x`` with shape ``(..., n)``.

    Returns ``(v, pos_idx, neg_idx, has_pos, has_neg)``. The index arrays hold
    the flat spatial position of the positive maximum and of the most negative
    element; numpy's first-occurrence argmax gives the lowest-index tie-break.
    """
    _check_finite(x, "mxpool input")
    pos_idx = np.argmax(x, axis=-1)
    neg_idx = np.argmin(x, axis=-1)
    hi = np.take_along_axis(x, pos_idx[..., None], axis=-1)[..., 0]
    lo = np.take_along_axis(x, neg_idx[..., None], axis=-1)[..., 0]
    has_pos = hi > 0
    has_neg = lo < 0
    v = np.maximum(hi, 0.0) - np.maximum(-lo, 0.0)
    return v, pos_idx, neg_idx, has_pos, has_neg


def mxpool_batch_backward(grad_v, pos_idx, neg_idx, has_pos, has_neg, n: int) -> np.ndarray:
    """Scatter ``grad_v`` back onto the spatial axis of length ``n``."""
    out = np.zeros(grad_v.shape + (n,))
    np.put_along_axis(out, pos_idx[..., None], (grad_v * has_pos)[..., None], axis=-1)
    # pos and neg cells are always distinct when both are active (K>0 vs K<0)
    neg = np.take_along_axis(out, neg_idx[..., None], axis=-1)
    np.put_along_axis(out, neg_idx[..., None], neg + (grad_v * has_neg)[..., None], axis=-1)
    return out


# ---------------------------------------------------------------------------
# 1x1 channel projection
# ---------------------------------------------------------------------------

def channel_project(inputs, weights) -> np.ndarray:
    """Apply a ``(C', d)`` matrix across the channel axis of ``(d, H, W)``.

    A leading batch axis ``(B, d, H, W)`` is also accepted.
    """
    x = np.asarray(inputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or x.ndim not in (3, 4):
        raise ValueError(f"bad ranks: weights {w.shape}, inputs {x.shape}")
    d = x.shape[-3]
    if w.shape[1] != d:
        raise ValueError(f"weights have {w.shape[1]} columns, input has {d} channels")
    spatial = x.shape[-2:]
    flat = x.reshape(x.shape[:-2] + (-1,))
    out = np.matmul(w, flat)
    return out.reshape(out.shape[:-1] + spatial)


def channel_project_backward(inputs, weights, grad_out):
    """Return ``(grad_inputs, grad_weights)`` for :func:`channel_project`."""
    x = np.asarray(inputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    xf = x.reshape(x.shape[:-2] + (-1,))
    gf = g.reshape(g.shape[:-2] + (-1,))
    grad_x = np.matmul(w.T, gf).reshape(x.shape)
    gw = np.matmul(gf, np.swapaxes(xf, -1, -2))
    if gw.ndim == 3:
        gw = gw.sum(axis=0)
    return grad_x, gw


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def sigmoid_vec(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(p, grad_p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.asarray(grad_p) * p * (1.0 - p)


def softmax_vec(z) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad_p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(grad_p, dtype=np.float64)
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def relu_clamp(w) -> np.ndarray:
    return np.maximum(np.asarray(w, dtype=np.float64), 0.0)


def relu_clamp_backward(w, grad_out) -> np.ndarray:
    # subgradient 0 at the kink: a weight sitting at 0 stays dead
    return np.asarray(grad_out) * (np.asarray(w) > 0)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    point,
    h: float = 1e-3,
    signature: Optional[Callable[[np.ndarray], object]] = None,
) -> float:
    """Compare ``grad(point)`` against central differences of ``fun``.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    coordinates. When ``signature`` is given it must map a point to a hashable
    or array-valued description of the piecewise regime (argmax positions,
    active ReLUs, ...); coordinates whose ``±h`` perturbation changes that
    description are treated as kink-adjacent and skipped.
    """
    x = np.array(point, dtype=np.float64, copy=True)
    analytic = np.asarray(grad(x.copy()), dtype=np.float64).reshape(x.shape)
    base_sig = signature(x.copy()) if signature is not None else None
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fun(x.copy())
        sig_plus = signature(x.copy()) if signature is not None else None
        flat[i] = orig - h
        f_minus = fun(x.copy())
        sig_minus = signature(x.copy()) if signature is not None else None
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DataIntegrityError(f"function is non-finite near coordinate {i}")
        if signature is not None and not (
            _same(sig_plus, base_sig) and _same(sig_minus, base_sig)
        ):
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == np.shape(b) and bool(np.array_equal(a, b))
    return a == b
