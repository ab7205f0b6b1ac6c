"""Training objectives and the one-correct-label-activation (OCLA) metric.

Probability-space losses take ``p`` and a one-hot ``y`` of the same shape and
average over every entry. Probabilities are clamped to ``[EPS, 1 - EPS]``
before any logarithm; the clamp is a numerical guard only, so backward passes
evaluate the analytic derivative at the clamped point instead of zeroing it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import sigmoid_vec, softmax_vec

EPS = 1e-7


@dataclass
class ASLConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        if self.gamma_pos > self.gamma_neg:
            warnings.warn("gamma_pos > gamma_neg weights easy negatives more than positives",
                          stacklevel=2)


@dataclass
class OCLAConfig:
    threshold: float = 0.5
    strength: float = 1.0
    weight: float = 0.0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.weight < 0:
            raise ValueError("OCLA weight must be >= 0")


def _pair(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: p {p.shape} vs y {y.shape}")
    return np.clip(p, EPS, 1.0 - EPS), y


def _labels(P, Y):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.int64).reshape(-1)
    if len(Y) != P.shape[0]:
        raise ValueError(f"{len(Y)} labels for {P.shape[0]} rows")
    if np.any(Y < 0) or np.any(Y >= P.shape[1]):
        raise ValueError("label out of range")
    return P, Y


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _pow(base, expo):
    # numpy already gives 0 ** 0 == 1, which is what lets gamma = 0 reduce to BCE
    return np.power(base, expo)


# ---------------------------------------------------------------------------
# BCE / focal
# ---------------------------------------------------------------------------

def bce(p, y) -> float:
    p, y = _pair(p, y)
    return float(np.mean(-y * np.log(p) - (1 - y) * np.log(1 - p)))


def bce_backward(p, y) -> np.ndarray:
    p, y = _pair(p, y)
    return (-y / p + (1 - y) / (1 - p)) / p.size


def focal(p, y, gamma: float) -> float:
    p, y = _pair(p, y)
    loss = -y * _pow(1 - p, gamma) * np.log(p) - (1 - y) * _pow(p, gamma) * np.log(1 - p)
    return float(np.mean(loss))


def focal_backward(p, y, gamma: float) -> np.ndarray:
    p, y = _pair(p, y)
    g_pos = gamma * _pow(1 - p, gamma - 1) * np.log(p) - _pow(1 - p, gamma) / p
    g_neg = -gamma * _pow(p, gamma - 1) * np.log(1 - p) + _pow(p, gamma) / (1 - p)
    return (y * g_pos + (1 - y) * g_neg) / p.size


# ---------------------------------------------------------------------------
# asymmetric loss
# ---------------------------------------------------------------------------

def asl(p, y, cfg: ASLConfig) -> float:
    p, y = _pair(p, y)
    pm = np.maximum(p - cfg.margin, 0.0)
    pos = -_pow(1 - p, cfg.gamma_pos) * np.log(p)
    neg = -_pow(pm, cfg.gamma_neg) * np.log(1 - pm)
    return float(np.mean(np.where(y > 0, pos, neg)))


def asl_backward(p, y, cfg: ASLConfig) -> np.ndarray:
    """``dL/dp``; zero on negatives strictly below the margin."""
    p, y = _pair(p, y)
    gp, gn = cfg.gamma_pos, cfg.gamma_neg
    g_pos = -_pow(1 - p, gp) / p
    if gp:
        g_pos = g_pos + gp * _pow(1 - p, gp - 1) * np.log(p)
    pm = np.maximum(p - cfg.margin, 0.0)
    live = p > cfg.margin
    with np.errstate(divide="ignore", invalid="ignore"):
        g_neg = _pow(pm, gn) / (1 - pm)
        if gn:
            g_neg = g_neg - gn * _pow(pm, gn - 1) * np.log(1 - pm)
    g_neg = np.where(live, g_neg, 0.0)
    return np.where(y > 0, g_pos, g_neg) / p.size


def asl_grad_logits(z, y, cfg: ASLConfig) -> np.ndarray:
    """``dL/dz`` of ASL applied to ``p = sigmoid(z)``, in saturation-safe form.

    Equal to ``asl_backward(p, y) * p * (1 - p)`` wherever the clamp is
    inactive, but keeps a usable signal for logits far beyond ``log(1/EPS)``.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs y {y.shape}")
    p = sigmoid_vec(z)
    q = sigmoid_vec(-z)  # 1 - p without cancellation
    log_p = -np.logaddexp(0.0, -z)
    gp, gn, m = cfg.gamma_pos, cfg.gamma_neg, cfg.margin
    # y = 1: d/dz[-(1-p)^g log p] = g (1-p)^g p log p - (1-p)^(g+1)
    g_pos = -_pow(q, gp + 1)
    if gp:
        g_pos = g_pos + gp * _pow(q, gp) * p * log_p
    # y = 0, live side p > m, pm = p - m, 1 - pm = q + m:
    #   d/dz = p q [pm^g / (q + m) - g pm^(g-1) log(1 - pm)]
    # written without divisions that blow up as q -> 0 or pm -> 0
    live = p > m
    pm = np.where(live, p - m, 0.5)
    frac = q / (q + m) if m else np.ones_like(q)
    g_neg = _pow(pm, gn) * p * frac
    if gn:
        if m:
            log_ratio = np.log1p(-pm) / pm
        else:
            log_ratio = -np.logaddexp(0.0, z) / np.where(p > 0, p, 1.0)
        g_neg = g_neg - gn * _pow(pm, gn) * p * q * log_ratio
    g_neg = np.where(live, g_neg, 0.0)
    return np.where(y > 0, g_pos, g_neg) / z.size


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def ce_softmax(z, Y) -> float:
    z, Y = _labels(z, Y)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logsum - shifted[np.arange(len(Y)), Y]))


def ce_softmax_backward(z, Y) -> np.ndarray:
    z, Y = _labels(z, Y)
    g = softmax_vec(z)
    g[np.arange(len(Y)), Y] -= 1.0
    return g / len(Y)


# ---------------------------------------------------------------------------
# OCLA
# ---------------------------------------------------------------------------

def activated(P, t: float) -> np.ndarray:
    return np.asarray(P) > t


def ocla_metric(P, Y, t: float = 0.5) -> float:
    """Fraction of rows whose activated set is exactly ``{Y_i}``."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    P, Y = _labels(P, Y)
    act = P > t
    rows = np.arange(len(Y))
    ok = act[rows, Y] & (act.sum(axis=1) == 1)
    return float(ok.mean())


def ocla_loss(P, Y, cfg: OCLAConfig) -> float:
    P, Y = _labels(P, Y)
    t, s = cfg.threshold, cfg.strength
    rows = np.arange(len(Y))
    hinge = np.maximum(P - t, 0.0)
    hinge[rows, Y] = 0.0
    wrong = hinge.sum(axis=1)
    right = P[rows, Y] - t
    per = wrong + s * np.maximum(right, 0.0) - s * right
    return float(per.mean())


def ocla_loss_backward(P, Y, cfg: OCLAConfig) -> np.ndarray:
    P, Y = _labels(P, Y)
    t, s = cfg.threshold, cfg.strength
    n = len(Y)
    rows = np.arange(n)
    g = (P > t).astype(np.float64)
    g[rows, Y] = s * (P[rows, Y] > t) - s
    return g / n


def calibration_loss(P, Y, asl_cfg: ASLConfig, ocla_cfg: OCLAConfig) -> float:
    P, Y = _labels(P, Y)
    base = asl(P, one_hot(Y, P.shape[1]), asl_cfg)
    if ocla_cfg.weight == 0:
        return base
    return base + ocla_cfg.weight * ocla_loss(P, Y, ocla_cfg)


def calibration_loss_backward(P, Y, asl_cfg: ASLConfig, ocla_cfg: OCLAConfig) -> np.ndarray:
    P, Y = _labels(P, Y)
    g = asl_backward(P, one_hot(Y, P.shape[1]), asl_cfg)
    if ocla_cfg.weight:
        g = g + ocla_cfg.weight * ocla_loss_backward(P, Y, ocla_cfg)
    return g
