"""InfoDisent and SIDE classification heads over frozen feature maps.

Both heads share the same skeleton::

    features (B, d, H, W) --project--> (B, C', H, W) --mxpool--> v (B, C')
        --> z = W_eff v --> p

SIDE projects with a trainable expansion matrix, uses ``W_eff = max(W, 0) *
mask`` and a sigmoid; InfoDisent projects with an orthogonal matrix obtained
from a Cayley transform, uses ``W_eff = |W| * mask`` and a softmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    DataIntegrityError,
    mxpool_batch,
    mxpool_batch_backward,
    sigmoid_vec,
    softmax_vec,
)

SIDE = "side"
INFODISENT = "infodisent"


class HeadShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# orthogonal map
# ---------------------------------------------------------------------------

def skew_from_upper(upper: np.ndarray, d: int) -> np.ndarray:
    a = np.zeros((d, d))
    iu = np.triu_indices(d, k=1)
    a[iu] = upper
    return a - a.T


def upper_from_skew(a: np.ndarray) -> np.ndarray:
    return a[np.triu_indices(a.shape[0], k=1)].copy()


def materialize_orthogonal(param, d: Optional[int] = None) -> np.ndarray:
    """Cayley map ``U = (I - A)(I + A)^-1`` of a skew-symmetric ``A``.

    ``param`` is either the full ``d x d`` skew matrix or the vector of its
    strictly-upper-triangular entries (then ``d`` is required).
    """
    a = np.asarray(param, dtype=np.float64)
    if a.ndim == 1:
        if d is None:
            raise ValueError("d is required for packed parameters")
        a = skew_from_upper(a, d)
    eye = np.eye(a.shape[0])
    plus = eye + a
    if np.linalg.cond(plus) > 1e12:
        raise np.linalg.LinAlgError("I + A is numerically singular")
    # U = (I - A) (I + A)^-1, i.e. solve U (I + A) = (I - A)
    return np.linalg.solve(plus.T, (eye - a).T).T


def orthogonal_backward(param, grad_u: np.ndarray, d: Optional[int] = None) -> np.ndarray:
    """Gradient w.r.t. the packed or full parameter given ``dL/dU``.

    With ``B = (I + A)^-1``, ``dU = -(I + U) dA B`` so
    ``dL/dA = -(I + U)^T G B^T``.
    """
    a = np.asarray(param, dtype=np.float64)
    packed = a.ndim == 1
    if packed:
        a = skew_from_upper(a, d)
    eye = np.eye(a.shape[0])
    b = np.linalg.inv(eye + a)
    u = (eye - a) @ b
    ga = -(eye + u).T @ grad_u @ b.T
    if packed:
        return upper_from_skew(ga - ga.T)
    return ga


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ScoresSheet:
    weights: np.ndarray  # (C, C')
    mask: np.ndarray  # (C, C') bool, True = trainable

    def effective(self, head_type: str = SIDE) -> np.ndarray:
        if head_type == INFODISENT:
            return np.abs(self.weights) * self.mask
        return np.maximum(self.weights, 0.0) * self.mask

    def active(self, head_type: str = SIDE) -> np.ndarray:
        return self.effective(head_type) > 0

    def copy(self) -> "ScoresSheet":
        return ScoresSheet(self.weights.copy(), self.mask.copy())


@dataclass
class HeadParams:
    head_type: str
    d: int
    n_protos: int
    n_classes: int
    sheet: ScoresSheet
    expansion: Optional[np.ndarray] = None  # (C', d), SIDE only
    ortho: Optional[np.ndarray] = None  # packed skew parameter, d(d-1)/2
    compose_ortho: bool = False

    def copy(self) -> "HeadParams":
        return HeadParams(
            self.head_type, self.d, self.n_protos, self.n_classes, self.sheet.copy(),
            None if self.expansion is None else self.expansion.copy(),
            None if self.ortho is None else self.ortho.copy(),
            self.compose_ortho,
        )

    def uses_ortho(self) -> bool:
        return self.head_type == INFODISENT or self.compose_ortho

    def projection(self) -> np.ndarray:
        """The effective ``(C', d)`` channel map applied before pooling."""
        if self.head_type == INFODISENT:
            return materialize_orthogonal(self.ortho, self.d)
        if self.compose_ortho:
            return self.expansion @ materialize_orthogonal(self.ortho, self.d)
        return self.expansion

    def blocks(self) -> dict:
        """Trainable arrays by name (views, not copies)."""
        out = {"scores_w": self.sheet.weights}
        if self.expansion is not None:
            out["expansion"] = self.expansion
        if self.uses_ortho():
            out["ortho_a"] = self.ortho
        return out


def init_side_head(d: int, n_protos: int, n_classes: int, seed: int,
                   compose_ortho: bool = False) -> HeadParams:
    if min(d, n_protos, n_classes) < 1:
        raise ValueError("all head dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.normal(1.0, 0.1, size=(n_classes, n_protos))
    expansion = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_protos, d))
    ortho = np.zeros(d * (d - 1) // 2) if compose_ortho else None
    return HeadParams(SIDE, d, n_protos, n_classes,
                      ScoresSheet(w, np.ones_like(w, dtype=bool)),
                      expansion, ortho, compose_ortho)


def init_infodisent_head(d: int, n_classes: int, seed: int) -> HeadParams:
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.1, size=(n_classes, d))
    ortho = rng.normal(0.0, 0.01, size=d * (d - 1) // 2)
    return HeadParams(INFODISENT, d, d, n_classes,
                      ScoresSheet(w, np.ones_like(w, dtype=bool)), None, ortho)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class HeadOutput:
    pooled: np.ndarray  # v, (B, C')
    logits: np.ndarray  # z, (B, C)
    probs: np.ndarray  # p, (B, C)
    argmax_hw: np.ndarray  # (B, C', 2) winning cell per prototype
    argmax_sign: np.ndarray  # (B, C') +1 / -1 / 0
    _cache: dict = field(default_factory=dict, repr=False)


def _batched(features) -> tuple:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise HeadShapeError(f"features must be (d,H,W) or (B,d,H,W), got {x.shape}")
    return x, False


def forward(features, params: HeadParams) -> HeadOutput:
    """Run either head; probabilities follow the head type."""
    x, _single = _batched(features)
    b, d, h, w = x.shape
    if d != params.d:
        raise HeadShapeError(f"features have {d} channels, head expects {params.d}")
    proj = params.projection()
    flat = x.reshape(b, d, h * w)
    pre = np.matmul(proj, flat)
    if not np.all(np.isfinite(pre)):
        raise DataIntegrityError("non-finite pre-pooling activations")
    v, pos_idx, neg_idx, has_pos, has_neg = mxpool_batch(pre)
    w_eff = params.sheet.effective(params.head_type)
    z = v @ w_eff.T
    if not np.all(np.isfinite(z)):
        raise DataIntegrityError("non-finite logits")
    p = softmax_vec(z) if params.head_type == INFODISENT else sigmoid_vec(z)

    win_neg = v < 0
    win = np.where(win_neg, neg_idx, pos_idx)
    sign = np.where(v > 0, 1, np.where(win_neg, -1, 0))
    argmax_hw = np.stack([win // w, win % w], axis=-1)
    cache = dict(flat=flat, proj=proj, pos_idx=pos_idx, neg_idx=neg_idx,
                 has_pos=has_pos, has_neg=has_neg, n=h * w)
    return HeadOutput(v, z, p, argmax_hw, sign, cache)


def side_forward(features, params: HeadParams) -> HeadOutput:
    if params.head_type != SIDE:
        raise ValueError("side_forward needs a SIDE head")
    return forward(features, params)


def infodisent_forward(features, params: HeadParams) -> HeadOutput:
    if params.head_type != INFODISENT:
        raise ValueError("infodisent_forward needs an InfoDisent head")
    if params.n_protos != params.d:
        raise HeadShapeError("InfoDisent requires C' == d")
    return forward(features, params)


def backward(params: HeadParams, out: HeadOutput, grad_logits=None, grad_probs=None) -> dict:
    """Parameter gradients keyed like :meth:`HeadParams.blocks`.

    Pass either ``dL/dz`` or ``dL/dp``. Masked entries and clamped-off
    weights always receive exactly zero.
    """
    if grad_logits is None:
        if grad_probs is None:
            raise ValueError("need grad_logits or grad_probs")
        gp = np.asarray(grad_probs, dtype=np.float64).reshape(out.probs.shape)
        p = out.probs
        if params.head_type == INFODISENT:
            gz = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        else:
            gz = gp * p * (1.0 - p)
    else:
        gz = np.asarray(grad_logits, dtype=np.float64).reshape(out.logits.shape)

    c = out._cache
    sheet = params.sheet
    w_eff = sheet.effective(params.head_type)
    g_weff = gz.T @ out.pooled
    if params.head_type == INFODISENT:
        g_w = g_weff * np.sign(sheet.weights) * sheet.mask
    else:
        g_w = g_weff * (sheet.weights > 0) * sheet.mask

    g_v = gz @ w_eff
    flat = c["flat"]
    # only the two winning cells per (sample, prototype) carry gradient
    fpos = np.take_along_axis(flat, c["pos_idx"][:, None, :], axis=2)  # (B, d, C')
    fneg = np.take_along_axis(flat, c["neg_idx"][:, None, :], axis=2)
    g_proj = (np.einsum("bk,bdk->kd", g_v * c["has_pos"], fpos)
              + np.einsum("bk,bdk->kd", g_v * c["has_neg"], fneg))

    grads = {"scores_w": g_w}
    if params.head_type == INFODISENT:
        grads["ortho_a"] = orthogonal_backward(params.ortho, g_proj, params.d)
    elif params.compose_ortho:
        u = materialize_orthogonal(params.ortho, params.d)
        grads["expansion"] = g_proj @ u.T
        grads["ortho_a"] = orthogonal_backward(params.ortho, params.expansion.T @ g_proj, params.d)
    else:
        grads["expansion"] = g_proj
    return grads


def side_backward(features, params: HeadParams, grad_probs, out: Optional[HeadOutput] = None) -> dict:
    if out is None:
        out = side_forward(features, params)
    return backward(params, out, grad_probs=grad_probs)


def pre_pool_backward(out: HeadOutput, grad_v: np.ndarray) -> np.ndarray:
    """``dL/d(pre-pooling activations)`` for a given ``dL/dv``; used in tests."""
    c = out._cache
    return mxpool_batch_backward(grad_v, c["pos_idx"], c["neg_idx"], c["has_pos"], c["has_neg"], c["n"])
