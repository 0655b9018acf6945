"""Segmentation losses: soft Dice and generalized Dice.

Both are composed from differentiable primitives so the autodiff core,
not a hand-derived adjoint, produces their gradients.  Targets are
constants (no gradient flows into them).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1e-5


def soft_dice_loss(pred: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).

    pred holds probabilities in [0, 1]; target is a binary mask of the
    same shape (any rank; a batch can simply be folded into the shape).
    """
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float32))
    if t.shape != pred.shape:
        raise ValueError(f"dice: pred {pred.shape} vs target {t.shape}")
    inter = T.tsum(T.mul(pred, t))
    denom = T.tsum(pred) + T.tsum(t)
    return 1.0 - (inter * 2.0 + eps) / (denom + eps)


def generalized_dice_loss(pred: Tensor, target_onehot, eps: float = DICE_EPS) -> Tensor:
    """Multi-class Dice with inverse-squared-volume class weights.

    pred: [L, *spatial] per-voxel probabilities summing to 1 over labels;
    target_onehot: same shape, one-hot.  Class weight w_l =
    1 / (sum(t_l) + eps)^2, which caps at 1/eps^2 for empty classes.
    """
    t = target_onehot if isinstance(target_onehot, Tensor) else Tensor(
        np.asarray(target_onehot, dtype=np.float32))
    if t.shape != pred.shape:
        raise ValueError(f"gdl: pred {pred.shape} vs target {t.shape}")
    sp_axes = tuple(range(1, pred.ndim))
    t_vol = t.data.sum(axis=sp_axes, dtype=np.float64)
    w = Tensor((1.0 / (t_vol + eps) ** 2).astype(np.float32))

    inter = T.tsum(T.mul(pred, t), axes=sp_axes)           # [L]
    sums = T.tsum(pred, axes=sp_axes) + T.tsum(t, axes=sp_axes)
    num = T.tsum(T.mul(inter, w))
    den = T.tsum(T.mul(sums, w))
    return 1.0 - (num * 2.0) / den
