"""Training losses: smoothed Dice for masks and a penalty-reduced focal loss for center heatmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, DomainError
from .tensor import Tensor, make_result


@dataclass(frozen=True)
class LossParams:
    dice_eps: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    threshold: float = 0.5
    clamp: float = 1e-7

    def __post_init__(self):
        if self.dice_eps <= 0:
            raise DomainError("dice smoothing must be positive")
        if self.focal_alpha < 0 or self.focal_beta < 0:
            raise DomainError("focal exponents must be non-negative")
        if not 0 < self.threshold < 1:
            raise DomainError("threshold must lie in (0, 1)")


DEFAULT_LOSS = LossParams()


def _target_array(y, like: np.ndarray) -> np.ndarray:
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    if yd.shape != like.shape:
        raise DimensionError(f"prediction {like.shape} and target {yd.shape} differ in shape")
    return yd.astype(like.dtype, copy=False)


def dice_loss(p: Tensor, y, eps: float = DEFAULT_LOSS.dice_eps) -> Tensor:
    """``1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)`` over all elements."""
    pd = p.data
    yd = _target_array(y, pd)
    if not np.isin(yd, (0, 1)).all():
        raise DomainError("dice target must be binary")
    inter = float((pd * yd).sum(dtype=np.float64))
    denom = float(pd.sum(dtype=np.float64)) + float(yd.sum(dtype=np.float64)) + eps
    numer = 2.0 * inter + eps
    loss = np.asarray(1.0 - numer / denom, dtype=pd.dtype)

    def backward(g):
        grad = -(2.0 * yd * denom - numer) / (denom * denom)
        return (np.asarray(g * grad, dtype=pd.dtype),)

    return make_result(loss, (p,), backward, "dice_loss")


def focal_loss_heatmap(p: Tensor, y, alpha: float = DEFAULT_LOSS.focal_alpha,
                       beta: float = DEFAULT_LOSS.focal_beta, clamp: float = DEFAULT_LOSS.clamp) -> Tensor:
    """Penalty-reduced pixelwise focal loss for Gaussian center targets.

    Pixels with target exactly 1 are positives. Probabilities are clamped to
    ``[clamp, 1 - clamp]`` inside the log terms; clamped pixels pass no gradient.
    """
    pd = p.data
    yd = _target_array(y, pd)
    if (yd < 0).any() or (yd > 1).any():
        raise DomainError("heatmap target must lie in [0, 1]")
    pc = np.clip(pd.astype(np.float64), clamp, 1 - clamp)
    inside = (pd > clamp) & (pd < 1 - clamp)
    pos = yd == 1
    neg_w = (1 - yd.astype(np.float64)) ** beta
    n_pos = max(1, int(pos.sum()))
    pos_term = np.where(pos, (1 - pc) ** alpha * np.log(pc), 0.0)
    neg_term = np.where(pos, 0.0, neg_w * pc ** alpha * np.log1p(-pc))
    loss = np.asarray(-(pos_term.sum() + neg_term.sum()) / n_pos, dtype=pd.dtype)

    def backward(g):
        d_pos = -alpha * (1 - pc) ** (alpha - 1) * np.log(pc) + (1 - pc) ** alpha / pc
        d_neg = neg_w * (alpha * pc ** (alpha - 1) * np.log1p(-pc) - pc ** alpha / (1 - pc))
        grad = -np.where(pos, d_pos, d_neg) / n_pos
        grad = np.where(inside, grad, 0.0)
        return (np.asarray(g * grad, dtype=pd.dtype),)

    return make_result(loss, (p,), backward, "focal_loss_heatmap")
