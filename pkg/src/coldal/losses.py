"""DiceCE, the two-view consistency term, and their weighted combination.

The ``*_t`` functions work on torch tensors inside training; the plain
functions take ProbMap/LabelMap and return floats. Reductions accumulate in
float64.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import InvalidArgumentError
from .volume import LabelMap, ProbMap

SMOOTH = 1e-5
PROB_FLOOR = 1e-7


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    """(B, D, H, W) integer labels -> (B, C, D, H, W) one-hot."""
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.permute(0, 4, 1, 2, 3).to(dtype)


def soft_dice_t(p: torch.Tensor, target: torch.Tensor, smooth: float = SMOOTH) -> torch.Tensor:
    """Per-sample, per-class soft Dice loss ``1 - (2 sum(p y) + s) / (sum p + sum y + s)``, shape (B, C)."""
    dims = tuple(range(2, p.ndim))
    inter = (p * target).sum(dims)
    denom = p.sum(dims) + target.sum(dims)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def cross_entropy_t(logp: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Voxel-mean cross-entropy of (soft) targets."""
    return -(target * logp).sum(1).mean()


def dice_ce_t(
    logp: torch.Tensor,
    target: torch.Tensor,
    smooth: float = SMOOTH,
    include_background: bool = True,
) -> torch.Tensor:
    """Soft Dice loss (mean over classes and samples) plus mean voxel cross-entropy.

    ``logp`` holds log-probabilities (B, C, ...); ``target`` holds one-hot or
    soft target probabilities of the same shape.
    """
    if logp.shape != target.shape:
        raise InvalidArgumentError(f"prediction {tuple(logp.shape)} and target {tuple(target.shape)} differ")
    logp = logp.double()
    target = target.double()
    dice = soft_dice_t(logp.exp(), target, smooth)
    if not include_background:
        dice = dice[:, 1:]
    return dice.mean() + cross_entropy_t(logp, target)


def consistency_t(logp_v2: torch.Tensor, probs_v1: torch.Tensor, hard: bool = True, **kw) -> torch.Tensor:
    """DiceCE of the augmented view against the unaugmented view's prediction.

    The v1 prediction is detached; in hard mode it is also argmax-hardened.
    """
    target = probs_v1.detach()
    if hard:
        target = one_hot(target.argmax(1), target.shape[1])
    return dice_ce_t(logp_v2, target, **kw)


def _check_pair(pred: ProbMap, target_shape, what="target"):
    if tuple(pred.shape) != tuple(target_shape):
        raise InvalidArgumentError(f"prediction shape {pred.shape} != {what} shape {tuple(target_shape)}")


def _logp(pred: ProbMap) -> torch.Tensor:
    return torch.from_numpy(np.log(np.maximum(pred.data.astype(np.float64), PROB_FLOOR)))[None]


def dice_ce(pred: ProbMap, target: LabelMap, smooth: float = SMOOTH, include_background: bool = True) -> float:
    _check_pair(pred, target.shape)
    if target.data.size and int(target.data.max()) >= pred.num_classes:
        raise InvalidArgumentError("target class index exceeds prediction channels")
    oh = one_hot(torch.from_numpy(target.data.astype(np.int64))[None], pred.num_classes)
    return float(dice_ce_t(_logp(pred), oh, smooth, include_background))


def consistency_loss(pred_v1: ProbMap, pred_v2: ProbMap, hard: bool = True) -> float:
    _check_pair(pred_v2, pred_v1.shape, "v1")
    if pred_v1.num_classes != pred_v2.num_classes:
        raise InvalidArgumentError("views disagree on class count")
    p1 = torch.from_numpy(pred_v1.data.astype(np.float64))[None]
    return float(consistency_t(_logp(pred_v2), p1, hard))


def total_loss(sup, semi, alpha: float = 1.0, beta: float = 0.001):
    """Weighted objective ``alpha * sup + beta * semi``; works on floats or tensors."""
    if alpha < 0 or beta < 0 or not (math.isfinite(alpha) and math.isfinite(beta)):
        raise InvalidArgumentError(f"loss weights must be finite and >= 0, got alpha={alpha}, beta={beta}")
    return alpha * sup + beta * semi
