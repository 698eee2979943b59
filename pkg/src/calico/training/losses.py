"""Text cross-entropy, focal and Dice mask losses, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from calico.errors import DimensionError, LossError, TrainingDataError
from calico.numerics import tensor as T
from calico.numerics.tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_text: float = 1.0
    lambda_focal: float = 2.0
    lambda_dice: float = 0.5
    gamma: float = 2.0
    dice_eps: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_text", "lambda_focal", "lambda_dice", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def text_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token cross-entropy over the scored rows.

    ``targets[i]`` is the id expected after row ``i`` (already shifted);
    ``mask`` selects which rows count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and targets {targets.shape} do not align")
    mask = np.ones(len(targets), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise LossError("every position is masked out; nothing to score")
    logp = T.log_softmax(logits[rows], axis=-1)
    picked = logp[(np.arange(rows.size), targets[rows])]
    return -picked.mean()


def _binary_target(target, shape) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != tuple(shape):
        raise DimensionError(f"target {t.shape} does not match prediction {tuple(shape)}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise LossError("mask targets must be binary")
    return t


def focal_loss(logits: Tensor, target, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of (1 - p_t)^gamma * (-ln p_t), p_t = sigmoid prob of the true class.

    With s = 2t - 1: 1 - p_t = sigmoid(-s x) and -ln p_t = softplus(-s x).
    """
    t = _binary_target(target, logits.shape)
    z = logits * (1.0 - 2.0 * t)
    ce = T.softplus(z)
    if gamma == 0:
        return ce.mean()
    return (T.sigmoid(z) ** gamma * ce).mean()


def dice_loss(probs: Tensor, target, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    t = _binary_target(target, probs.shape)
    return _dice(probs, t, eps, axis=None)


def _dice(probs: Tensor, t: np.ndarray, eps: float, axis) -> Tensor:
    if probs.data.min() < 0 or probs.data.max() > 1:
        raise LossError("dice_loss expects probabilities in [0, 1]")
    inter = (probs * t).sum(axis=axis)
    return 1.0 - (inter * 2.0 + eps) / (probs.sum(axis=axis) + (t.sum(axis=axis) + eps))


@dataclass
class LossBreakdown:
    total: Tensor
    text: float
    focal: float
    dice: float
    n_masks: int


def combined_loss(text: Tensor, pred_logits: Sequence[Tensor], gt_masks: Sequence, w: LossWeights = LossWeights()
                  ) -> LossBreakdown:
    """lambda_text * text + lambda_focal * mean focal + lambda_dice * mean Dice over mask pairs."""
    if len(pred_logits) != len(gt_masks):
        raise TrainingDataError(f"{len(pred_logits)} predicted masks for {len(gt_masks)} ground-truth masks")
    total = text * w.lambda_text
    focal_v = dice_v = 0.0
    if pred_logits:
        # all masks share the image extents, so the per-mask means batch exactly:
        # the focal mean over every pixel equals the mean of per-mask focal means
        for p, g in zip(pred_logits, gt_masks):
            if np.shape(g) != p.shape:
                raise DimensionError(f"target {np.shape(g)} does not match prediction {p.shape}")
        logits = T.stack(list(pred_logits))
        t = _binary_target(np.stack([np.asarray(g, dtype=np.float64) for g in gt_masks]), logits.shape)
        focal_mean = focal_loss(logits, t, w.gamma)
        dice_mean = _dice(T.sigmoid(logits), t, w.dice_eps, axis=(1, 2)).mean()
        total = total + focal_mean * w.lambda_focal + dice_mean * w.lambda_dice
        focal_v, dice_v = focal_mean.item(), dice_mean.item()
    return LossBreakdown(total, text.item(), focal_v, dice_v, len(pred_logits))
