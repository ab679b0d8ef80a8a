"""Soft Dice loss and the combined training objective.

The total objective per batch is

    sum_i [ sum_hw L_i^hw  +  lambda_bd * sum_bd w * L_i^hw ]
        + lambda_dice * sum_i Dice_i

where L_i^hw is the weighted bootstrap pixel loss, w the boundary softmax
weights, and Dice the smoothed soft Dice loss on the foreground
probability. Both numpy and tape variants are provided; the tape variants
are what training differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DICE_SMOOTH = 1.0


@dataclass
class LossBreakdown:
    base: float
    boundary: float
    dice: float
    lambda_bd: float
    lambda_dice: float
    total: float


def dice_loss(probs_fg: np.ndarray, mask: np.ndarray,
              smooth: float = DICE_SMOOTH) -> float:
    """1 - (2 sum(p*y) + s) / (sum p + sum y + s). The smoothing term makes
    the empty-vs-empty case come out to exactly 0."""
    p = np.asarray(probs_fg, dtype=np.float64)
    y = np.asarray(mask, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    inter = float((p * y).sum())
    return 1.0 - (2.0 * inter + smooth) / (float(p.sum()) + float(y.sum()) + smooth)


def dice_loss_on_tape(probs_fg, mask: np.ndarray, smooth: float = DICE_SMOOTH):
    """Tape variant of dice_loss; probs_fg is a tensor, mask a constant."""
    tape = probs_fg.tape
    y = tape.const(np.asarray(mask, dtype=np.float64))
    inter = ad.asum(ad.mul(probs_fg, y))
    num = ad.shift(ad.scale(inter, 2.0), smooth)
    den = ad.shift(ad.add(ad.asum(probs_fg), ad.asum(y)), smooth)
    return ad.shift(ad.neg(ad.div(num, den)), 1.0)


def total_loss(pixel_map: np.ndarray, bd_weights: np.ndarray,
               bd_pixel_losses: np.ndarray, dice: float,
               lambda_bd: float, lambda_dice: float) -> LossBreakdown:
    """Assemble the objective from already-computed pieces. bd_weights and
    bd_pixel_losses are aligned over the boundary pixels; an empty boundary
    contributes 0."""
    bd_weights = np.asarray(bd_weights)
    bd_pixel_losses = np.asarray(bd_pixel_losses)
    if bd_weights.shape != bd_pixel_losses.shape:
        raise ValueError(f"boundary weights {bd_weights.shape} vs losses "
                         f"{bd_pixel_losses.shape}")
    base = float(np.asarray(pixel_map).sum())
    boundary = float((bd_weights * bd_pixel_losses).sum())
    total = base + lambda_bd * boundary + lambda_dice * dice
    return LossBreakdown(base=base, boundary=boundary, dice=dice,
                         lambda_bd=lambda_bd, lambda_dice=lambda_dice,
                         total=total)
