"""Focal + dice supervision for two-channel anomaly maps."""
from __future__ import annotations

import torch

from .errors import ConfigError, InvalidMask
from .heads import ABNORMAL

FOCAL_EPS = 1e-8


def _check_mask(mask: torch.Tensor) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise InvalidMask("ground-truth mask must be binary")


def focal_loss(prob: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean of ``-(1 - p_t)^gamma * log(p_t)`` over all pixels.

    ``prob`` is ``(B, 2, h, w)``, ``mask`` ``(B, h, w)``. ``p_t`` is the
    probability assigned to the true class; the log is clamped at 1e-8.
    """
    _check_mask(mask)
    if gamma < 0:
        raise ConfigError("focal gamma must be >= 0")
    m = mask.to(prob.dtype)
    p_t = prob[:, ABNORMAL] * m + prob[:, 1 - ABNORMAL] * (1 - m)
    logp = p_t.clamp_min(FOCAL_EPS).log()
    if gamma == 0:
        return -logp.mean()
    return -((1 - p_t) ** gamma * logp).mean()


def dice_loss(abnormal: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice on the abnormal channel ``(B, h, w)``, computed per image then averaged."""
    _check_mask(mask)
    m = mask.to(abnormal.dtype).flatten(1)
    a = abnormal.flatten(1)
    inter = (a * m).sum(dim=1)
    score = (2 * inter + smooth) / (a.sum(dim=1) + m.sum(dim=1) + smooth)
    return (1 - score).mean()


def total_loss(m1, m2, mask, gamma: float = 2.0, smooth: float = 1.0, with_terms: bool = False):
    """Sum of focal and dice terms over every tapped layer of both branches.

    With ``with_terms`` also returns the four per-branch sums as a dict.
    """
    m1, m2 = list(m1), list(m2)
    if m2 and len(m1) != len(m2):
        raise ConfigError(f"branch layer counts differ: {len(m1)} vs {len(m2)}")
    terms = {}
    for tag, maps in (("m1", m1), ("m2", m2)):
        focal = sum((focal_loss(m, mask, gamma) for m in maps), start=mask.new_zeros((), dtype=m1[0].dtype))
        dice = sum((dice_loss(m[:, ABNORMAL], mask, smooth) for m in maps), start=mask.new_zeros((), dtype=m1[0].dtype))
        terms[f"loss_focal_{tag}"] = focal
        terms[f"loss_dice_{tag}"] = dice
    total = terms["loss_focal_m1"] + terms["loss_dice_m1"] + terms["loss_focal_m2"] + terms["loss_dice_m2"]
    return (total, terms) if with_terms else total
