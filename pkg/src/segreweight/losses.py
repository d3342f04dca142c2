"""Per-pixel cross-entropy, clean and weighted losses, and the Dice score."""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .ndcore import ops
from .ndcore.autodiff import Var, value_of

PROB_FLOOR = 1e-12


def pixel_ce(prob, mask):
    """Loss map ``-log(max(prob[true class], 1e-12))``.

    ``prob`` is ``[B,2,H,W]`` (or a single ``[2,H,W]`` map) and ``mask`` the
    matching ``[B,H,W]`` / ``[H,W]`` binary labels.
    """
    mask = np.asarray(mask)
    single = len(prob.shape) == 3
    if single:
        if isinstance(prob, Var):
            raise ContractError("pixel_ce on traced values needs a batch axis")
        prob, mask = prob[None], mask[None]
    if tuple(prob.shape[:1]) + tuple(prob.shape[2:]) != mask.shape:
        raise ContractError(f"prob shape {tuple(prob.shape)} and mask shape {mask.shape} disagree")
    out = ops.pixel_nll(prob, mask, eps=PROB_FLOOR)
    return out[0] if single else out


def clean_loss(probs, masks):
    """Mean over images of each image's mean pixel loss."""
    if probs.shape[0] == 0:
        raise ContractError("clean_loss needs a nonempty batch")
    return ops.mean(pixel_ce(probs, masks))


def weighted_loss(lossmaps, weights):
    """``sum_i sum_p w_ip * l_ip``; the weights carry their own normalization."""
    w = np.asarray(value_of(weights))
    if w.shape != tuple(lossmaps.shape):
        raise ContractError(f"weight shape {w.shape} != loss-map shape {tuple(lossmaps.shape)}")
    if np.any(w < 0):
        raise ContractError("weights must be nonnegative")
    return ops.weighted_sum(lossmaps, weights)


def dice(pred, gt) -> float:
    """2|A∩B| / (|A|+|B|), and 1.0 when both masks are empty."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom
