"""Masked segmentation losses: weighted BCE, Dice, focal, and their composite.

Every loss normalizes by the count of valid pixels (label != -1); masked
pixels influence neither the value nor any gradient. Targets may be soft
(in [0,1]) on valid pixels. Logits are pre-sigmoid.
"""

import warnings

import numpy as np

from . import tensor as T
from .errors import EmptyMaskWarning, ShapeMismatchError
from .tensor import Tensor

COMPOSITE_WEIGHTS = {"wbce": 0.4, "dice": 0.3, "focal": 0.3}


def valid_mask(y: np.ndarray) -> np.ndarray:
    """Boolean mask of scorable pixels, true where the label is not -1."""
    return np.asarray(y) != -1


def _prep(logits: Tensor, targets, mask):
    shape = logits.data.shape
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if t.size != logits.data.size or m.size != logits.data.size:
        raise ShapeMismatchError(
            f"targets/mask size {t.size}/{m.size} != logits size {logits.data.size}"
        )
    t = t.reshape(shape)
    m = m.reshape(shape)
    n_valid = int(m.sum())
    if n_valid == 0:
        warnings.warn("loss over zero valid pixels, returning 0", EmptyMaskWarning)
    dt = logits.data.dtype
    mf = m.astype(dt)
    tc = np.where(m, t, 0.0).astype(dt)  # neutralized at masked pixels
    return tc, mf, n_valid


def wbce(logits: Tensor, targets, mask, pos_weight: float = 3.0) -> Tensor:
    """Mean over valid pixels of -[w*t*log(sig(z)) + (1-t)*log(1-sig(z))]."""
    tc, mf, n = _prep(logits, targets, mask)
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    px = Tensor(pos_weight * tc) * T.softplus(-logits) + Tensor(1.0 - tc) * T.softplus(logits)
    return T.sum_all(px * Tensor(mf)) * (1.0 / n)


def dice_loss(logits: Tensor, targets, mask, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) over valid pixels."""
    tc, mf, n = _prep(logits, targets, mask)
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    p = T.sigmoid(logits) * Tensor(mf)
    num = T.sum_all(p * Tensor(tc)) * 2.0 + eps
    den = T.sum_all(p) + float((tc * mf).sum(dtype=np.float64)) + eps
    return 1.0 - num / den


def focal_loss(logits: Tensor, targets, mask, gamma: float = 2.0) -> Tensor:
    """Mean over valid pixels of (1 - p_t)^gamma times the soft BCE term.

    The modulating factor binarizes soft targets at 0.5 (p_t from the hard
    label); the log term keeps the soft target.
    """
    tc, mf, n = _prep(logits, targets, mask)
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    hard = (tc >= 0.5).astype(logits.data.dtype)
    p = T.sigmoid(logits)
    # p_t = p for hard 1, (1 - p) for hard 0, written as one affine blend
    p_t = Tensor(1.0 - hard) + Tensor(2.0 * hard - 1.0) * p
    modulator = T.pow_const(1.0 - p_t, gamma)
    bce = Tensor(tc) * T.softplus(-logits) + Tensor(1.0 - tc) * T.softplus(logits)
    return T.sum_all(modulator * bce * Tensor(mf)) * (1.0 / n)


def composite_loss(logits: Tensor, targets, mask) -> tuple[Tensor, dict]:
    """0.4*wbce + 0.3*dice + 0.3*focal, plus the three addends for logging."""
    parts = {
        "wbce": wbce(logits, targets, mask),
        "dice": dice_loss(logits, targets, mask),
        "focal": focal_loss(logits, targets, mask),
    }
    total = (parts["wbce"] * COMPOSITE_WEIGHTS["wbce"]
             + parts["dice"] * COMPOSITE_WEIGHTS["dice"]
             + parts["focal"] * COMPOSITE_WEIGHTS["focal"])
    return total, parts
