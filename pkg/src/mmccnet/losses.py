"""Segmentation losses built from differentiable tensor operations.

Every loss is evaluated per image (pixel sums) and, for training, averaged
over the batch. A 4-D input ``(N, C, H, W)`` is treated as N images; any
other shape is treated as one image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOSS_KINDS = ("l2dice", "dice", "bce", "joint", "joint_l2", "focal_joint")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "joint"
    alpha: float = 0.22
    gamma: float = 1.9
    probability_clamp: float = 1e-7
    focal_alpha: float | None = None  # class-balance weight of the focal BCE term; defaults to alpha

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.probability_clamp < 0.5:
            raise ValueError("probability_clamp must lie in (0, 0.5)")

    @property
    def bce_alpha(self) -> float:
        return self.alpha if self.focal_alpha is None else self.focal_alpha


def _tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    p = _tensor(pred)
    y = _tensor(target, dtype=p.dtype)
    if p.shape != y.shape:
        raise T.ShapeError(f"prediction shape {p.shape} does not match target shape {y.shape}")
    if p.ndim == 4:
        n = p.shape[0]
        return p.reshape(n, -1), y.reshape(n, -1)
    return p.reshape(1, -1), y.reshape(1, -1)


def _sums(x: Tensor) -> Tensor:
    return x.sum(axis=1)


def _reduce(per_image: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_image.mean()
    if reduction == "sum":
        return per_image.sum()
    if reduction == "none":
        return per_image
    raise ValueError(f"unknown reduction {reduction!r}")


# -- Dice coefficient and its squared-error loss ------------------------------


def dice_per_image(pred, target) -> Tensor:
    """``2 sum(p*t) / (sum(p^2) + sum(t^2))`` per image; 1 when both are empty."""
    p, y = _pair(pred, target)
    num = 2.0 * _sums(p * y)
    den = _sums(p * p) + _sums(y * y)
    return T.safe_divide(num, den, 1.0)


def dice_coefficient_img(pred, target) -> Tensor:
    d = dice_per_image(pred, target)
    if d.shape != (1,):
        raise T.ShapeError("dice_coefficient_img takes a single image; use dice_per_image for batches")
    return d.reshape(())


def l2_dice_loss(preds, targets, reduction: str = "sum") -> Tensor:
    """Squared Dice deficit ``sum_img (1 - D_img)^2``."""
    p = _tensor(preds)
    if p.size == 0 or (p.ndim == 4 and p.shape[0] == 0):
        raise ValueError("l2_dice_loss needs a non-empty batch")
    deficit = 1.0 - dice_per_image(preds, targets)
    return _reduce(deficit * deficit, reduction)


def l2_dice_grad(pred, target) -> np.ndarray:
    """Analytic gradient of ``(1 - D)^2`` with respect to each prediction pixel.

    Uses ``dD/dp_i = 2 (t_i S - 2 p_i I) / S^2`` with ``S = sum p^2 + sum t^2``
    and ``I = sum p t``. Batched inputs get one gradient per image.
    """
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != t.shape:
        raise T.ShapeError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    flat_p = p.reshape(p.shape[0], -1) if p.ndim == 4 else p.reshape(1, -1)
    flat_t = t.reshape(flat_p.shape)
    s = (flat_p**2).sum(axis=1, keepdims=True) + (flat_t**2).sum(axis=1, keepdims=True)
    inter = (flat_p * flat_t).sum(axis=1, keepdims=True)
    empty = s == 0
    s_safe = np.where(empty, 1.0, s)
    d = np.where(empty, 1.0, 2 * inter / s_safe)
    dd = 2 * (flat_t * s_safe - 2 * flat_p * inter) / s_safe**2
    grad = np.where(empty, 0.0, -2 * (1 - d) * dd)
    return grad.reshape(p.shape)


def dice_partial_unscaled(pred, target) -> np.ndarray:
    """``(t_i S - 2 p_i I) / S^2``: the Dice partial without its leading factor 2.

    Kept to document that this commonly quoted form is exactly half of the
    true derivative of the Dice coefficient.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    s = (p**2).sum() + (t**2).sum()
    inter = (p * t).sum()
    return ((t * s - 2 * p * inter) / s**2).reshape(np.shape(pred))


# -- Jaccard-style Dice loss, BCE, joint and focal forms ----------------------


def _overlap_terms(p: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    inter = _sums(y * p)
    den = _sums(y * y) + _sums(p * p) - inter
    return inter, den


def dice_loss(pred, target, reduction: str = "mean") -> Tensor:
    """``1 - sum(yx) / (sum(y^2) + sum(x^2) - sum(yx))``; 0 when both are empty."""
    p, y = _pair(pred, target)
    inter, den = _overlap_terms(p, y)
    return _reduce(1.0 - T.safe_divide(inter, den, 1.0), reduction)


def bce_loss(pred, target, clamp: float = 1e-7, reduction: str = "mean") -> Tensor:
    """Pixel-summed binary cross-entropy per image."""
    p, y = _pair(pred, target)
    x = T.clamp(p, clamp, 1.0 - clamp)
    per_pixel = y * T.log(x) + (1.0 - y) * T.log(1.0 - x)
    return _reduce(-_sums(per_pixel), reduction)


def focal_joint_loss(pred, target, config: LossConfig = LossConfig(), reduction: str = "mean") -> Tensor:
    """Focal Dice term plus class-balanced focal cross-entropy.

    ``alpha * (1 - sum(y x (1-x)^g) / (sum y^2 + sum x^2 - sum yx))
    + sum(-a_f y log x - (1 - a_f) x^g (1 - y) log(1 - x))``
    """
    p, y = _pair(pred, target)
    a, g, af = config.alpha, config.gamma, config.bce_alpha
    inter, den = _overlap_terms(p, y)
    focal_inter = _sums(y * p * (1.0 - p) ** g)
    dice_term = a * (1.0 - T.safe_divide(focal_inter, den, 1.0))
    x = T.clamp(p, config.probability_clamp, 1.0 - config.probability_clamp)
    ce = -af * y * T.log(x) - (1.0 - af) * (p**g) * (1.0 - y) * T.log(1.0 - x)
    return _reduce(dice_term + _sums(ce), reduction)


def joint_loss(pred, target, config: LossConfig = LossConfig(), reduction: str = "mean") -> Tensor:
    """Loss selected by ``config.kind``.

    ``joint`` is Dice + BCE; ``joint_l2`` adds the squared Dice deficit;
    ``focal_joint`` is :func:`focal_joint_loss`.
    """
    kind = config.kind
    clamp = config.probability_clamp
    if kind == "l2dice":
        return l2_dice_loss(pred, target, reduction=reduction)
    if kind == "dice":
        return dice_loss(pred, target, reduction)
    if kind == "bce":
        return bce_loss(pred, target, clamp, reduction)
    if kind == "joint":
        return dice_loss(pred, target, reduction) + bce_loss(pred, target, clamp, reduction)
    if kind == "joint_l2":
        return (
            dice_loss(pred, target, reduction)
            + bce_loss(pred, target, clamp, reduction)
            + l2_dice_loss(pred, target, reduction=reduction)
        )
    if kind == "focal_joint":
        return focal_joint_loss(pred, target, config, reduction)
    raise ValueError(f"unknown loss kind {kind!r}")
