"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .data import DataError


def check_images(images) -> np.ndarray:
    """Return ``images`` as float32 ``(N, 3, H, W)`` in [0, 1].

    A single ``(3, H, W)`` image is promoted to a batch of one.
    """
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise DataError(f"images must be shaped (N, 3, H, W), got {x.shape}")
    if x.shape[0] == 0:
        raise DataError("no images supplied")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise DataError(f"image size {x.shape[2]}x{x.shape[3]} must be divisible by 4")
    if not np.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise DataError("image values must be finite and lie in [0, 1]")
    return x


def check_masks(masks, images: np.ndarray | None = None) -> np.ndarray:
    """Return binary float32 masks ``(N, 1, H, W)``; ``(N, H, W)`` is accepted."""
    m = np.asarray(masks, dtype=np.float32)
    if m.ndim == 3:
        m = m[:, None]
    if m.ndim != 4 or m.shape[1] != 1:
        raise DataError(f"masks must be shaped (N, 1, H, W), got {m.shape}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise DataError("masks must be binary (0 or 1)")
    if images is not None and (m.shape[0] != images.shape[0] or m.shape[2:] != images.shape[2:]):
        raise DataError(f"masks {m.shape} do not match images {images.shape}")
    return m
