"""Reconstruction and light-map losses with analytic gradients.

All losses average over pixels and the three colour channels, so a
(H, W, 3) input is normalized by 3 * H * W. Inputs are channel-last unless
``channel_axis`` says otherwise; network tensors are (N, 3, H, W) and use
``channel_axis=1``.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .colorspace import F_TO_LAB, RGB_TO_XYZ, SIMPLIFIED, rgb_to_lab

log = logging.getLogger(__name__)

LINEAR = "linear"
LAB = "lab"


@dataclass
class LossValue:
    value: float
    grad: Optional[np.ndarray] = None
    per_pixel: Optional[np.ndarray] = None


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def mse_loss(a, b):
    """Mean squared error over every element; gradient w.r.t. ``a``."""
    _same_shape(a, b)
    a = np.asarray(a)
    diff = a - np.asarray(b, dtype=a.dtype)
    n = diff.size
    return LossValue(float(np.mean(diff.astype(np.float64) ** 2)), grad=(2.0 / n) * diff)


def loss_j_lab(J_est, J_gt):
    """Mean squared Lab difference between two images (cube-root Lab)."""
    for arr in (J_est, J_gt):
        if np.any(np.asarray(arr) < 0):
            raise ValueError("negative channel value: cube root undefined")
    return loss_j(J_est, J_gt, LAB)


def _to_space(x, space):
    if space == LINEAR:
        return np.asarray(x, dtype=np.float64)
    if space == LAB:
        return rgb_to_lab(x, SIMPLIFIED)
    raise ValueError(f"space must be 'linear' or 'lab', got {space!r}")


def loss_j(J_est, J_gt, space=LINEAR):
    """Channel-mean squared error of two images in the chosen space."""
    _same_shape(J_est, J_gt)
    d = _to_space(J_est, space) - _to_space(J_gt, space)
    per_pixel = np.sum(d * d, axis=-1) / 3.0
    return LossValue(float(per_pixel.mean()), per_pixel=per_pixel)


def loss_a_weighted(A_est, A_gt, t, space=LINEAR):
    """Light-map error weighted per pixel by (1 - 1/t)^2.

    With ``space='linear'`` this equals :func:`loss_j` on the images that
    the inverse haze model produces from the two light maps.
    """
    _same_shape(A_est, A_gt)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != np.shape(A_est)[:-1]:
        raise ValueError(f"transmission shape {t.shape} does not match {np.shape(A_est)[:-1]}")
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("transmission must lie in (0, 1]")
    d = _to_space(A_est, space) - _to_space(A_gt, space)
    weight = (1.0 - 1.0 / t) ** 2
    per_pixel = weight * np.sum(d * d, axis=-1) / 3.0
    return LossValue(float(per_pixel.mean()), per_pixel=per_pixel)


def fwb_loss(A_est, A_gt, channel_axis=-1, floor=None):
    """Lab-space light-map loss with its gradient w.r.t. ``A_est``.

    Both maps go through the RGB->XYZ matrix and a plain cube root before
    the Lab matrix. Non-positive channels raise unless ``floor`` is given,
    in which case ``A_est`` is clamped up to ``floor`` (logged) and the
    gradient at the clamped value is passed straight through so the
    estimate can still be pushed back into the domain.
    """
    _same_shape(A_est, A_gt)
    dtype = np.asarray(A_est).dtype if np.asarray(A_est).dtype.kind == "f" else np.float64
    est = np.moveaxis(np.asarray(A_est, dtype=np.float64), channel_axis, -1)
    gt = np.moveaxis(np.asarray(A_gt, dtype=np.float64), channel_axis, -1)
    if est.shape[-1] != 3:
        raise ValueError(f"expected 3 colour channels, got {est.shape[-1]}")
    if np.any(gt <= 0):
        raise ValueError("ground-truth light map must be positive")
    if np.any(est <= 0) or (floor is not None and np.any(est < floor)):
        if floor is None:
            raise ValueError("estimated light map must be positive")
        n_low = int(np.count_nonzero(est < floor))
        log.warning("fwb_loss: %d light values below %.3g floored", n_low, floor)
        est = np.maximum(est, floor)

    xyz_est = est @ RGB_TO_XYZ.T
    f_est = np.cbrt(xyz_est)
    f_gt = np.cbrt(gt @ RGB_TO_XYZ.T)
    d = (f_est - f_gt) @ F_TO_LAB.T  # the -16 offset cancels
    count = d.size
    per_pixel = np.sum(d * d, axis=-1) / 3.0
    value = float(np.sum(d * d) / count)

    g_lab = (2.0 / count) * d
    g_f = g_lab @ F_TO_LAB
    g_xyz = g_f / (3.0 * f_est * f_est)
    g_rgb = g_xyz @ RGB_TO_XYZ
    grad = np.moveaxis(g_rgb, -1, channel_axis).astype(dtype, copy=False)
    return LossValue(value, grad=grad, per_pixel=per_pixel)

