"""Dark-channel-prior dehazing and the light-map retrofit.

The DCP defaults (15 px patch, omega 0.95, t0 0.1, top 0.1 % of the dark
channel for airlight) are the usual ones for the method. There is no
soft matting or guided filtering of ``t``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter

from . import haze


@dataclass(frozen=True)
class DcpParams:
    patch: int = 15
    omega: float = 0.95
    t0: float = 0.1
    airlight_fraction: float = 0.001

    def __post_init__(self):
        if self.patch < 3 or self.patch % 2 == 0:
            raise ValueError(f"patch must be odd and >= 3, got {self.patch}")
        if not 0 < self.omega <= 1:
            raise ValueError(f"omega must be in (0, 1], got {self.omega}")
        if not 0 < self.t0 < 1:
            raise ValueError(f"t0 must be in (0, 1), got {self.t0}")
        if not 0 < self.airlight_fraction <= 0.05:
            raise ValueError(f"airlight fraction must be in (0, 0.05], got {self.airlight_fraction}")


def dark_channel(img, patch=15):
    """Channel minimum followed by a patch x patch minimum (edge-replicated)."""
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd, got {patch}")
    img = np.asarray(img)
    return minimum_filter(img.min(axis=2), size=patch, mode="nearest")


def estimate_airlight_scalar(img, params=DcpParams()):
    """Brightest input pixel among the top dark-channel pixels.

    Candidates are the ``airlight_fraction`` share (at least one pixel) with
    the largest dark channel; the winner has the largest R+G+B. Ties go to
    the smallest row-major index at both stages.
    """
    img = np.asarray(img)
    flat = img.reshape(-1, 3)
    dark = dark_channel(img, params.patch).ravel()
    n = max(1, int(np.floor(params.airlight_fraction * dark.size)))
    candidates = np.sort(np.argsort(-dark, kind="stable")[:n])
    best = candidates[np.argmax(flat[candidates].sum(axis=1))]
    return flat[best].copy()


def dcp_transmission(img, A, params=DcpParams()):
    A = np.asarray(A, dtype=np.float64)
    if np.any(A <= 0):
        raise ValueError("atmospheric light must be positive")
    t = 1.0 - params.omega * dark_channel(np.asarray(img) / A, params.patch)
    return np.maximum(t, params.t0)


def dcp_dehaze(img, params=DcpParams()):
    """Returns a dict with raw (unclamped) ``J``, the transmission ``t`` and ``A``."""
    A = estimate_airlight_scalar(img, params)
    t = dcp_transmission(img, A, params)
    J = haze.dehaze_scalar(img, t, A)
    return {"J": J, "t": t, "A": A}


def retrofit_dehaze(img, t, A_map):
    """Invert the haze model using a classical ``t`` and a per-pixel light map."""
    return haze.dehaze_map(img, t, A_map, t_floor=haze.T_FLOOR)
