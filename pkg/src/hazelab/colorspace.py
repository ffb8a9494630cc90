"""RGB -> XYZ -> CIELAB conversion and image quality metrics.

The Lab transform here applies ``f`` directly to the XYZ values produced by
the RGB matrix, with no division by a reference white. Neutral grays
therefore do NOT land on a = b = 0: RGB white maps to roughly
(100, -8.47, -5.70). This is deliberate and matches the loss definition
used for training; do not "fix" it by adding a white point.
"""
import math

import numpy as np

RGB_TO_XYZ = np.array(
    [
        [0.412, 0.358, 0.180],
        [0.213, 0.715, 0.072],
        [0.019, 0.119, 0.950],
    ]
)

# rows give (L, a, b) from (f(X), f(Y), f(Z)); L additionally gets -16
F_TO_LAB = np.array(
    [
        [0.0, 116.0, 0.0],
        [500.0, -500.0, 0.0],
        [0.0, 200.0, -200.0],
    ]
)
LAB_OFFSET = np.array([16.0, 0.0, 0.0])

LAB_THRESHOLD = (6.0 / 29.0) ** 3
_LINEAR_SLOPE = (29.0 / 6.0) ** 2 / 3.0
_LINEAR_OFFSET = 4.0 / 29.0

EXACT = "exact"
SIMPLIFIED = "simplified"


def _check_mode(mode):
    if mode not in (EXACT, SIMPLIFIED):
        raise ValueError(f"mode must be 'exact' or 'simplified', got {mode!r}")


def lab_f(t, mode=EXACT):
    """Lab companding function.

    ``exact`` is the piecewise cube-root / linear form; ``simplified`` is
    the pure cube root. Negative inputs raise ``ValueError`` in both modes.
    Scalars in, scalars out; arrays in, arrays out.
    """
    _check_mode(mode)
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("lab_f is undefined for negative inputs")
    if mode == SIMPLIFIED:
        out = np.cbrt(arr)
    else:
        out = np.where(arr > LAB_THRESHOLD, np.cbrt(arr), _LINEAR_SLOPE * arr + _LINEAR_OFFSET)
    if np.ndim(t) == 0:
        return float(out)
    return out


def rgb_to_xyz(img):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError(f"last axis must hold 3 channels, got {img.shape}")
    return img @ RGB_TO_XYZ.T


def xyz_to_lab(xyz, mode=EXACT):
    f = np.asarray(lab_f(np.asarray(xyz, dtype=np.float64), mode))
    return f @ F_TO_LAB.T - LAB_OFFSET


def rgb_to_lab(img, mode=EXACT):
    """Full chain. Returns float64 Lab with the same leading shape as ``img``."""
    return xyz_to_lab(rgb_to_xyz(np.asarray(img, dtype=np.float64)), mode)


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr(a, b):
    """PSNR in dB with peak 1.0; ``math.inf`` for identical inputs."""
    _check_same_shape(a, b)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the two leading axes
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean single-scale SSIM, computed per channel and averaged.

    Gaussian weighting over valid window positions only (no padding).
    """
    _check_same_shape(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < win_size:
        raise ValueError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = gaussian_window(win_size, sigma)

    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(0, 1))
    return float(per_channel.mean())


def ciede2000(lab1, lab2, kl=1.0, kc=1.0, kh=1.0):
    """CIEDE2000 colour difference.

    Accepts arrays whose last axis is (L, a, b). Returns
    ``(mean, per_pixel)`` where ``per_pixel`` has the leading shape.
    """
    _check_same_shape(lab1, lab2)
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2.0
    c_bar7 = c_bar**7
    g = 0.5 * (1.0 - np.sqrt(c_bar7 / (c_bar7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    # hue is undefined for achromatic colours
    h1p = np.where(c1p == 0, 0.0, h1p)
    h2p = np.where(c2p == 0, 0.0, h2p)

    dl = L2 - L1
    dc = c2p - c1p
    chroma_prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(chroma_prod == 0, 0.0, dh)
    dH = 2.0 * np.sqrt(chroma_prod) * np.sin(np.radians(dh) / 2.0)

    l_bar = (L1 + L2) / 2.0
    cp_bar = (c1p + c2p) / 2.0
    h_sum = h1p + h2p
    h_bar = np.where(
        np.abs(h1p - h2p) <= 180.0,
        h_sum / 2.0,
        np.where(h_sum < 360.0, (h_sum + 360.0) / 2.0, (h_sum - 360.0) / 2.0),
    )
    h_bar = np.where(chroma_prod == 0, h_sum, h_bar)

    t = (
        1.0
        - 0.17 * np.cos(np.radians(h_bar - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * h_bar))
        + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0))
    )
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    cp_bar7 = cp_bar**7
    rc = 2.0 * np.sqrt(cp_bar7 / (cp_bar7 + 25.0**7))
    l50 = (l_bar - 50.0) ** 2
    sl = 1.0 + 0.015 * l50 / np.sqrt(20.0 + l50)
    sc = 1.0 + 0.045 * cp_bar
    sh = 1.0 + 0.015 * cp_bar * t
    rt = -np.sin(np.radians(2.0 * d_theta)) * rc

    tl = dl / (kl * sl)
    tc = dc / (kc * sc)
    th = dH / (kh * sh)
    de = np.sqrt(tl * tl + tc * tc + th * th + rt * tc * th)
    return float(np.mean(de)), de
