"""Tone-mapped image quality index (TMQI).

Follows the published reference implementation: multi-scale structural
fidelity against the HDR luminance plus a statistical-naturalness term from
the LDR mean and block contrast. LDR luminance is measured on a 0..255 scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from ..tonemap import luminance

A = 0.8012
ALPHA = 0.3046
BETA = 0.7088
LEVEL_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_C1, _C2 = 0.01, 10.0
_BRIGHT_MU, _BRIGHT_SIGMA = 115.94, 27.99
_CONTRAST_A, _CONTRAST_B = 4.4, 10.1
_BLOCK = 11
_CONTRAST_SCALE = 64.29


@dataclass(frozen=True)
class TmqiResult:
    Q: float
    S: float
    N: float


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, window):
    full = ndimage.correlate(img, window, mode="constant")
    k = window.shape[0] // 2
    return full[k:img.shape[0] - k, k:img.shape[1] - k]


def _local_structure(hdr_l, ldr_l, window, freq):
    mu1 = _filter_valid(hdr_l, window)
    mu2 = _filter_valid(ldr_l, window)
    s1 = np.sqrt(np.maximum(_filter_valid(hdr_l * hdr_l, window) - mu1 * mu1, 0))
    s2 = np.sqrt(np.maximum(_filter_valid(ldr_l * ldr_l, window) - mu2 * mu2, 0))
    s12 = _filter_valid(hdr_l * ldr_l, window) - mu1 * mu2
    csf = 100.0 * 2.6 * (0.0192 + 0.114 * freq) * np.exp(-((0.114 * freq) ** 1.1))
    u = 128.0 / (1.4 * csf)
    p1 = stats.norm.cdf(s1, u, u / 3)
    p2 = stats.norm.cdf(s2, u, u / 3)
    smap = ((2 * p1 * p2 + _C1) / (p1 * p1 + p2 * p2 + _C1)) * ((s12 + _C2) / (s1 * s2 + _C2))
    return float(smap.mean())


def _halve(img):
    """2x2 box filter with symmetric edges, keeping every other sample."""
    padded = np.pad(img, ((0, 1), (0, 1)), mode="symmetric")
    avg = 0.25 * (padded[:-1, :-1] + padded[1:, :-1] + padded[:-1, 1:] + padded[1:, 1:])
    return avg[::2, ::2]


def structural_fidelity(hdr_l, ldr_l, window=None):
    """Weighted product of per-scale structural scores.

    Scales whose image is smaller than the window are dropped and the
    remaining weights renormalised, so small images still get a score.
    """
    if window is None:
        window = gaussian_window()
    freq = 32.0
    scores = []
    for _ in range(len(LEVEL_WEIGHTS)):
        freq /= 2
        if min(hdr_l.shape) < window.shape[0]:
            break
        scores.append(_local_structure(hdr_l, ldr_l, window, freq))
        hdr_l, ldr_l = _halve(hdr_l), _halve(ldr_l)
    if not scores:
        raise ValueError(f"image is smaller than the {window.shape[0]}x{window.shape[0]} TMQI window")
    weights = LEVEL_WEIGHTS[: len(scores)]
    weights = weights / weights.sum() if len(scores) < len(LEVEL_WEIGHTS) else weights
    scores = np.clip(np.array(scores), 0.0, None)
    return float(np.prod(scores ** weights)), scores


def _block_std_mean(img, block=_BLOCK):
    """Pixel-weighted mean of per-block sample standard deviations."""
    h, w = img.shape
    total = 0.0
    for r in range(0, h, block):
        for c in range(0, w, block):
            tile = img[r:r + block, c:c + block]
            sd = tile.std(ddof=1) if tile.size > 1 else 0.0
            total += sd * tile.size
    return total / img.size


def statistical_naturalness(ldr_l):
    """Brightness and contrast likelihoods of a 0..255 luminance plane."""
    mean = ldr_l.mean()
    sig = _block_std_mean(ldr_l)
    mode = (_CONTRAST_A - 1) / (_CONTRAST_A + _CONTRAST_B - 2)
    pc = stats.beta.pdf(sig / _CONTRAST_SCALE, _CONTRAST_A, _CONTRAST_B) / stats.beta.pdf(
        mode, _CONTRAST_A, _CONTRAST_B
    )
    pb = stats.norm.pdf(mean, _BRIGHT_MU, _BRIGHT_SIGMA) / stats.norm.pdf(
        _BRIGHT_MU, _BRIGHT_MU, _BRIGHT_SIGMA
    )
    return float(pb * pc)


def hdr_luminance_plane(hdr):
    """HDR luminance stretched to [0, 2**32 - 1]."""
    lum = luminance(hdr)
    lo, hi = lum.min(), lum.max()
    if hi <= lo:
        return np.zeros_like(lum)
    return np.round((2.0**32 - 1) / (hi - lo)) * (lum - lo)


def tmqi(ldr, hdr, window=None):
    """Score an LDR rendering (values in [0, 1]) against its HDR source."""
    ldr = np.asarray(ldr, dtype=np.float64)
    hdr = np.asarray(hdr, dtype=np.float64)
    if ldr.shape[:2] != hdr.shape[:2]:
        raise ValueError(f"dimension mismatch: LDR {ldr.shape[:2]}, HDR {hdr.shape[:2]}")
    ldr_l = luminance(ldr) * 255.0 if ldr.ndim == 3 else ldr * 255.0
    hdr_l = hdr_luminance_plane(hdr) if hdr.ndim == 3 else hdr_luminance_plane(hdr[..., None].repeat(3, -1))
    s, _ = structural_fidelity(hdr_l, ldr_l, window)
    n = statistical_naturalness(ldr_l)
    q = A * s**ALPHA + (1 - A) * n**BETA
    return TmqiResult(float(q), s, n)
