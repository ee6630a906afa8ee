"""Reinhard's global tone-mapping operator on luminance, with colour restored
from the source RGB ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Rec. 709 primaries, linear RGB.
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])
DEFAULT_EPSILON = 1e-6
MIDDLE_GRAY = 0.18


@dataclass(frozen=True)
class ToneMapParams:
    a: float = MIDDLE_GRAY
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0 < self.a <= 1:
            raise ValueError(f"key value a must lie in (0, 1], got {self.a}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def luminance(img):
    """Per-pixel luminance plane (float64) of an ``(h, w, 3)`` image."""
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA_WEIGHTS


def geometric_mean(lum, epsilon=DEFAULT_EPSILON):
    """Log-average of ``lum`` with values floored at ``epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lum = np.asarray(lum, dtype=np.float64)
    if lum.size == 0:
        raise ValueError("geometric mean of an empty luminance map")
    return float(np.exp(np.mean(np.log(np.maximum(lum, epsilon)))))


def reinhard_scale(lum, params=ToneMapParams()):
    """Scale luminance so its log-average lands on the key value ``a``."""
    lum = np.asarray(lum, dtype=np.float64)
    return (params.a / geometric_mean(lum, params.epsilon)) * lum


def reinhard_curve(x):
    """The compressive curve X / (1 + X)."""
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + x)


def reconstruct_color(src, lum_in, lum_out):
    """Give each pixel luminance ``lum_out`` while keeping ``src``'s RGB ratios.

    Pixels with zero input luminance become neutral gray at ``lum_out``.
    Channels are clamped to [0, 1], so saturated colours may desaturate.
    """
    src = np.asarray(src, dtype=np.float64)
    lum_in = np.asarray(lum_in, dtype=np.float64)
    lum_out = np.asarray(lum_out, dtype=np.float64)
    if src.shape[:2] != lum_in.shape or lum_in.shape != lum_out.shape:
        raise ValueError(
            f"shape mismatch: image {src.shape[:2]}, luminance {lum_in.shape} / {lum_out.shape}"
        )
    dark = lum_in <= 0
    ratio = np.divide(lum_out, lum_in, out=np.zeros_like(lum_out), where=~dark)
    out = src * ratio[..., None]
    out[dark] = lum_out[dark][:, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def tonemap_reinhard(hdr, params=ToneMapParams()):
    """Map an HDR raster to LDR with Reinhard's global operator."""
    hdr = np.asarray(hdr, dtype=np.float64)
    lum = luminance(hdr)
    mapped = reinhard_curve(reinhard_scale(lum, params))
    return reconstruct_color(hdr, lum, mapped)
