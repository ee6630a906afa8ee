"""Virtual camera, exposure and geometric augmentation for training pairs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tonemap import DEFAULT_EPSILON, MIDDLE_GRAY, geometric_mean, luminance


@dataclass(frozen=True)
class CameraParams:
    """Response-curve parameters of the virtual camera."""

    eta: float
    gamma: float

    def __post_init__(self):
        if not (self.eta > 0 and self.gamma > 0):
            raise ValueError(f"eta and gamma must be positive, got {self.eta}, {self.gamma}")


@dataclass(frozen=True)
class CameraSampler:
    """Distributions for (eta, gamma, v).

    ``variance`` is a variance, not a standard deviation. Draws at or below
    ``floor`` are rejected and redrawn.
    """

    eta_mean: float = 0.6
    gamma_mean: float = 0.9
    variance: float = 0.1
    floor: float = 0.05
    v_low: float = -4.0
    v_high: float = 4.0

    @property
    def std(self):
        return math.sqrt(self.variance)

    def _truncated_normal(self, rng, mean):
        while True:
            value = float(rng.normal(mean, self.std))
            if value > self.floor:
                return value

    def sample(self, rng):
        """Return ``(CameraParams, v)``; eta, gamma, v are drawn in that order."""
        eta = self._truncated_normal(rng, self.eta_mean)
        gamma = self._truncated_normal(rng, self.gamma_mean)
        v = float(rng.uniform(self.v_low, self.v_high))
        return CameraParams(eta, gamma), v


def sample_camera(rng, sampler=CameraSampler()):
    return sampler.sample(rng)


@dataclass(frozen=True)
class AugmentSpec:
    """A square crop, optional flips and the output size."""

    crop_fraction: float
    crop_row: int
    crop_col: int
    crop_size: int
    flip_vertical: bool
    flip_horizontal: bool
    out_size: int = 512

    def to_dict(self):
        return asdict(self)


def sample_augment(rng, height, width, out_size=512, low=0.2, high=0.6):
    """Draw crop fraction, crop origin and the two flips for a source image."""
    short = min(height, width)
    fraction = float(rng.uniform(low, high))
    size = max(1, int(math.floor(fraction * short)))
    row = int(rng.integers(0, height - size + 1))
    col = int(rng.integers(0, width - size + 1))
    flip_v = bool(rng.random() < 0.5)
    flip_h = bool(rng.random() < 0.5)
    return AugmentSpec(fraction, row, col, size, flip_v, flip_h, out_size)


def _resize_axis(img, n_out, axis):
    n_in = img.shape[axis]
    if n_in == n_out:
        return img
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * img.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(img, lo, axis=axis) * (1.0 - frac) + np.take(img, hi, axis=axis) * frac


def resize_bilinear(img, height, width):
    """Bilinear resample with pixel-centre alignment and edge clamping."""
    out = np.asarray(img, dtype=np.float64)
    out = _resize_axis(out, height, 0)
    out = _resize_axis(out, width, 1)
    return out.astype(np.float32)


def crop_resize(img, spec):
    """Cut the square crop described by ``spec`` and resample it to ``out_size``."""
    img = np.asarray(img)
    size = spec.crop_size
    if size < 1:
        raise ValueError("crop size must be at least one pixel")
    if (
        spec.crop_row < 0
        or spec.crop_col < 0
        or spec.crop_row + size > img.shape[0]
        or spec.crop_col + size > img.shape[1]
    ):
        raise ValueError(f"crop {spec} falls outside a {img.shape[1]}x{img.shape[0]} image")
    patch = img[spec.crop_row:spec.crop_row + size, spec.crop_col:spec.crop_col + size]
    return resize_bilinear(patch, spec.out_size, spec.out_size)


def flip(img, vertical, horizontal):
    img = np.asarray(img)
    if vertical:
        img = img[::-1]
    if horizontal:
        img = img[:, ::-1]
    return np.ascontiguousarray(img)


def augment(img, spec):
    return flip(crop_resize(img, spec), spec.flip_vertical, spec.flip_horizontal)


def shutter_speed(patch, v, epsilon=DEFAULT_EPSILON):
    """0.18 * 2**v divided by the log-average luminance of the patch."""
    return MIDDLE_GRAY * 2.0 ** v / geometric_mean(luminance(patch), epsilon)


def compute_exposure(patch, v, epsilon=DEFAULT_EPSILON):
    """Exposure luminance plane for a patch shot ``v`` stops off middle gray."""
    lum = luminance(patch)
    return shutter_speed(patch, v, epsilon) * lum


def virtual_camera(exposure, params):
    """Camera response min((1 + eta) X^g / (X^g + eta), 1)."""
    xg = np.power(np.asarray(exposure, dtype=np.float64), params.gamma)
    return np.minimum((1.0 + params.eta) * xg / (xg + params.eta), 1.0)
