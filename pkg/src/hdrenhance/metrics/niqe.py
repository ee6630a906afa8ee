"""Natural image quality evaluator (NIQE).

Image statistics follow the original release: MSCN coefficients from a 7x7
Gaussian window (sigma 7/6, replicated borders), 18 AGGD features per
96x96 patch at full and half resolution, and a Mahalanobis-style distance to
a pristine multivariate Gaussian. Gray levels are on a 0..255 scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from ..tonemap import luminance

PATCH_SIZE = 96
SHARPNESS_THRESHOLD = 0.75
FEATURE_DIM = 36
MODEL_MAGIC = b"NIQEMODL"
MODEL_VERSION = 1
DEFAULT_MODEL = "niqe_pristine.bin"

_GAMMA_GRID = np.arange(0.2, 10.0005, 0.001)
_R_GAMMA = special.gamma(2 / _GAMMA_GRID) ** 2 / (
    special.gamma(1 / _GAMMA_GRID) * special.gamma(3 / _GAMMA_GRID)
)
_SHIFTS = ((0, 1), (1, 0), (1, 1), (-1, 1))


@dataclass
class NiqeModel:
    mean: np.ndarray
    cov: np.ndarray
    patch_size: int = PATCH_SIZE
    sharpness_threshold: float = SHARPNESS_THRESHOLD

    def to_bytes(self):
        dim = len(self.mean)
        head = MODEL_MAGIC + struct.pack("<IIId", MODEL_VERSION, dim, self.patch_size,
                                         self.sharpness_threshold)
        return head + np.asarray(self.mean, "<f8").tobytes() + np.asarray(self.cov, "<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MODEL_MAGIC:
            raise ValueError("not a NIQE model file")
        version, dim, patch, thresh = struct.unpack_from("<IIId", data, 8)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported NIQE model version {version}")
        off = 8 + struct.calcsize("<IIId")
        mean = np.frombuffer(data, "<f8", dim, off).astype(np.float64)
        cov = np.frombuffer(data, "<f8", dim * dim, off + 8 * dim).reshape(dim, dim).astype(np.float64)
        return cls(mean, cov, patch, thresh)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path=None):
        """Load a model file; with no path, the model bundled with the package."""
        if path is None:
            return cls.from_bytes(resources.files("hdrenhance.data").joinpath(DEFAULT_MODEL).read_bytes())
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# MATLAB-style bicubic resize


def _cubic(x):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


def _resize_weights(n_in, n_out, scale):
    width = 4.0
    kernel = _cubic
    if scale < 1:
        width /= scale
        kernel = lambda x: scale * _cubic(scale * x)  # noqa: E731
    x = np.arange(1, n_out + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in - 1, -1, -1)])
    idx = mirror[np.mod(idx.astype(np.int64) - 1, 2 * n_in)]
    keep = np.any(w != 0, axis=0)
    return w[:, keep], idx[:, keep]


def imresize(img, scale):
    """Antialiased bicubic resize matching MATLAB's ``imresize(img, scale)``."""
    img = np.asarray(img, dtype=np.float64)
    out = img
    for axis in (0, 1):
        n_in = out.shape[axis]
        n_out = int(np.ceil(n_in * scale))
        w, idx = _resize_weights(n_in, n_out, scale)
        moved = np.moveaxis(out, axis, 0)
        moved = np.einsum("ij,ij...->i...", w, moved[idx])
        out = np.moveaxis(moved, 0, axis)
    return out


# --------------------------------------------------------------------------
# Features


def _gauss_window(size=7, sigma=7 / 6):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def _mscn_parts(gray):
    window = _gauss_window()
    mu = ndimage.correlate(gray, window, mode="nearest")
    sigma = np.sqrt(np.abs(ndimage.correlate(gray * gray, window, mode="nearest") - mu * mu))
    return (gray - mu) / (sigma + 1), sigma


def mscn(gray):
    """Mean-subtracted, contrast-normalised coefficients of a 0..255 gray image."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < 7:
        raise ValueError(f"MSCN needs a 2-D image of at least 7x7, got {gray.shape}")
    return _mscn_parts(gray)[0]


def _aggd(vec):
    """AGGD moment match without validation; may return NaN for one-sided data."""
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.sqrt(np.mean(vec[vec < 0] ** 2)) if np.any(vec < 0) else np.nan
        right = np.sqrt(np.mean(vec[vec > 0] ** 2)) if np.any(vec > 0) else np.nan
        gammahat = left / right
        rhat = np.mean(np.abs(vec)) ** 2 / np.mean(vec * vec)
        rhatnorm = rhat * (gammahat**3 + 1) * (gammahat + 1) / (gammahat**2 + 1) ** 2
    if not np.isfinite(rhatnorm):
        return np.nan, np.nan, np.nan, np.nan
    alpha = _GAMMA_GRID[np.argmin((_R_GAMMA - rhatnorm) ** 2)]
    ratio = np.sqrt(special.gamma(1 / alpha) / special.gamma(3 / alpha))
    beta_l, beta_r = left * ratio, right * ratio
    mean = (beta_r - beta_l) * special.gamma(2 / alpha) / special.gamma(1 / alpha)
    return alpha, beta_l, beta_r, mean


def fit_aggd(samples):
    """Moment-matching AGGD fit: ``(shape, left scale, right scale, mean)``."""
    vec = np.asarray(samples, dtype=np.float64).ravel()
    if vec.size < 100:
        raise ValueError(f"need at least 100 samples, got {vec.size}")
    if np.var(vec) == 0:
        raise ValueError("samples have zero variance")
    if not (np.any(vec < 0) and np.any(vec > 0)):
        raise ValueError("samples must take both signs")
    return tuple(float(v) for v in _aggd(vec))


def patch_features(coeffs):
    """The 18 features of one MSCN patch."""
    alpha, bl, br, _ = _aggd(coeffs.ravel())
    feats = [alpha, (bl + br) / 2]
    for shift in _SHIFTS:
        pair = coeffs * np.roll(coeffs, shift, axis=(0, 1))
        alpha, bl, br, mean = _aggd(pair.ravel())
        feats += [alpha, mean, bl, br]
    return feats


def _blocks(img, size):
    h, w = img.shape
    for c in range(0, w - size + 1, size):
        for r in range(0, h - size + 1, size):
            yield img[r:r + size, c:c + size]


def image_features(gray, patch_size=PATCH_SIZE):
    """Per-patch 36-d features and per-patch sharpness of a 0..255 gray image."""
    gray = np.asarray(gray, dtype=np.float64)
    rows, cols = gray.shape[0] // patch_size, gray.shape[1] // patch_size
    if rows * cols < 1:
        raise ValueError(f"image {gray.shape[1]}x{gray.shape[0]} is smaller than one {patch_size}px patch")
    gray = gray[: rows * patch_size, : cols * patch_size]
    per_scale = []
    sharpness = None
    for scale in (1, 2):
        coeffs, sigma = _mscn_parts(gray)
        size = patch_size // scale
        per_scale.append([patch_features(b) for b in _blocks(coeffs, size)])
        if scale == 1:
            sharpness = np.array([b.mean() for b in _blocks(sigma, size)])
            gray = imresize(gray, 0.5)
    return np.hstack([np.array(f) for f in per_scale]), sharpness


def _nan_mean_cov(feats):
    mean = np.nanmean(feats, axis=0)
    complete = feats[~np.any(np.isnan(feats), axis=1)]
    cov = np.cov(complete, rowvar=False) if len(complete) > 1 else np.full((feats.shape[1],) * 2, np.nan)
    return mean, cov


def to_gray255(img):
    img = np.asarray(img, dtype=np.float64)
    return (luminance(img) if img.ndim == 3 else img) * 255.0


def niqe_gray(gray, model):
    """NIQE of a 0..255 gray plane; lower means more natural."""
    gray = np.asarray(gray, dtype=np.float64)
    p = model.patch_size
    if gray.shape[0] // p * (gray.shape[1] // p) < 4:
        raise ValueError(f"NIQE needs room for at least four {p}x{p} patches, got {gray.shape[1]}x{gray.shape[0]}")
    feats, _ = image_features(gray, p)
    if not np.any(np.all(np.isfinite(feats), axis=1)):
        raise ValueError("no patch has usable statistics (image too flat)")
    mean, cov = _nan_mean_cov(feats)
    diff = model.mean - mean
    inv = np.linalg.pinv((model.cov + cov) / 2)
    return float(np.sqrt(diff @ inv @ diff))


def niqe(ldr, model=None):
    """NIQE of an LDR image in [0, 1] (RGB via Rec. 709 luminance, or gray)."""
    if model is None:
        model = NiqeModel.load()
    return niqe_gray(to_gray255(ldr), model)


def fit_niqe_model(images, patch_size=PATCH_SIZE, sharpness_threshold=SHARPNESS_THRESHOLD,
                   min_images=10):
    """Fit a pristine model from natural LDR images in [0, 1].

    Only patches whose mean local deviation exceeds ``sharpness_threshold``
    times the sharpest patch of their image contribute.
    """
    images = list(images)
    if len(images) < min_images:
        raise ValueError(f"need at least {min_images} images, got {len(images)}")
    selected = []
    for img in images:
        feats, sharp = image_features(to_gray255(img), patch_size)
        selected.append(feats[sharp > sharpness_threshold * sharp.max()])
    feats = np.vstack(selected)
    feats = feats[np.all(np.isfinite(feats), axis=1)]
    if len(feats) <= FEATURE_DIM:
        raise ValueError(f"only {len(feats)} usable sharp patches; need more than {FEATURE_DIM}")
    mean, cov = _nan_mean_cov(feats)
    return NiqeModel(mean, (cov + cov.T) / 2, patch_size, sharpness_threshold)
