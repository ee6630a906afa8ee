"""Histogram-equalisation baseline on the luminance channel."""

from __future__ import annotations

import numpy as np

from ..hdr_io import check_ldr
from ..tonemap import luminance, reconstruct_color

BINS = 256


def equalization_lut(lum, bins=BINS):
    """Empirical CDF of ``lum`` (values in [0, 1]) sampled per bin."""
    idx = np.clip(np.floor(np.asarray(lum, np.float64) * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins)
    return np.cumsum(counts) / idx.size, idx


def histogram_equalize(ldr, bins=BINS):
    """Equalise luminance through its CDF and carry colour over by ratio."""
    ldr = np.asarray(ldr)
    check_ldr(ldr)
    lum = luminance(ldr)
    lut, idx = equalization_lut(lum, bins)
    return reconstruct_color(ldr, lum, lut[idx])
