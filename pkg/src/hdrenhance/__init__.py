"""HDR-supervised LDR image enhancement with a numpy U-Net."""

from .tonemap import ToneMapParams, luminance, tonemap_reinhard

__version__ = "0.1.0"

__all__ = ["ToneMapParams", "luminance", "tonemap_reinhard", "__version__"]
