"""Refit the bundled NIQE pristine model from scikit-image sample photos.

The photos listed in ``PRISTINE`` are kept apart from the ones the tests
score, so test images never contribute to the model they are scored with.
"""

import argparse
from pathlib import Path

import numpy as np
from skimage import data

from hdrenhance.metrics.niqe import fit_niqe_model

PRISTINE = ["camera", "chelsea", "coffee", "coins", "rocket", "brick",
            "grass", "gravel", "clock", "moon", "stereo_motorcycle"]


def load(name):
    img = getattr(data, name)()
    if name == "stereo_motorcycle":
        img = img[0]
    return np.asarray(img, np.float64) / 255.0


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    default = Path(__file__).resolve().parents[1] / "src/hdrenhance/data/niqe_pristine.bin"
    parser.add_argument("--out", type=Path, default=default)
    args = parser.parse_args()
    model = fit_niqe_model([load(n) for n in PRISTINE])
    model.save(args.out)
    print(f"wrote {args.out} ({len(PRISTINE)} images)")


if __name__ == "__main__":
    main()
