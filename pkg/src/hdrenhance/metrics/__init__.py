"""Quality metrics (TMQI, NIQE) and the histogram-equalisation baseline."""

from .histeq import histogram_equalize
from .niqe import NiqeModel, fit_aggd, fit_niqe_model, mscn, niqe
from .tmqi import TmqiResult, tmqi

__all__ = [
    "NiqeModel",
    "TmqiResult",
    "fit_aggd",
    "fit_niqe_model",
    "histogram_equalize",
    "mscn",
    "niqe",
    "tmqi",
]
