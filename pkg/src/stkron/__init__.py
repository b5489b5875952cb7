"""Space-time covariance models for anomaly detection in video."""
from .anomaly import (ArScorer, DecisionPolicy, ar_score, calibrate_thresholds, decide, localize,
                      roc_auc)
from .config import ExperimentConfig
from .errors import BadInputError, FormatError, NumericError, StkronError
from .estimators import (GridMapping, KronCovariance, SampleSet, dc_kron_pca, kron_pca_ls,
                         nonrect_kron, sample_covariance, toeplitz_kron_ls)
from .io import FrameTensor, read_tensor, write_tensor
from .linalg import Dims, rearrange, unrearrange, weighted_low_rank

__version__ = "0.1.0"

__all__ = [
    "ArScorer", "DecisionPolicy", "ar_score", "calibrate_thresholds", "decide", "localize",
    "roc_auc", "ExperimentConfig", "BadInputError", "FormatError", "NumericError", "StkronError",
    "GridMapping", "KronCovariance", "SampleSet", "dc_kron_pca", "kron_pca_ls", "nonrect_kron",
    "sample_covariance", "toeplitz_kron_ls", "FrameTensor", "read_tensor", "write_tensor", "Dims",
    "rearrange", "unrearrange", "weighted_low_rank",
]
