"""l1-penalised logdet sparsification of in-scale conditional covariances."""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.covariance import graphical_lasso
from sklearn.exceptions import ConvergenceWarning

from ..errors import NumericError


def sparsify_logdet(j_target: np.ndarray, lam: float, max_iter: int = 200,
                    tol: float = 1e-6) -> np.ndarray:
    """Sparse PD approximation of ``inv(j_target)``.

    Solves ``max_K logdet K - tr(j_target K) - lam * sum_{i != j} |K_ij|``;
    ``K`` is the returned conditional covariance.  ``lam = 0`` gives the
    exact inverse.
    """
    j = np.asarray(j_target, dtype=np.float64)
    if lam < 0:
        raise NumericError("lambda must be nonnegative")
    j = 0.5 * (j + j.T)
    try:
        np.linalg.cholesky(j)
    except np.linalg.LinAlgError as exc:
        raise NumericError("target information matrix is not positive definite") from exc
    if lam == 0 or j.shape[0] == 1:
        return np.linalg.inv(j)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            _, k = graphical_lasso(j, alpha=lam, max_iter=max_iter, tol=tol)
        except FloatingPointError as exc:
            raise NumericError(f"logdet sparsification failed: {exc}") from exc
    k = 0.5 * (k + k.T)
    if np.linalg.eigvalsh(k)[0] <= 0:
        raise NumericError("sparsified covariance lost positive definiteness")
    return k
