"""Matrix machinery shared by the estimators.

Conventions used everywhere in the package:

* A space-time covariance over ``T`` frames of ``N`` pixels is laid out as a
  ``T x T`` grid of ``N x N`` blocks, i.e. ``Sigma = Tfac kron Sfac``
  (temporal factor on the left).
* Vectorisation is row-major (``ndarray.ravel()``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import BadInputError, NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dims:
    t_len: int
    n_len: int

    def __post_init__(self):
        if int(self.t_len) < 1 or int(self.n_len) < 1:
            raise BadInputError(f"dims must be positive, got {self.t_len}, {self.n_len}")

    @property
    def size(self) -> int:
        return self.t_len * self.n_len


@dataclass(frozen=True)
class RearrangedMatrix:
    data: np.ndarray
    dims: Dims


@dataclass(frozen=True)
class LowRankFactors:
    """Rank-``r`` factorisation ``left @ right.T``.

    ``left`` carries the singular values (``U * s``), ``right`` is orthonormal
    when the factors come from an SVD.
    """

    left: np.ndarray
    right: np.ndarray
    singular_values: np.ndarray
    residual: float = 0.0
    clamped: bool = False
    iterations: int = 0
    converged: bool = True

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.left @ self.right.T


def _check_dims(dims) -> Dims:
    if isinstance(dims, Dims):
        return dims
    t, n = dims
    return Dims(int(t), int(n))


def rearrange(sigma: np.ndarray, dims) -> RearrangedMatrix:
    """Map an ``NT x NT`` block matrix to the ``T^2 x N^2`` rearranged form.

    Row ``i*T + j`` holds the row-major vectorisation of block ``(i, j)``, so
    ``rearrange(A kron B)`` equals ``vec(A) vec(B)^T``.
    """
    dims = _check_dims(dims)
    sigma = np.asarray(sigma, dtype=np.float64)
    t, n = dims.t_len, dims.n_len
    if sigma.shape != (t * n, t * n):
        raise BadInputError(f"sigma has shape {sigma.shape}, expected {(t * n, t * n)}")
    data = sigma.reshape(t, n, t, n).transpose(0, 2, 1, 3).reshape(t * t, n * n)
    return RearrangedMatrix(np.ascontiguousarray(data), dims)


def unrearrange(r: RearrangedMatrix) -> np.ndarray:
    t, n = r.dims.t_len, r.dims.n_len
    data = np.asarray(r.data, dtype=np.float64)
    if data.shape != (t * t, n * n):
        raise BadInputError(f"rearranged data has shape {data.shape}, expected {(t * t, n * n)}")
    return np.ascontiguousarray(data.reshape(t, t, n, n).transpose(0, 2, 1, 3).reshape(t * n, t * n))


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    # first nonzero entry of each left vector made positive
    for k in range(u.shape[1]):
        col = u[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-14 * max(np.abs(col).max(), 1e-300))
        if nz.size and col[nz[0]] < 0:
            u[:, k] *= -1.0
            v[:, k] *= -1.0


def truncated_svd_approx(m: np.ndarray, r: int) -> LowRankFactors:
    """Best rank-``r`` Frobenius approximation of ``m`` (Eckart-Young)."""
    m = np.asarray(m, dtype=np.float64)
    if r < 1:
        raise BadInputError("rank must be >= 1")
    kmax = min(m.shape)
    clamped = r > kmax
    if clamped:
        logger.warning("rank %d exceeds min dimension %d; clamped", r, kmax)
        r = kmax
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    order = np.argsort(-s, kind="stable")
    u, s, vt = u[:, order], s[order], vt[order]
    u = u[:, :r].copy()
    v = vt[:r].T.copy()
    _fix_signs(u, v)
    tail = s[r:]
    residual = float(np.sqrt(np.sum(tail * tail)))
    return LowRankFactors(u * s[:r], v, s[:r].copy(), residual=residual, clamped=clamped)


def _orthonormal_factors(u: np.ndarray, v: np.ndarray) -> LowRankFactors:
    qu, ru = np.linalg.qr(u)
    qv, rv = np.linalg.qr(v)
    a, s, bt = np.linalg.svd(ru @ rv.T)
    left = qu @ a
    right = qv @ bt.T
    _fix_signs(left, right)
    return LowRankFactors(left * s, right, s)


def _als_sweep(m, wn, v, r):
    ridge = 1e-13 * np.eye(r)
    wm = wn * m
    g = np.einsum("ij,jk,jl->ikl", wn, v, v) + ridge
    u = np.linalg.solve(g, (wm @ v)[..., None])[..., 0]
    g = np.einsum("ij,ik,il->jkl", wn, u, u) + ridge
    v = np.linalg.solve(g, (wm.T @ u)[..., None])[..., 0]
    return u, v


def weighted_low_rank(
    m: np.ndarray,
    w: np.ndarray,
    r: int,
    tol: float = 1e-8,
    max_iter: int = 500,
    method: str = "impute",
) -> LowRankFactors:
    """Weighted rank-``r`` approximation.

    ``method='impute'`` alternates projections: each sweep replaces the
    entries of ``m`` by a convex blend of data and current fit
    (``w * m + (1 - w) * fit`` with ``w`` scaled into [0, 1]) and re-solves
    the unweighted problem with :func:`truncated_svd_approx`.  The entries
    of ``m`` under zero weight serve as the initial guess.

    ``method='als'`` starts from the same SVD and alternates exact weighted
    least-squares solves for the left and right factors; it needs far fewer
    sweeps when the weighted problem has an exact low-rank fit.

    Both stop when the relative change of the weighted residual drops below
    ``tol``, when the residual vanishes, or after ``max_iter`` sweeps
    (``converged`` is False in the last case).
    """
    m = np.asarray(m, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != m.shape:
        raise BadInputError(f"mask shape {w.shape} does not match matrix shape {m.shape}")
    if np.any(w < 0):
        raise BadInputError("weights must be nonnegative")
    if method not in ("impute", "als"):
        raise BadInputError(f"unknown method {method!r}")
    wmax = w.max() if w.size else 0.0
    if wmax <= 0:
        raise BadInputError("weight mask is all zero")
    if np.all(w == wmax):
        return truncated_svd_approx(m, r)
    wn = w / wmax
    scale = np.sqrt(np.sum(wn * m * m))
    floor = 1e-12 * max(scale, 1e-300)

    fac = truncated_svd_approx(m, r)
    clamped = fac.clamped
    u, v = fac.left, fac.right
    prev = np.inf
    converged = False
    res = np.inf
    it = 0
    fit = fac.reconstruct()
    for it in range(1, max_iter + 1):
        if method == "impute":
            if it > 1:
                fac = truncated_svd_approx(wn * m + (1.0 - wn) * fit, r)
            fit = fac.reconstruct()
        else:
            u, v = _als_sweep(m, wn, v, u.shape[1])
            fit = u @ v.T
        res = float(np.sqrt(np.sum(wn * (m - fit) ** 2)))
        if res <= floor or (np.isfinite(prev) and abs(prev - res) <= tol * max(prev, 1e-300)):
            converged = True
            break
        prev = res
    if method == "als":
        fac = _orthonormal_factors(u, v)
    if not converged:
        logger.warning("weighted low-rank fit did not converge in %d sweeps", max_iter)
    return LowRankFactors(
        fac.left, fac.right, fac.singular_values, residual=res,
        clamped=clamped, iterations=it, converged=converged,
    )


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def is_positive_definite(m: np.ndarray) -> bool:
    return lapack.dpotrf(m, lower=True)[1] == 0


def min_eigenvalue(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(scipy.linalg.eigvalsh(m, subset_by_index=[0, 0])[0])


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix through its Cholesky factor."""
    c, info = lapack.dpotrf(np.asarray(m, dtype=np.float64), lower=True)
    if info != 0:
        raise NumericError("matrix is not positive definite")
    inv, info = lapack.dpotri(c, lower=True)
    if info != 0:
        raise NumericError("Cholesky inverse failed")
    return np.tril(inv) + np.tril(inv, -1).T


def project_psd(m: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Clip the eigenvalues of ``sym(m)`` at ``floor``.

    Inputs whose smallest eigenvalue already reaches ``floor`` are returned
    symmetrised but otherwise untouched.
    """
    s = symmetrize(np.asarray(m, dtype=np.float64))
    if is_positive_definite(s - floor * np.eye(s.shape[0])):
        return s
    w, v = np.linalg.eigh(s)
    if w[0] >= floor:
        return s
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return symmetrize(out)


def _check_factors(factors):
    if len(factors) == 0:
        raise BadInputError("empty Kronecker factor list")
    t0, s0 = (np.asarray(f) for f in factors[0])
    for a, b in factors:
        if np.shape(a) != t0.shape or np.shape(b) != s0.shape:
            raise BadInputError("inconsistent Kronecker factor shapes")
        if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
            raise BadInputError("Kronecker factors must be square")
    return t0.shape[0], s0.shape[0]


def assemble_kron_sum(factors: Sequence) -> np.ndarray:
    _check_factors(factors)
    out = None
    for a, b in factors:
        term = np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        out = term if out is None else out + term
    return out


def kron_sum_matvec(factors: Sequence, x: np.ndarray) -> np.ndarray:
    """Apply ``sum_i T_i kron S_i`` to ``x`` without forming the matrix.

    ``x`` may be a vector of length ``T*N`` or a matrix of such columns.
    """
    t, n = _check_factors(factors)
    x = np.asarray(x, dtype=np.float64)
    vec = x.ndim == 1
    xs = x.reshape(t, n, -1)
    y = np.zeros_like(xs)
    for a, b in factors:
        # (A kron B) vec(X) = vec(A X B^T) for row-major vec
        y += np.einsum("ij,jkc,lk->ilc", a, xs, b)
    y = y.reshape(t * n, -1)
    return y[:, 0] if vec else y


class BandedBlockToeplitz:
    """Block-Toeplitz extension of a ``T``-frame information matrix.

    The blocks ``J_i = J[:N, i*N:(i+1)*N]`` of the first block row fill the
    band ``|offset| < T`` of an ``N*t1`` square operator; all other blocks are
    zero.  Only quadratic forms are exposed.
    """

    def __init__(self, j: np.ndarray, dims, t1: int):
        dims = _check_dims(dims)
        j = np.asarray(j, dtype=np.float64)
        t, n = dims.t_len, dims.n_len
        if j.shape != (t * n, t * n):
            raise BadInputError(f"information matrix has shape {j.shape}, expected {(t * n, t * n)}")
        if t1 < t:
            raise BadInputError(f"t1={t1} is shorter than the model length T={t}")
        self.dims = dims
        self.t1 = int(t1)
        self.blocks = [j[:n, i * n:(i + 1) * n].copy() for i in range(t)]
        # with t1 == T there is nothing to extend and J is used as is
        self.full = j.copy() if self.t1 == t else None

    def quadratic_form(self, x: np.ndarray):
        """``x^T J_ext x`` for one clip, or for each row of a clip stack."""
        n = self.dims.n_len
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if self.full is not None:
            x = x.reshape(-1, self.t1 * n)
            total = np.sum((x @ self.full) * x, axis=1)
            return float(total[0]) if single else total
        x = x.reshape(-1, self.t1, n)
        total = np.sum((x @ self.blocks[0].T) * x, axis=(1, 2))
        for d in range(1, len(self.blocks)):
            if d >= self.t1:
                break
            # x_a^T J_d x_{a+d}
            total += 2.0 * np.sum((x[:, :-d] @ self.blocks[d]) * x[:, d:], axis=(1, 2))
        return float(total[0]) if single else total


def block_toeplitz_extend_inverse(j: np.ndarray, dims, t1: int) -> BandedBlockToeplitz:
    return BandedBlockToeplitz(j, dims, t1)


def dense_block_toeplitz_extension(j: np.ndarray, dims, t1: int) -> np.ndarray:
    """Explicit banded extension; test oracle only (``O((N t1)^2)`` memory)."""
    dims = _check_dims(dims)
    t, n = dims.t_len, dims.n_len
    if t1 == t:
        return np.array(j, dtype=np.float64)
    out = np.zeros((n * t1, n * t1))
    for a in range(t1):
        for b in range(t1):
            d = b - a
            if abs(d) >= t:
                continue
            blk = j[:n, abs(d) * n:(abs(d) + 1) * n]
            out[a * n:(a + 1) * n, b * n:(b + 1) * n] = blk if d >= 0 else blk.T
    return out
