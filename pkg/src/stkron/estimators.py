"""Covariance estimators built on the rearranged (Kronecker) domain."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import BadInputError
from .linalg import (
    Dims,
    LowRankFactors,
    RearrangedMatrix,
    _check_dims,
    assemble_kron_sum,
    project_psd,
    rearrange,
    symmetrize,
    truncated_svd_approx,
    weighted_low_rank,
)

logger = logging.getLogger(__name__)


@dataclass
class SampleSet:
    """Zero-meaned vectorised clips, one per column (frame-major)."""

    x: np.ndarray
    mu: np.ndarray
    dims: Dims

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[1] < 1:
            raise BadInputError("sample matrix must be 2-D with at least one column")
        if self.x.shape[0] != self.dims.size:
            raise BadInputError(f"sample rows {self.x.shape[0]} != T*N = {self.dims.size}")

    @classmethod
    def from_clips(cls, clips: np.ndarray, dims, center: bool = True) -> "SampleSet":
        """``clips`` has one vectorised clip per column."""
        dims = _check_dims(dims)
        clips = np.asarray(clips, dtype=np.float64)
        mu = clips.mean(axis=1) if center else np.zeros(clips.shape[0])
        return cls(clips - mu[:, None], mu, dims)

    @property
    def n_samples(self) -> int:
        return self.x.shape[1]


@dataclass
class KronCovariance:
    """Sum of Kronecker products, optionally with an overriding diagonal.

    ``matrix`` is the finalised (PSD) covariance.  ``diagonal``, when present,
    replaces the diagonal of the Kronecker sum outright, so stored sample
    variances are reproduced bit-for-bit.
    """

    factors: List[Tuple[np.ndarray, np.ndarray]]
    dims: Dims
    matrix: np.ndarray
    diagonal: Optional[np.ndarray] = None
    toeplitz_temporal: bool = False
    separation_rank: int = 0
    psd_perturbation: float = 0.0
    ls_residual: float = 0.0
    converged: bool = True
    clamped: bool = False

    @property
    def diag_correction(self) -> Optional[np.ndarray]:
        if self.diagonal is None:
            return None
        return self.diagonal - self.kron_diagonal()

    def kron_diagonal(self) -> np.ndarray:
        return sum(np.kron(np.diag(a), np.diag(b)) for a, b in self.factors)

    def assemble(self, finalize: bool = True) -> np.ndarray:
        if finalize:
            return self.matrix
        return _assemble_raw(self.factors, self.diagonal)


def _assemble_raw(factors, diagonal=None) -> np.ndarray:
    out = assemble_kron_sum(factors)
    if diagonal is not None:
        np.fill_diagonal(out, diagonal)
    return out


def sample_covariance(s: SampleSet, shrinkage: float = 0.0) -> np.ndarray:
    if not 0.0 <= shrinkage <= 1.0:
        raise BadInputError("shrinkage must lie in [0, 1]")
    x = s.x
    cov = (x @ x.T) / x.shape[1]
    cov = symmetrize(cov)
    if shrinkage > 0:
        d = cov.shape[0]
        cov = (1.0 - shrinkage) * cov + shrinkage * (np.trace(cov) / d) * np.eye(d)
    return cov


def ridge_prepass(sigma: np.ndarray, amount: float) -> np.ndarray:
    d = sigma.shape[0]
    return (1.0 - amount) * sigma + amount * (np.trace(sigma) / d) * np.eye(d)


def _unvec(vec: np.ndarray, k: int) -> np.ndarray:
    return vec.reshape(k, k)


def _parity_project(a: np.ndarray, b: np.ndarray):
    """Project a factor pair onto its dominant transpose-parity class.

    For symmetric input the singular pairs are either symmetric/symmetric or
    antisymmetric/antisymmetric; both kinds give a symmetric Kronecker term.
    """
    sa, ka = symmetrize(a), 0.5 * (a - a.T)
    sb, kb = symmetrize(b), 0.5 * (b - b.T)
    sym_energy = np.linalg.norm(sa) * np.linalg.norm(sb)
    skew_energy = np.linalg.norm(ka) * np.linalg.norm(kb)
    if skew_energy > sym_energy:
        return ka, kb
    return sa, sb


def _split_factors(fac: LowRankFactors, dims: Dims, left_map=None):
    """Turn rearranged singular triplets into (T_i, S_i) pairs.

    ``left_map`` converts a left vector into a ``T x T`` matrix (defaults to a
    plain reshape).  sqrt(sigma) is folded into each side.
    """
    t, n = dims.t_len, dims.n_len
    out = []
    for k in range(fac.rank):
        sv = fac.singular_values[k]
        if sv <= 0:
            continue
        root = np.sqrt(sv)
        lvec = fac.left[:, k] / sv * root
        rvec = fac.right[:, k] * root
        a = left_map(lvec) if left_map is not None else _unvec(lvec, t)
        b = _unvec(rvec, n)
        out.append(_parity_project(a, b))
    if not out:
        out.append((np.zeros((t, t)), np.zeros((n, n))))
    return out


def soft_threshold_spectrum(fac: LowRankFactors, tau: float) -> LowRankFactors:
    s = np.maximum(fac.singular_values - tau, 0.0)
    scale = np.divide(s, fac.singular_values, out=np.zeros_like(s), where=fac.singular_values > 0)
    return LowRankFactors(fac.left * scale, fac.right, s, residual=fac.residual,
                          clamped=fac.clamped, iterations=fac.iterations, converged=fac.converged)


def _finalize_clip(factors, dims, sigma_ref, **kw) -> KronCovariance:
    raw = _assemble_raw(factors)
    fin = project_psd(raw, 0.0)
    pert = float(np.linalg.norm(fin - symmetrize(raw)))
    resid = float(np.linalg.norm(sigma_ref - raw)) if sigma_ref is not None else 0.0
    return KronCovariance(factors=factors, dims=dims, matrix=fin, psd_perturbation=pert,
                          ls_residual=resid, separation_rank=len(factors), **kw)


def kron_pca_ls(
    sigma: np.ndarray,
    dims,
    r: int,
    soft_threshold: float = 0.0,
    ridge: float = 0.0,
) -> KronCovariance:
    """Least-squares sum-of-Kronecker fit via the rearranged SVD.

    ``soft_threshold`` shrinks the rearranged singular values; ``ridge`` blends
    the input toward a scaled identity first.  Both are off by default.
    """
    dims = _check_dims(dims)
    sigma = np.asarray(sigma, dtype=np.float64)
    if ridge > 0:
        sigma = ridge_prepass(sigma, ridge)
    fac = truncated_svd_approx(rearrange(sigma, dims).data, r)
    if soft_threshold > 0:
        fac = soft_threshold_spectrum(fac, soft_threshold)
    factors = _split_factors(fac, dims)
    return _finalize_clip(factors, dims, sigma, clamped=fac.clamped)


def diagonal_mask(dims: Dims) -> np.ndarray:
    """Weight mask that is zero on the rearranged image of the diagonal."""
    t, n = dims.t_len, dims.n_len
    w = np.ones((t * t, n * n))
    rows = np.arange(t) * t + np.arange(t)
    cols = np.arange(n) * n + np.arange(n)
    w[np.ix_(rows, cols)] = 0.0
    return w


def dc_kron_pca_cov(
    sigma: np.ndarray,
    dims,
    r: int,
    extra_mask: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 2000,
    method: str = "als",
) -> KronCovariance:
    """Diagonally corrected fit of a given covariance.

    Diagonal entries are excluded from the LS objective and then restored to
    the input variances; a uniform shift is added to the diagonal only when
    needed to make the result PSD.
    """
    dims = _check_dims(dims)
    sigma = symmetrize(np.asarray(sigma, dtype=np.float64))
    w = diagonal_mask(dims)
    if extra_mask is not None:
        w = w * extra_mask
    fac = weighted_low_rank(rearrange(sigma, dims).data, w, r, tol=tol, max_iter=max_iter,
                            method=method)
    factors = _split_factors(fac, dims)
    target = np.diag(sigma).copy()
    raw = _assemble_raw(factors, target)
    lam_min = np.linalg.eigvalsh(raw)[0]
    eps = max(0.0, -lam_min)
    if eps > 0:
        target = target + eps
        raw = _assemble_raw(factors, target)
    resid = float(np.linalg.norm((sigma - raw)))
    return KronCovariance(
        factors=factors, dims=dims, matrix=raw, diagonal=target,
        separation_rank=len(factors), psd_perturbation=float(eps * np.sqrt(dims.size)),
        ls_residual=resid, converged=fac.converged, clamped=fac.clamped,
    )


def dc_kron_pca(s: SampleSet, r: int, shrinkage: float = 0.0, **kw) -> KronCovariance:
    return dc_kron_pca_cov(sample_covariance(s, shrinkage), s.dims, r, **kw)


def offset_classes(t: int) -> List[np.ndarray]:
    """Rearranged row indices per block offset ``j = i2 - i1``, j = -(T-1)..T-1."""
    i1, i2 = np.divmod(np.arange(t * t), t)
    return [np.flatnonzero(i2 - i1 == j) for j in range(-(t - 1), t)]


@dataclass
class ToeplitzReduction:
    b: np.ndarray
    weights: np.ndarray


def toeplitz_reduction(r: RearrangedMatrix, banded_k: Optional[int] = None) -> ToeplitzReduction:
    t = r.dims.t_len
    classes = offset_classes(t)
    offsets = np.arange(-(t - 1), t)
    card = (t - np.abs(offsets)).astype(float)
    b = np.zeros((2 * t - 1, r.data.shape[1]))
    if banded_k is None:
        weights = np.sqrt(card)
        for row, ks in enumerate(classes):
            b[row] = r.data[ks].sum(axis=0) / weights[row]
    else:
        weights = np.ones_like(card)
        for row, ks in enumerate(classes):
            if abs(offsets[row]) < banded_k:
                b[row] = r.data[ks].mean(axis=0)
    return ToeplitzReduction(b, weights)


def _toeplitz_from_offsets(u: np.ndarray, k: int) -> np.ndarray:
    """``out[a, b] = u[b - a + k - 1]``."""
    idx = np.arange(k)
    return u[(idx[None, :] - idx[:, None]) + k - 1]


def toeplitz_kron_ls(
    sigma: np.ndarray,
    dims,
    r: int,
    both_dims: bool = False,
    banded_k: Optional[int] = None,
) -> KronCovariance:
    """Sum-of-Kronecker fit with Toeplitz temporal factors.

    Rows of the rearranged matrix are pooled per block offset into the
    ``(2T-1) x N^2`` matrix ``B`` (weights ``1/sqrt(T-|j|)``), ``B`` is
    approximated at rank ``r`` and the left vectors are unweighted and
    expanded back into Toeplitz ``T_i``.  ``banded_k`` switches to equal
    offset weights and zeroes offsets ``|j| >= banded_k``.  ``both_dims``
    repeats the pooling on the spatial index.
    """
    dims = _check_dims(dims)
    t, n = dims.t_len, dims.n_len
    if r > 2 * t - 1:
        raise BadInputError(f"rank {r} exceeds 2T-1 = {2 * t - 1} for a Toeplitz temporal factor")
    if banded_k is not None and not 1 <= banded_k <= t:
        raise BadInputError("banded_k must lie in [1, T]")
    sigma = np.asarray(sigma, dtype=np.float64)
    red = toeplitz_reduction(rearrange(sigma, dims), banded_k)
    b = red.b
    if both_dims:
        sclasses = offset_classes(n)
        soff = np.arange(-(n - 1), n)
        sweights = np.sqrt(n - np.abs(soff)).astype(float)
        c = np.zeros((b.shape[0], 2 * n - 1))
        for col, ks in enumerate(sclasses):
            c[:, col] = b[:, ks].sum(axis=1) / sweights[col]
        fac = truncated_svd_approx(c, r)

        def right_map(vec):
            return _toeplitz_from_offsets(vec / sweights, n)
    else:
        fac = truncated_svd_approx(b, r)
        right_map = None

    def left_map(vec):
        return _toeplitz_from_offsets(vec / red.weights, t)

    factors = []
    for k in range(fac.rank):
        sv = fac.singular_values[k]
        if sv <= 0:
            continue
        root = np.sqrt(sv)
        a = left_map(fac.left[:, k] / sv * root)
        rv = fac.right[:, k] * root
        bmat = right_map(rv) if right_map is not None else rv.reshape(n, n)
        factors.append(_parity_project(a, bmat))
    if not factors:
        factors.append((np.zeros((t, t)), np.zeros((n, n))))
    return _finalize_clip(factors, dims, sigma, toeplitz_temporal=True, clamped=fac.clamped)


@dataclass(frozen=True)
class GridMapping:
    """Embedding of a column-drifting pixel grid into a padded rectangle.

    Pixel column ``c`` of frame ``f`` sits in padded column
    ``c + offset(f)`` where ``offset(f) = f*delta_n`` (shifted so offsets are
    nonnegative).  With ``height == 1`` this is the 1-D index embedding.
    """

    delta_n: int
    height: int
    width: int
    t_len: int
    max_padded: int = 1 << 16

    def __post_init__(self):
        if self.padded_n > self.max_padded:
            raise BadInputError(f"padded grid size {self.padded_n} exceeds cap {self.max_padded}")

    @property
    def base_n(self) -> int:
        return self.height * self.width

    @property
    def padded_width(self) -> int:
        return self.width + (self.t_len - 1) * abs(self.delta_n)

    @property
    def padded_n(self) -> int:
        return self.height * self.padded_width

    def offset(self, f: int) -> int:
        if self.delta_n >= 0:
            return f * self.delta_n
        return (self.t_len - 1 - f) * (-self.delta_n)

    def frame_slots(self, f: int) -> np.ndarray:
        rows = np.arange(self.height)[:, None] * self.padded_width
        cols = np.arange(self.width)[None, :] + self.offset(f)
        return (rows + cols).ravel()

    def valid_index(self) -> np.ndarray:
        """Padded-grid positions (frame-major) of the ``N*T`` real variables."""
        p = self.padded_n
        return np.concatenate([f * p + self.frame_slots(f) for f in range(self.t_len)])

    @property
    def valid(self) -> np.ndarray:
        mask = np.zeros(self.padded_n * self.t_len, dtype=bool)
        mask[self.valid_index()] = True
        return mask.reshape(self.t_len, self.padded_n)

    @property
    def dummy_count(self) -> int:
        return self.padded_n * self.t_len - self.base_n * self.t_len

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Embed clips (rows = variables) into the padded grid; dummies are 0."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros((self.padded_n * self.t_len,) + x.shape[1:])
        out[self.valid_index()] = x
        return out

    def extract(self, sigma_padded: np.ndarray) -> np.ndarray:
        idx = self.valid_index()
        return sigma_padded[np.ix_(idx, idx)]


def dummy_mask(mapping: GridMapping) -> np.ndarray:
    """Rearranged weight mask: zero wherever either variable is a dummy slot."""
    t, p = mapping.t_len, mapping.padded_n
    valid = mapping.valid.astype(float)  # (T, P)
    # row (i, j), col (a, b): valid[i, a] * valid[j, b]
    w = np.einsum("ia,jb->ijab", valid, valid)
    return w.reshape(t * t, p * p)


@dataclass
class NonrectFit:
    padded: KronCovariance
    mapping: GridMapping
    matrix: np.ndarray

    def extract(self, sigma_padded: Optional[np.ndarray] = None) -> np.ndarray:
        if sigma_padded is None:
            sigma_padded = self.padded.matrix
        return self.mapping.extract(sigma_padded)


def nonrect_kron_cov(sigma: np.ndarray, mapping: GridMapping, r: int,
                     tol: float = 1e-12, max_iter: int = 2000, method: str = "als") -> NonrectFit:
    """Kronecker fit on the padded grid, ignoring every dummy-slot entry."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (mapping.base_n * mapping.t_len,) * 2:
        raise BadInputError("covariance does not match the grid mapping")
    dims = Dims(mapping.t_len, mapping.padded_n)
    idx = mapping.valid_index()
    padded = np.zeros((dims.size, dims.size))
    padded[np.ix_(idx, idx)] = sigma
    w = dummy_mask(mapping)
    fac = weighted_low_rank(rearrange(padded, dims).data, w, r, tol=tol, max_iter=max_iter,
                            method=method)
    factors = _split_factors(fac, dims)
    raw = _assemble_raw(factors)
    valid_raw = mapping.extract(raw)
    fin = project_psd(valid_raw, 0.0)
    kc = KronCovariance(factors=factors, dims=dims, matrix=raw, separation_rank=len(factors),
                        ls_residual=float(np.linalg.norm(sigma - valid_raw)),
                        psd_perturbation=float(np.linalg.norm(fin - symmetrize(valid_raw))),
                        converged=fac.converged, clamped=fac.clamped)
    return NonrectFit(kc, mapping, fin)


def nonrect_kron(s: SampleSet, mapping: GridMapping, r: int, shrinkage: float = 0.0,
                 **kw) -> NonrectFit:
    if s.dims.t_len != mapping.t_len or s.dims.n_len != mapping.base_n:
        raise BadInputError("sample dims do not match the grid mapping")
    return nonrect_kron_cov(sample_covariance(s, shrinkage), mapping, r, **kw)
