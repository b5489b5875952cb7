"""Clip scoring, two-sided decisions, patch localisation and ROC evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import BadInputError, NumericError
from .linalg import BandedBlockToeplitz, Dims, _check_dims, spd_inverse

logger = logging.getLogger(__name__)

EXTENSIONS = ("banded", "markov")

NORMAL = "normal"
LOW_LIKELIHOOD = "anomalous-low-likelihood"
HIGH_LIKELIHOOD = "anomalous-high-likelihood"
PATCH_VARIANCE = "anomalous-patch-variance"


@dataclass
class ArScorer:
    """Mahalanobis scorer for clips of ``t1 >= T`` frames.

    ``mu`` is either a per-frame mean (length ``N``, used for every frame)
    or a full ``N*T`` mean, in which case only ``t1 == T`` clips are
    accepted.  ``sigma`` defaults to ``inv(j)`` and is only needed for patch
    marginals.

    Longer clips are scored under one of two extensions.  ``"banded"``
    repeats the first block row of ``j`` along a block-Toeplitz band.
    ``"markov"`` treats the process as Markov of order ``T - 1``: the
    first ``T`` frames are scored with ``j`` and every later frame adds its
    conditional score given the ``T - 1`` frames before it.  The Markov form
    stays nonnegative for any positive definite model, while the banded one
    can go negative once neighbouring frames are strongly correlated.
    """

    j: np.ndarray
    dims: Dims
    mu: np.ndarray
    sigma: Optional[np.ndarray] = None
    frame_shape: Optional[Tuple[int, int]] = None
    extension: str = "banded"

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.j = np.asarray(self.j, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        t, n = self.dims.t_len, self.dims.n_len
        if self.j.shape != (t * n, t * n):
            raise BadInputError(f"information matrix has shape {self.j.shape}, expected {(t * n, t * n)}")
        if np.abs(self.j - self.j.T).max() > 1e-9 * max(1.0, np.abs(self.j).max()):
            raise BadInputError("information matrix must be symmetric")
        if self.mu.size not in (n, t * n):
            raise BadInputError(f"mean must have length N={n} or N*T={t * n}")
        if self.frame_shape is None:
            self.frame_shape = (1, n)
        if self.frame_shape[0] * self.frame_shape[1] != n:
            raise BadInputError("frame shape does not match N")
        if self.extension not in EXTENSIONS:
            raise BadInputError(f"extension must be one of {EXTENSIONS}")
        self._toeplitz = {}
        self._conditional = None

    @classmethod
    def from_covariance(cls, sigma: np.ndarray, dims, mu, frame_shape=None,
                        extension: str = "banded") -> "ArScorer":
        sigma = 0.5 * (np.asarray(sigma, dtype=np.float64) + np.asarray(sigma).T)
        try:
            j = spd_inverse(sigma)
        except NumericError as exc:
            raise NumericError("covariance is not positive definite") from exc
        return cls(j, dims, mu, sigma, frame_shape, extension)

    @property
    def full_mean(self) -> bool:
        return self.mu.size != self.dims.n_len

    @property
    def blocks(self) -> List[np.ndarray]:
        n = self.dims.n_len
        return [self.j[:n, i * n:(i + 1) * n] for i in range(self.dims.t_len)]

    def covariance(self) -> np.ndarray:
        if self.sigma is None:
            self.sigma = np.linalg.inv(self.j)
        return self.sigma

    def centered(self, clip: np.ndarray, t1: Optional[int] = None) -> np.ndarray:
        n = self.dims.n_len
        x = np.asarray(clip, dtype=np.float64).ravel()
        if x.size % n:
            raise BadInputError(f"clip length {x.size} is not a multiple of N={n}")
        frames = x.size // n
        if t1 is not None and t1 != frames:
            raise BadInputError(f"clip has {frames} frames, expected t1={t1}")
        if frames < self.dims.t_len:
            raise BadInputError(f"clip of {frames} frames is shorter than T={self.dims.t_len}")
        if self.full_mean:
            if frames != self.dims.t_len:
                raise BadInputError("a full space-time mean only scores clips of T frames")
            return x - self.mu
        return (x.reshape(frames, n) - self.mu).ravel()

    def score(self, clip: np.ndarray, t1: Optional[int] = None) -> float:
        x = self.centered(clip, t1)
        return float(self._quadratic(x[None, :])[0])

    def score_many(self, clips: np.ndarray) -> np.ndarray:
        """Scores of stacked equal-length clips (one per row)."""
        clips = np.asarray(clips, dtype=np.float64)
        clips = clips.reshape(clips.shape[0], -1)
        n, t = self.dims.n_len, self.dims.t_len
        frames = clips.shape[1] // n
        if clips.shape[1] % n or frames < t:
            raise BadInputError(f"clips of length {clips.shape[1]} do not fit N={n}, T={t}")
        if self.full_mean:
            if frames != t:
                raise BadInputError("a full space-time mean only scores clips of T frames")
            x = clips - self.mu
        else:
            x = (clips.reshape(-1, frames, n) - self.mu).reshape(clips.shape[0], -1)
        return self._quadratic(x)

    def sliding_scores(self, frames: np.ndarray, starts: Sequence[int], t1: int) -> np.ndarray:
        """Scores of the clips ``frames[s:s + t1]`` cut from one frame sequence.

        Under the Markov extension every ``T``-frame window term is computed
        once for the whole sequence and clip scores are sums of those terms,
        so a clip gets the same value whichever batch it is scored in.
        """
        n, t = self.dims.n_len, self.dims.t_len
        frames = np.asarray(frames, dtype=np.float64).reshape(len(frames), n)
        starts = np.asarray(starts, dtype=int)
        if t1 < t:
            raise BadInputError(f"t1={t1} is shorter than the model length T={t}")
        if len(starts) and (starts.min() < 0 or starts.max() + t1 > len(frames)):
            raise BadInputError("clip window runs past the frame sequence")
        if self.extension != "markov" or self.full_mean:
            idx = starts[:, None] + np.arange(t1)[None, :]
            return self.score_many(frames[idx].reshape(len(starts), -1))
        x = frames - self.mu
        win = np.lib.stride_tricks.sliding_window_view(x, t, axis=0)
        win = np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(-1, t * n)
        head = np.sum((win @ self.j) * win, axis=1)
        if t1 == t:
            return head[starts]
        cond = np.sum((win @ self.conditional_information()) * win, axis=1)
        tails = np.lib.stride_tricks.sliding_window_view(cond[1:], t1 - t)
        return head[starts] + tails[starts].sum(axis=1)

    def conditional_information(self) -> np.ndarray:
        """Information of the last frame given the previous ``T - 1``, padded to ``NT x NT``."""
        if self._conditional is None:
            k = (self.dims.t_len - 1) * self.dims.n_len
            jc = self.j.copy()
            if k:
                lead = self.covariance()[:k, :k]
                jc[:k, :k] -= spd_inverse(0.5 * (lead + lead.T))
            self._conditional = 0.5 * (jc + jc.T)
        return self._conditional

    def _quadratic(self, x: np.ndarray) -> np.ndarray:
        n, t = self.dims.n_len, self.dims.t_len
        frames = x.shape[1] // n
        if frames == t:
            return np.einsum("ki,ij,kj->k", x, self.j, x)
        if self.extension == "markov":
            head = x[:, :t * n]
            total = np.einsum("ki,ij,kj->k", head, self.j, head)
            win = np.lib.stride_tricks.sliding_window_view(x.reshape(len(x), frames, n), t, axis=1)
            win = np.ascontiguousarray(win[:, 1:].transpose(0, 1, 3, 2)).reshape(len(x), frames - t, t * n)
            return total + np.einsum("kwi,ij,kwj->k", win, self.conditional_information(), win)
        op = self._toeplitz.get(frames)
        if op is None:
            op = BandedBlockToeplitz(self.j, self.dims, frames)
            self._toeplitz[frames] = op
        return op.quadratic_form(x)


def ar_score(scorer: ArScorer, clip: np.ndarray, t1: int) -> float:
    """Banded block-Toeplitz (autoregressive) extension of the clip score."""
    if t1 < scorer.dims.t_len:
        raise BadInputError(f"t1={t1} is shorter than the model length T={scorer.dims.t_len}")
    return scorer.score(clip, t1)


# ---------------------------------------------------------------- patches


@dataclass
class PatchLayout:
    """Spatial patches (pixel index arrays within a frame) on a grid."""

    grid: Tuple[int, int]
    pixels: List[np.ndarray]
    uneven: bool


def patch_layout(frame_shape: Tuple[int, int], grid: Tuple[int, int]) -> PatchLayout:
    h, w = frame_shape
    pr, pc = grid
    if pr < 1 or pc < 1 or pr > h or pc > w:
        raise BadInputError(f"patch grid {grid} does not fit frame {frame_shape}")
    uneven = h % pr != 0 or w % pc != 0
    if uneven:
        logger.warning("patch grid %s does not divide frame %s; using uneven patches", grid, frame_shape)
    idx = np.arange(h * w).reshape(h, w)
    pixels = [blk.ravel() for rows in np.array_split(idx, pr, axis=0)
              for blk in np.array_split(rows, pc, axis=1)]
    return PatchLayout((pr, pc), pixels, uneven)


def patch_scorers(scorer: ArScorer, grid: Tuple[int, int]) -> Tuple[List[ArScorer], PatchLayout]:
    """Marginal scorers of each patch from covariance submatrices."""
    layout = patch_layout(scorer.frame_shape, grid)
    sigma = scorer.covariance()
    t, n = scorer.dims.t_len, scorer.dims.n_len
    out = []
    for pix in layout.pixels:
        idx = (np.arange(t)[:, None] * n + pix[None, :]).ravel()
        mu = scorer.mu[idx] if scorer.full_mean else scorer.mu[pix]
        sub = sigma[np.ix_(idx, idx)]
        out.append(ArScorer.from_covariance(sub, Dims(t, len(pix)), mu))
    return out, layout


def patch_scores(scorers: Sequence[ArScorer], layout: PatchLayout, clip: np.ndarray,
                 n_len: int) -> np.ndarray:
    """Per-patch scores divided by patch dimension, shaped like the grid."""
    x = np.asarray(clip, dtype=np.float64).ravel()
    frames = x.size // n_len
    frames_x = x.reshape(frames, n_len)
    vals = []
    for sc, pix in zip(scorers, layout.pixels):
        vals.append(sc.score(frames_x[:, pix].ravel()) / (frames * len(pix)))
    return np.array(vals).reshape(layout.grid)


def patch_variance(scores: np.ndarray) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    return float(np.var(s, ddof=1)) if s.size > 1 else 0.0


# ---------------------------------------------------------------- decisions


@dataclass
class DecisionPolicy:
    """Two-sided band ``[high_threshold, low_threshold]`` on clip scores.

    ``low_threshold`` bounds large scores (low likelihood) and
    ``high_threshold`` bounds small ones (suspiciously high likelihood).
    """

    low_threshold: float
    high_threshold: float
    patch_grid: Tuple[int, int] = (1, 1)
    patch_variance_threshold: float = float("inf")
    degenerate: bool = False

    def __post_init__(self):
        if self.low_threshold < self.high_threshold:
            raise BadInputError(
                f"empty normal band: low threshold {self.low_threshold} < high threshold {self.high_threshold}")

    @property
    def center(self) -> float:
        return 0.5 * (self.low_threshold + self.high_threshold)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.low_threshold - self.high_threshold)


def calibrate_thresholds(scores_normal: Sequence[float], alpha_low: float, alpha_high: float,
                         patch_grid: Tuple[int, int] = (1, 1)) -> DecisionPolicy:
    """Empirical (linear-interpolation) quantile band of normal scores."""
    s = np.asarray(scores_normal, dtype=np.float64).ravel()
    if s.size < 20:
        raise BadInputError(f"need at least 20 calibration scores, got {s.size}")
    if not (0 <= alpha_low < 1 and 0 <= alpha_high < 1 and alpha_low + alpha_high < 1):
        raise BadInputError("alphas must be in [0, 1) with alpha_low + alpha_high < 1")
    low = float(np.quantile(s, 1.0 - alpha_low))
    high = float(np.quantile(s, alpha_high))
    degenerate = bool(np.all(s == s[0]))
    if degenerate:
        logger.warning("calibration scores are all equal; the normal band is a single point")
    return DecisionPolicy(low, high, patch_grid, degenerate=degenerate)


def calibrate_patch_variance(policy: DecisionPolicy, variances: Sequence[float],
                             patch_alpha: float) -> DecisionPolicy:
    """Set the patch-variance threshold at the ``1 - patch_alpha`` quantile."""
    v = np.asarray(variances, dtype=np.float64).ravel()
    if v.size == 0 or not 0 <= patch_alpha < 1:
        raise BadInputError("need patch variances and patch_alpha in [0, 1)")
    return DecisionPolicy(policy.low_threshold, policy.high_threshold, policy.patch_grid,
                          float(np.quantile(v, 1.0 - patch_alpha)), policy.degenerate)


@dataclass
class AnomalyReport:
    clip_score: float
    decision: str
    patch_scores: Optional[np.ndarray] = None
    patch_flags: Optional[np.ndarray] = None
    uneven_patches: bool = False


def _chi_flags(scores: np.ndarray, layout: PatchLayout, frames: int) -> np.ndarray:
    # normalised in-model patch scores concentrate at 1 with sd ~ sqrt(2 / dim)
    dims = np.array([frames * len(p) for p in layout.pixels]).reshape(layout.grid)
    return np.abs(scores - 1.0) > 3.0 * np.sqrt(2.0 / dims)


def decide(policy: DecisionPolicy, scorer: ArScorer, clip: np.ndarray,
           patches: Optional[Tuple[List[ArScorer], PatchLayout]] = None) -> AnomalyReport:
    """Two-sided clip test followed by the patch-variance test."""
    score = scorer.score(clip)
    if score > policy.low_threshold:
        return AnomalyReport(score, LOW_LIKELIHOOD)
    if score < policy.high_threshold:
        return AnomalyReport(score, HIGH_LIKELIHOOD)
    if patches is None:
        patches = patch_scorers(scorer, policy.patch_grid)
    scorers, layout = patches
    ps = patch_scores(scorers, layout, clip, scorer.dims.n_len)
    frames = np.asarray(clip).size // scorer.dims.n_len
    flags = _chi_flags(ps, layout, frames)
    decision = PATCH_VARIANCE if patch_variance(ps) > policy.patch_variance_threshold else NORMAL
    return AnomalyReport(score, decision, ps, flags, layout.uneven)


def calibrate_patch_thresholds(normal_patch_scores: np.ndarray, alpha_low: float,
                               alpha_high: float) -> np.ndarray:
    """Per-patch (low, high) thresholds from normal scores (samples x patches)."""
    s = np.asarray(normal_patch_scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 20:
        raise BadInputError("need at least 20 normal score rows per patch")
    return np.stack([np.quantile(s, 1.0 - alpha_low, axis=0), np.quantile(s, alpha_high, axis=0)], axis=1)


def localize(scorers: Sequence[ArScorer], layout: PatchLayout, clip: np.ndarray, n_len: int,
             thresholds: np.ndarray, normalized: bool = True) -> np.ndarray:
    """Flag patches whose score leaves their own two-sided band."""
    x = np.asarray(clip, dtype=np.float64).ravel()
    frames = x.size // n_len
    fx = x.reshape(frames, n_len)
    s = np.array([sc.score(fx[:, pix].ravel()) for sc, pix in zip(scorers, layout.pixels)])
    if normalized:
        s = s / np.array([frames * len(p) for p in layout.pixels])
    thr = np.asarray(thresholds, dtype=np.float64)
    return ((s > thr[:, 0]) | (s < thr[:, 1])).reshape(layout.grid)


# ---------------------------------------------------------------- evaluation


def detection_statistic(scores: Sequence[float], policy: DecisionPolicy) -> np.ndarray:
    """Distance from the band center in half-widths; both tails count."""
    s = np.asarray(scores, dtype=np.float64)
    half = policy.half_width if policy.half_width > 0 else 1.0
    return np.abs(s - policy.center) / half


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores_normal: Sequence[float], scores_anomalous: Sequence[float]) -> RocCurve:
    """ROC of the rule ``stat >= threshold`` with a trapezoid AUC.

    Ties between classes contribute one half, so the area equals the
    Mann-Whitney pairwise statistic.
    """
    neg = np.asarray(scores_normal, dtype=np.float64).ravel()
    pos = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise BadInputError("both score lists must be nonempty")
    thr = np.unique(np.concatenate([neg, pos]))[::-1]
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    tp = pos.size - np.searchsorted(pos_sorted, thr, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thr, side="left")
    tpr = np.concatenate([[0.0], tp / pos.size])
    fpr = np.concatenate([[0.0], fp / neg.size])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(fpr, tpr, np.concatenate([[np.inf], thr]), auc)


def pairwise_auc(scores_normal: Sequence[float], scores_anomalous: Sequence[float]) -> float:
    """O(n m) Mann-Whitney oracle."""
    neg = np.asarray(scores_normal, dtype=np.float64).ravel()
    pos = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)
