"""Sliding-window training, per-block models, calibration and scoring."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .anomaly import (HIGH_LIKELIHOOD, LOW_LIKELIHOOD, NORMAL, PATCH_VARIANCE, ArScorer,
                      DecisionPolicy, PatchLayout, calibrate_patch_variance,
                      calibrate_thresholds, detection_statistic, patch_scorers, patch_scores,
                      patch_variance)
from .config import ExperimentConfig
from .errors import BadInputError, FormatError, StkronError
from .estimators import (GridMapping, SampleSet, dc_kron_pca_cov, kron_pca_ls, nonrect_kron_cov,
                         sample_covariance, toeplitz_kron_ls)
from .io import FrameTensor, read_bundle, write_bundle
from .linalg import Dims, is_positive_definite, min_eigenvalue
from .multires import (MultiresConfig, PatchGeometry, augment_shifted_samples, build_quadtree,
                       learn_multires, observed_information)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class BlockLayout:
    """Blocks as (row0, row1, col0, col1) boxes of the cropped frame, plus tie groups."""

    frame_shape: Tuple[int, int]
    grid: Tuple[int, int]
    boxes: Tuple[Tuple[int, int, int, int], ...]
    groups: Tuple[Tuple[int, ...], ...]
    uneven: bool

    @property
    def n_blocks(self) -> int:
        return len(self.boxes)

    def block_shape(self, b: int) -> Tuple[int, int]:
        r0, r1, c0, c1 = self.boxes[b]
        return r1 - r0, c1 - c0


def crop_frames(data: np.ndarray, crop: Optional[Tuple[int, int, int, int]]) -> np.ndarray:
    if crop is None:
        return data
    r0, r1, c0, c1 = crop
    if not (0 <= r0 < r1 <= data.shape[1] and 0 <= c0 < c1 <= data.shape[2]):
        raise BadInputError(f"crop {crop} does not fit frames of shape {data.shape[1:]}")
    return data[:, r0:r1, c0:c1]


def _cuts(length: int, parts: int) -> List[Tuple[int, int]]:
    edges = np.concatenate([[0], np.cumsum([len(a) for a in np.array_split(np.arange(length), parts)])])
    return [(int(edges[i]), int(edges[i + 1])) for i in range(parts)]


def block_layout(config: ExperimentConfig, frame_shape: Tuple[int, int]) -> BlockLayout:
    h, w = frame_shape
    gr, gc = config.block_grid
    if gr > h or gc > w:
        raise BadInputError(f"block grid {config.block_grid} exceeds frame {frame_shape}")
    uneven = h % gr != 0 or w % gc != 0
    if uneven:
        logger.warning("block grid %s does not divide frame %s; blocks are uneven", config.block_grid, frame_shape)
    rows, cols = _cuts(h, gr), _cuts(w, gc)
    boxes = tuple((r0, r1, c0, c1) for r0, r1 in rows for c0, c1 in cols)
    if config.tie is None:
        groups = tuple((b,) for b in range(len(boxes)))
    else:
        tr, tc = config.tie
        groups = tuple(
            tuple(r * gc + c for r in range(gr0, gr0 + tr) for c in range(gc0, gc0 + tc))
            for gr0 in range(0, gr, tr) for gc0 in range(0, gc, tc))
    layout = BlockLayout((h, w), (gr, gc), boxes, groups, uneven)
    for g in groups:
        if len({layout.block_shape(b) for b in g}) != 1:
            raise BadInputError(f"tied blocks {g} differ in shape; use a grid that divides the frame")
    return layout


def window_starts(total: int, length: int, stride: int) -> np.ndarray:
    """Start frames of every full window; count is ``(total - length) // stride + 1``."""
    if total < length:
        return np.zeros(0, dtype=int)
    return np.arange(0, total - length + 1, stride)


def excluded(starts: np.ndarray, length: int, holdout: Optional[Tuple[int, int]], buffer: int) -> np.ndarray:
    """Mask of windows overlapping ``[holdout0 - buffer, holdout1 + buffer)``."""
    if holdout is None:
        return np.zeros(len(starts), dtype=bool)
    lo, hi = holdout[0] - buffer, holdout[1] + buffer
    return (starts < hi) & (starts + length > lo)


def block_clips(data: np.ndarray, box, starts: Sequence[int], length: int) -> np.ndarray:
    """Clips of one block as rows (frame-major, row-major pixels)."""
    r0, r1, c0, c1 = box
    if len(starts) == 0:
        return np.zeros((0, length * (r1 - r0) * (c1 - c0)))
    idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
    return data[idx, r0:r1, c0:c1].reshape(len(starts), -1)


# ---------------------------------------------------------------- fitting


@dataclass
class GroupModel:
    blocks: Tuple[int, ...]
    dims: Dims
    frame_shape: Tuple[int, int]
    sigma: np.ndarray
    j: np.ndarray
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def regularize(sigma: np.ndarray, ridge: float) -> np.ndarray:
    """Lift the spectrum so the smallest eigenvalue is ``ridge * mean variance``."""
    sigma = 0.5 * (sigma + sigma.T)
    floor = ridge * max(float(np.mean(np.diag(sigma))), 1e-300)
    if is_positive_definite(sigma - floor * np.eye(sigma.shape[0])):
        return sigma
    lam = min_eigenvalue(sigma)
    if lam < floor:
        sigma = sigma + (floor - lam) * np.eye(sigma.shape[0])
    return sigma


def _shifted(config, data, layout, b, starts, length):
    """Shifted copies that stay inside the cropped frame, as extra rows."""
    r0, r1, c0, c1 = layout.boxes[b]
    h, w = layout.frame_shape
    ok = [(dr, dc) for dr, dc in config.shifts
          if 0 <= r0 + dr and r1 + dr <= h and 0 <= c0 + dc and c1 + dc <= w]
    if len(ok) < len(config.shifts):
        logger.info("block %d: %d shifts leave the frame and are skipped", b, len(config.shifts) - len(ok))
    return ok


def estimate_covariance(config: ExperimentConfig, s: SampleSet, frame_shape) -> Tuple[np.ndarray, Dict]:
    """Covariance of one group under the configured estimator."""
    dims = s.dims
    est = config.estimator
    rank = min(config.rank, dims.t_len ** 2, dims.n_len ** 2)
    arrays: Dict[str, np.ndarray] = {}
    if est == "sample":
        return sample_covariance(s, config.shrinkage), arrays
    if est == "multires":
        return _fit_multires(config, s, frame_shape, arrays), arrays
    cov = sample_covariance(s, config.shrinkage)
    if est == "kron":
        fit = kron_pca_ls(cov, dims, rank)
    elif est == "dc-kron":
        fit = dc_kron_pca_cov(cov, dims, rank)
    elif est == "toeplitz-kron":
        fit = toeplitz_kron_ls(cov, dims, min(rank, 2 * dims.t_len - 1))
    else:
        mapping = GridMapping(config.delta_n, frame_shape[0], frame_shape[1], dims.t_len)
        nr = nonrect_kron_cov(cov, mapping, config.rank)
        for k, (a, b) in enumerate(nr.padded.factors):
            arrays[f"temporal{k}"], arrays[f"spatial{k}"] = a, b
        return nr.matrix, arrays
    for k, (a, b) in enumerate(fit.factors):
        arrays[f"temporal{k}"], arrays[f"spatial{k}"] = a, b
    return fit.matrix, arrays


def _fit_multires(config, s: SampleSet, frame_shape, arrays) -> np.ndarray:
    t = s.dims.t_len
    h, w = frame_shape
    mapping = None
    if config.delta_n != 0:
        mapping = GridMapping(config.delta_n, h, w, t)
        top = build_quadtree(h, mapping.padded_width, frames=t, observed=np.flatnonzero(mapping.valid.ravel()))
    else:
        top = build_quadtree(h, w, frames=t)
    cfg = MultiresConfig(em_iter=config.em_iter, shrinkage=config.shrinkage, lam=config.lam,
                         cut_level=config.cut_level, halo=config.halo, kron_rank=config.inscale_rank,
                         seed=config.seed)
    learned = learn_multires(top, s.x, cfg, mapping=mapping)
    model = learned.model
    arrays["parent"] = top.parent
    arrays["tree_a"] = np.array([a.ravel()[0] if a.size else 0.0 for a in model.params.a])
    arrays["tree_q"] = np.array([q[0, 0] for q in model.params.q])
    j = observed_information(model)
    return np.linalg.inv(j)


def fit_group(config: ExperimentConfig, data: np.ndarray, layout: BlockLayout, group: Sequence[int],
              starts: np.ndarray, mus: Dict[int, np.ndarray]) -> GroupModel:
    t = config.model_frames
    bh, bw = layout.block_shape(group[0])
    n = bh * bw
    cols = []
    for b in group:
        clips = block_clips(data, layout.boxes[b], starts, t)
        if config.shifts:
            ok = _shifted(config, data, layout, b, starts, t)
            if ok:
                r0, _, c0, _ = layout.boxes[b]
                origins = np.stack([starts, np.full(len(starts), r0), np.full(len(starts), c0)], axis=1)
                geo = PatchGeometry(data, origins, (t, bh, bw))
                base = SampleSet(clips.T, np.zeros(clips.shape[1]), Dims(t, n))
                clips = augment_shifted_samples(base, ok, geo)
                clips = (clips.x + clips.mu[:, None]).T
        cols.append((clips.reshape(len(clips), t, n) - mus[b]).reshape(len(clips), t * n))
    x = np.concatenate(cols, axis=0).T
    dims = Dims(t, n)
    s = SampleSet(x, np.zeros(t * n), dims)
    try:
        sigma, arrays = estimate_covariance(config, s, (bh, bw))
    except StkronError as exc:
        raise type(exc)(f"block group {tuple(group)}: {exc}") from exc
    sigma = regularize(sigma, config.ridge)
    sc = ArScorer.from_covariance(sigma, dims, np.zeros(n), extension=config.extension)
    return GroupModel(tuple(group), dims, (bh, bw), sigma, sc.j, arrays)


@dataclass
class ModelBundle:
    """Fitted per-group models, block means, calibration and decision policy."""

    config: ExperimentConfig
    layout: BlockLayout
    groups: List[GroupModel]
    mus: Dict[int, np.ndarray]
    calibration: np.ndarray
    policy: DecisionPolicy
    block_thresholds: np.ndarray
    holdout: Optional[Tuple[int, int]] = None
    _scorers: Optional[List[ArScorer]] = None
    _patches: Optional[Tuple[List[ArScorer], PatchLayout]] = None

    def scorers(self) -> List[ArScorer]:
        if self._scorers is None:
            out = [None] * self.layout.n_blocks
            for g in self.groups:
                for b in g.blocks:
                    out[b] = ArScorer(g.j, g.dims, self.mus[b], g.sigma, g.frame_shape,
                                      self.config.extension)
            self._scorers = out
        return self._scorers

    def block_scores(self, data: np.ndarray, starts: Sequence[int]) -> np.ndarray:
        """Scores (clips x blocks) of clip-length windows."""
        t1 = self.config.clip_frames
        out = np.zeros((len(starts), self.layout.n_blocks))
        for b, sc in enumerate(self.scorers()):
            r0, r1, c0, c1 = self.layout.boxes[b]
            out[:, b] = sc.sliding_scores(data[:, r0:r1, c0:c1].reshape(len(data), -1), starts, t1)
        return out

    def patch_vector(self, data: np.ndarray, start: int, block_scores: np.ndarray) -> np.ndarray:
        """Dimension-normalised patch scores of one clip.

        With several blocks the blocks are the patches; a single block is
        split by ``patch_grid`` into marginal patches.
        """
        t1 = self.config.clip_frames
        if self.layout.n_blocks > 1:
            dims = np.array([t1 * np.prod(self.layout.block_shape(b)) for b in range(self.layout.n_blocks)])
            return block_scores / dims
        if self._patches is None:
            self._patches = patch_scorers(self.scorers()[0], self.config.patch_grid)
        scorers, pl = self._patches
        clip = block_clips(data, self.layout.boxes[0], [start], t1)[0]
        return patch_scores(scorers, pl, clip, self.groups[0].dims.n_len).ravel()


def _fit_models(config: ExperimentConfig, data: np.ndarray, layout: BlockLayout,
                starts: np.ndarray) -> Tuple[List[GroupModel], Dict[int, np.ndarray]]:
    t = config.model_frames
    mus = {}
    for b, box in enumerate(layout.boxes):
        clips = block_clips(data, box, starts, t)
        mus[b] = clips.reshape(len(starts) * t, -1).mean(axis=0)
    groups = [fit_group(config, data, layout, g, starts, mus) for g in layout.groups]
    return groups, mus


def _training_starts(config: ExperimentConfig, total: int, spans: Sequence[Tuple[int, int]]) -> np.ndarray:
    t = config.model_frames
    starts = window_starts(total, t, config.window_stride)
    for span in spans:
        starts = starts[~excluded(starts, t, span, config.buffer_frames)]
    if len(starts) == 0:
        raise BadInputError("no training windows remain outside the held-out frames and buffer")
    return starts


def cross_fit_scores(config: ExperimentConfig, data: np.ndarray, layout: BlockLayout,
                     cal: np.ndarray, bundle: "ModelBundle") -> np.ndarray:
    """Block scores of calibration windows, each from a model fitted without its fold.

    Calibration windows are split into ``calibration_folds`` contiguous folds.
    With fewer than two folds the full-data model scores every window.
    """
    k = config.calibration_folds
    if k < 2:
        return bundle.block_scores(data, cal)
    scores = np.zeros((len(cal), layout.n_blocks))
    for idx in np.array_split(np.arange(len(cal)), k):
        span = (int(cal[idx[0]]), int(cal[idx[-1]]) + config.clip_frames)
        groups, mus = _fit_models(config, data, layout, _training_starts(config, data.shape[0], [span]))
        fold = ModelBundle(config, layout, groups, mus, np.zeros((0, 0)), DecisionPolicy(np.inf, -np.inf),
                           np.zeros((0, 2)))
        scores[idx] = fold.block_scores(data, cal[idx])
    return scores


def fit(config: ExperimentConfig, tensor: FrameTensor,
        holdout: Optional[Tuple[int, int]] = None) -> ModelBundle:
    """Fit every group on training windows outside ``holdout`` +- buffer, then calibrate.

    Calibration scores come from the training windows, cross-fitted when
    ``calibration_folds >= 2`` (see :func:`cross_fit_scores`).
    """
    data = crop_frames(tensor.data, config.crop)
    layout = block_layout(config, data.shape[1:])
    total = data.shape[0]
    starts = _training_starts(config, total, [] if holdout is None else [holdout])
    groups, mus = _fit_models(config, data, layout, starts)

    t1 = config.clip_frames
    cal = window_starts(total, t1, config.window_stride)
    cal = cal[~excluded(cal, t1, holdout, config.buffer_frames)]
    if len(cal) < 20:
        raise BadInputError(f"only {len(cal)} calibration windows; need at least 20")
    bundle = ModelBundle(config, layout, groups, mus, np.zeros((0, 0)),
                         DecisionPolicy(np.inf, -np.inf), np.zeros((0, 2)), holdout)
    scores = cross_fit_scores(config, data, layout, cal, bundle)
    bundle.calibration = scores
    policy = calibrate_thresholds(scores.sum(axis=1), config.alpha_low, config.alpha_high,
                                  config.patch_grid)
    variances = [patch_variance(bundle.patch_vector(data, s, scores[k])) for k, s in enumerate(cal)]
    bundle.policy = calibrate_patch_variance(policy, variances, config.patch_alpha)
    bundle.block_thresholds = np.stack([np.quantile(scores, 1 - config.alpha_low, axis=0),
                                        np.quantile(scores, config.alpha_high, axis=0)], axis=1)
    return bundle


# ---------------------------------------------------------------- scoring


@dataclass(frozen=True)
class ReportRow:
    clip_index: int
    block: int
    score: float
    decision: str
    start_frame: int
    end_frame: int
    statistic: float


REPORT_HEADER = "clip_index,block,score,decision,start_frame,end_frame,statistic"


def _band_decision(score: float, low: float, high: float) -> str:
    if score > low:
        return LOW_LIKELIHOOD
    if score < high:
        return HIGH_LIKELIHOOD
    return NORMAL


def _band_stat(score: float, low: float, high: float) -> float:
    return float(detection_statistic([score], DecisionPolicy(low, high))[0])


def clip_rows(bundle: ModelBundle, data: np.ndarray, clip_index: int, start: int) -> List[ReportRow]:
    t1 = bundle.config.clip_frames
    bs = bundle.block_scores(data, [start])[0]
    rows = []
    for b, s in enumerate(bs):
        low, high = bundle.block_thresholds[b]
        rows.append(ReportRow(clip_index, b, float(s), _band_decision(s, low, high), start,
                              start + t1, _band_stat(s, low, high)))
    pol = bundle.policy
    total = float(bs.sum())
    decision = _band_decision(total, pol.low_threshold, pol.high_threshold)
    if decision == NORMAL and patch_variance(bundle.patch_vector(data, start, bs)) > pol.patch_variance_threshold:
        decision = PATCH_VARIANCE
    rows.append(ReportRow(clip_index, -1, total, decision, start, start + t1,
                          _band_stat(total, pol.low_threshold, pol.high_threshold)))
    return sorted(rows, key=lambda r: (r.clip_index, r.block))


def clip_starts(config: ExperimentConfig, total: int) -> np.ndarray:
    return window_starts(total, config.clip_frames, config.test_stride)


def score(bundle: ModelBundle, tensor: FrameTensor, leave_out: Optional[bool] = None) -> List[ReportRow]:
    """Report rows for every test clip, ordered by (clip, block).

    With leave-out scoring each clip is scored by a model refitted without
    that clip and its buffer.
    """
    cfg = bundle.config
    data = crop_frames(tensor.data, cfg.crop)
    if data.shape[1:] != bundle.layout.frame_shape:
        raise BadInputError(f"tensor frames {data.shape[1:]} do not match the model {bundle.layout.frame_shape}")
    leave_out = cfg.leave_out if leave_out is None else leave_out
    rows = []
    for k, s in enumerate(clip_starts(cfg, data.shape[0])):
        model = fit(cfg, tensor, holdout=(int(s), int(s) + cfg.clip_frames)) if leave_out else bundle
        rows.extend(clip_rows(model, data, k, int(s)))
    return rows


def format_reports(rows: Sequence[ReportRow]) -> str:
    lines = [REPORT_HEADER]
    for r in rows:
        lines.append(f"{r.clip_index},{r.block},{r.score!r},{r.decision},{r.start_frame},"
                     f"{r.end_frame},{r.statistic!r}")
    return "\n".join(lines) + "\n"


def parse_reports(text: str) -> List[ReportRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != REPORT_HEADER:
        raise BadInputError("report file lacks the expected header")
    rows = []
    for ln in lines[1:]:
        p = ln.split(",")
        if len(p) != 7:
            raise BadInputError(f"malformed report row: {ln!r}")
        rows.append(ReportRow(int(p[0]), int(p[1]), float(p[2]), p[3], int(p[4]), int(p[5]), float(p[6])))
    return rows


# ---------------------------------------------------------------- evaluation


def clip_labels(labels: np.ndarray, starts: Sequence[int], ends: Sequence[int], rule: str) -> np.ndarray:
    labels = np.asarray(labels).astype(int)
    out = []
    for s, e in zip(starts, ends):
        if e > len(labels):
            raise BadInputError("labels are shorter than the scored tensor")
        seg = labels[s:e]
        if rule == "center":
            out.append(seg[(e - s) // 2])
        elif rule == "any":
            out.append(int(seg.any()))
        else:
            out.append(int(seg.mean() > 0.5))
    return np.array(out, dtype=int)


def aggregate_rows(rows: Sequence[ReportRow]) -> List[ReportRow]:
    return [r for r in rows if r.block == -1]


def evaluate(rows: Sequence[ReportRow], labels: np.ndarray, rule: str = "center"):
    """ROC of the clip-level detection statistic against per-frame labels."""
    from .anomaly import roc_auc

    agg = aggregate_rows(rows)
    if not agg:
        raise BadInputError("no aggregate (block -1) rows to evaluate")
    y = clip_labels(labels, [r.start_frame for r in agg], [r.end_frame for r in agg], rule)
    stat = np.array([r.statistic for r in agg])
    if y.all() or not y.any():
        raise BadInputError("labels must contain both normal and anomalous clips")
    return roc_auc(stat[y == 0], stat[y == 1])


def localize_clip(bundle: ModelBundle, tensor: FrameTensor, clip_index: int) -> np.ndarray:
    """Per-block two-sided flags of one test clip, shaped like the block grid."""
    data = crop_frames(tensor.data, bundle.config.crop)
    starts = clip_starts(bundle.config, data.shape[0])
    if not 0 <= clip_index < len(starts):
        raise BadInputError(f"clip index {clip_index} out of range 0..{len(starts) - 1}")
    bs = bundle.block_scores(data, [starts[clip_index]])[0]
    thr = bundle.block_thresholds
    return ((bs > thr[:, 0]) | (bs < thr[:, 1])).reshape(bundle.layout.grid)


# ---------------------------------------------------------------- bundles


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a fitted bundle; the layout is rebuilt from config and frame shape on load."""
    pol = bundle.policy
    manifest = {
        "kind": "stkron-model",
        "config": bundle.config.to_text(),
        "frame_shape": list(bundle.layout.frame_shape),
        "holdout": None if bundle.holdout is None else list(bundle.holdout),
        "groups": [{"blocks": list(g.blocks), "dims": [g.dims.t_len, g.dims.n_len],
                    "frame_shape": list(g.frame_shape), "extras": sorted(g.arrays)}
                   for g in bundle.groups],
        "policy": {"low": pol.low_threshold, "high": pol.high_threshold,
                   "patch_grid": list(pol.patch_grid), "patch_variance": pol.patch_variance_threshold,
                   "degenerate": pol.degenerate},
    }
    arrays = {"calibration": bundle.calibration, "block_thresholds": bundle.block_thresholds}
    for b, mu in bundle.mus.items():
        arrays[f"mu/{b}"] = mu
    for i, g in enumerate(bundle.groups):
        arrays[f"group/{i}/sigma"] = g.sigma
        arrays[f"group/{i}/j"] = g.j
        for name, a in g.arrays.items():
            arrays[f"group/{i}/extra/{name}"] = a
    write_bundle(path, manifest, arrays)


def load_bundle(path) -> ModelBundle:
    manifest, arrays = read_bundle(path)
    if manifest.get("kind") != "stkron-model":
        raise FormatError("file is a bundle but not a fitted model")
    try:
        config = ExperimentConfig.from_text(manifest["config"])
        layout = block_layout(config, tuple(manifest["frame_shape"]))
        groups = []
        for i, g in enumerate(manifest["groups"]):
            extras = {name: arrays[f"group/{i}/extra/{name}"] for name in g["extras"]}
            groups.append(GroupModel(tuple(g["blocks"]), Dims(*g["dims"]), tuple(g["frame_shape"]),
                                     arrays[f"group/{i}/sigma"], arrays[f"group/{i}/j"], extras))
        mus = {b: arrays[f"mu/{b}"] for b in range(layout.n_blocks)}
        p = manifest["policy"]
        policy = DecisionPolicy(p["low"], p["high"], tuple(p["patch_grid"]), p["patch_variance"],
                                p["degenerate"])
        holdout = manifest["holdout"]
    except KeyError as exc:
        raise FormatError(f"model bundle is missing {exc}") from exc
    return ModelBundle(config, layout, groups, mus, arrays["calibration"], policy,
                       arrays["block_thresholds"], None if holdout is None else tuple(holdout))
