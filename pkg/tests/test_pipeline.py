import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stkron.config import ExperimentConfig
from stkron.errors import BadInputError, FormatError
from stkron.estimators import SampleSet, sample_covariance
from stkron.io import FrameTensor
from stkron.linalg import Dims
from stkron.pipeline import (block_clips, block_layout, clip_labels, clip_starts, estimate_covariance,
                             evaluate, excluded, fit, format_reports, load_bundle, localize_clip,
                             parse_reports, save_bundle, score, window_starts)
from stkron.synth import synth_escape

SMALL = ExperimentConfig(block_grid=(2, 2), model_frames=4, clip_frames=10, rank=2, test_stride=5,
                         buffer_frames=5, leave_out=False)


@pytest.fixture(scope="module")
def tape():
    return synth_escape(8, 8, 160, 140, seed=0)


@pytest.fixture(scope="module")
def bundle(tape):
    return fit(SMALL, tape[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 300), st.integers(1, 40), st.integers(1, 7))
def test_window_count(total, length, stride):
    n = len(window_starts(total, length, stride))
    assert n == (max((total - length) // stride + 1, 0) if total >= length else 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(40, 200), st.integers(1, 20), st.integers(0, 150), st.integers(1, 30),
       st.integers(0, 15))
def test_leave_out_windows_never_touch_holdout(total, length, h0, hlen, buffer):
    starts = window_starts(total, length, 1)
    keep = starts[~excluded(starts, length, (h0, h0 + hlen), buffer)]
    lo, hi = h0 - buffer, h0 + hlen + buffer
    for s in keep:
        assert s + length <= lo or s >= hi
    dropped = starts[excluded(starts, length, (h0, h0 + hlen), buffer)]
    for s in dropped:
        assert s < hi and s + length > lo


def test_single_training_window_gives_rank_one_sample_covariance():
    starts = window_starts(100, 4, 1)
    keep = starts[~excluded(starts, 4, (8, 96), 4)]
    assert keep.tolist() == [0]
    data = np.random.default_rng(0).standard_normal((100, 2, 2))
    x = block_clips(data, (0, 2, 0, 2), keep, 4)[0]
    s = SampleSet(x[:, None], np.zeros(16), Dims(4, 4))
    cfg = ExperimentConfig(estimator="sample", model_frames=4, shrinkage=0.25)
    sigma, _ = estimate_covariance(cfg, s, (2, 2))
    ref = 0.75 * np.outer(x, x) + 0.25 * np.dot(x, x) / 16 * np.eye(16)
    np.testing.assert_allclose(sigma, ref)
    np.testing.assert_allclose(sample_covariance(s, 0.25), ref)


def test_tied_groups_on_64_block_grid():
    cfg = ExperimentConfig(block_grid=(8, 8), tie=(2, 2))
    layout = block_layout(cfg, (16, 16))
    assert layout.n_blocks == 64 and len(layout.groups) == 16
    assert sorted(b for g in layout.groups for b in g) == list(range(64))
    with pytest.raises(BadInputError):
        block_layout(ExperimentConfig(block_grid=(3, 3), tie=(3, 3)), (10, 10))


def test_fit_tied_models_share_covariance(tape):
    cfg = SMALL.replace(tie=(2, 2))
    b = fit(cfg, tape[0])
    assert len(b.groups) == 1 and b.groups[0].blocks == (0, 1, 2, 3)


def test_scoring_training_video_reproduces_calibration(tape, bundle):
    starts = clip_starts(SMALL, tape[0].data.shape[0])
    rows = score(bundle, tape[0])
    for k, s in enumerate(starts):
        got = [r.score for r in rows if r.clip_index == k and r.block >= 0]
        assert got == bundle.calibration[s].tolist()


def test_cross_fit_calibration_matches_fold_refits(tape, bundle):
    cfg = SMALL.replace(calibration_folds=5)
    crossed = fit(cfg, tape[0])
    # window stride 1 puts calibration window k at frame k
    folds = np.array_split(np.arange(len(crossed.calibration)), 5)
    for idx in (folds[0], folds[3]):
        span = (int(idx[0]), int(idx[-1]) + SMALL.clip_frames)
        ref = fit(SMALL, tape[0], holdout=span)
        np.testing.assert_allclose(crossed.calibration[idx], ref.block_scores(tape[0].data, idx), rtol=1e-10)
    # held-out folds score above the in-sample fit of the same windows
    assert np.median(crossed.calibration[:100].sum(axis=1)) > np.median(bundle.calibration[:100].sum(axis=1))


def test_reports_deterministic_and_parseable(tape, bundle):
    a = format_reports(score(bundle, tape[0]))
    b = format_reports(score(fit(SMALL, tape[0]), tape[0]))
    assert a == b
    assert a.splitlines()[0] == "clip_index,block,score,decision,start_frame,end_frame,statistic"
    assert format_reports(parse_reports(a)) == a
    with pytest.raises(BadInputError):
        parse_reports("a,b\n1,2\n")


def test_bundle_round_trip_scores_identically(tmp_path, tape, bundle):
    save_bundle(bundle, tmp_path / "m.stkb")
    back = load_bundle(tmp_path / "m.stkb")
    assert format_reports(score(back, tape[0])) == format_reports(score(bundle, tape[0]))
    (tmp_path / "bad.stkb").write_bytes((tmp_path / "m.stkb").read_bytes()[:200])
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "bad.stkb")


def test_score_jumps_at_switch(tape, bundle):
    rows = [r for r in score(bundle, tape[0]) if r.block == -1]
    before = [r.score for r in rows if r.end_frame <= 140]
    after = [r.score for r in rows if r.start_frame >= 140]
    assert np.median(after) > 1.5 * np.median(before)


def test_leave_out_refits_exclude_clip(tape):
    cfg = SMALL.replace(leave_out=True, test_stride=40)
    b = fit(cfg, tape[0])
    held = fit(cfg, tape[0], holdout=(40, 50))
    assert held.holdout == (40, 50)
    assert not np.array_equal(held.groups[0].sigma, b.groups[0].sigma)

    rows = score(b, tape[0])
    assert {r.clip_index for r in rows} == {0, 1, 2, 3}


def test_evaluate_and_label_rules(tape, bundle):
    labels = tape[1]
    curve = evaluate(score(bundle, tape[0], leave_out=True), labels)
    assert 0.5 < curve.auc <= 1.0
    lab = np.array([0] * 5 + [1] * 5)
    assert clip_labels(lab, [0], [10], "center").tolist() == [1]
    assert clip_labels(lab, [0], [10], "any").tolist() == [1]
    assert clip_labels(lab, [0], [10], "majority").tolist() == [0]
    with pytest.raises(BadInputError):
        evaluate(score(bundle, tape[0]), np.zeros(160))


def test_localize_clip_shape(tape, bundle):
    flags = localize_clip(bundle, tape[0], 0)
    assert flags.shape == (2, 2) and flags.dtype == bool
    with pytest.raises(BadInputError):
        localize_clip(bundle, tape[0], 999)


def test_score_rejects_mismatched_tensor(bundle):
    with pytest.raises(BadInputError):
        score(bundle, FrameTensor(np.zeros((40, 6, 6))))


@pytest.mark.parametrize("estimator", ["sample", "dc-kron", "toeplitz-kron", "nonrect", "multires"])
def test_every_estimator_fits_and_scores(tape, estimator):
    cfg = SMALL.replace(estimator=estimator, delta_n=1 if estimator == "nonrect" else 0,
                        em_iter=5, test_stride=40)
    rows = score(fit(cfg, tape[0]), tape[0])
    assert all(np.isfinite(r.score) and r.score >= 0 for r in rows)
