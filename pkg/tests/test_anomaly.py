import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stkron.anomaly import (HIGH_LIKELIHOOD, LOW_LIKELIHOOD, NORMAL, PATCH_VARIANCE, ArScorer,
                            DecisionPolicy, ar_score, calibrate_patch_thresholds,
                            calibrate_patch_variance, calibrate_thresholds, decide,
                            detection_statistic, localize, pairwise_auc, patch_scorers,
                            patch_scores, patch_variance, roc_auc)
from stkron.errors import BadInputError
from stkron.linalg import Dims, dense_block_toeplitz_extension
from stkron.synth import lds_covariance


def _spd(rng, k, floor=1.0):
    a = rng.standard_normal((k, k))
    return a @ a.T / k + floor * np.eye(k)


def test_ar_score_zero_at_mean():
    rng = np.random.default_rng(0)
    mu = rng.standard_normal(3)
    sc = ArScorer(_spd(rng, 6), Dims(2, 3), mu)
    assert ar_score(sc, np.tile(mu, 5), 5) == 0.0


def test_ar_score_t1_equal_t_is_mahalanobis():
    rng = np.random.default_rng(1)
    j = _spd(rng, 8)
    mu = rng.standard_normal(4)
    x = rng.standard_normal(8)
    for ext in ("banded", "markov"):
        sc = ArScorer(j, Dims(2, 4), mu, extension=ext)
        d = x - np.tile(mu, 2)
        assert np.isclose(ar_score(sc, x, 2), d @ j @ d, rtol=1e-10)


def test_ar_score_banded_oracle_t2_n2_t4():
    rng = np.random.default_rng(2)
    j = _spd(rng, 4, floor=3.0)
    sc = ArScorer(j, Dims(2, 2), np.zeros(2))
    x = rng.standard_normal(8)
    dense = dense_block_toeplitz_extension(j, Dims(2, 2), 4)
    assert np.isclose(ar_score(sc, x, 4), x @ dense @ x, rtol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([2, 3]), st.sampled_from([2, 4]),
       st.sampled_from([1, 2, 4]))
def test_ar_score_matches_dense_extension(seed, t, n, mult):
    rng = np.random.default_rng(seed)
    j = _spd(rng, t * n, floor=2.0 * t)
    t1 = mult * t
    sc = ArScorer(j, Dims(t, n), np.zeros(n))
    x = rng.standard_normal(t1 * n)
    ref = x @ dense_block_toeplitz_extension(j, Dims(t, n), t1) @ x
    assert abs(ar_score(sc, x, t1) - ref) <= 1e-10 * max(1.0, abs(ref))


def test_markov_extension_is_exact_for_vector_ar1():
    rng = np.random.default_rng(3)
    n = 3
    f = 0.9 * np.linalg.qr(rng.standard_normal((n, n)))[0]
    q = _spd(rng, n, floor=0.2)
    sc = ArScorer.from_covariance(lds_covariance(f, q, 2), Dims(2, n), np.zeros(n), extension="markov")
    for t1 in (2, 3, 7):
        x = rng.standard_normal(t1 * n)
        ref = x @ np.linalg.solve(lds_covariance(f, q, t1), x)
        assert np.isclose(ar_score(sc, x, t1), ref, rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 4), st.integers(0, 6))
def test_markov_scores_are_nonnegative(seed, t, extra):
    rng = np.random.default_rng(seed)
    n = 2
    sigma = _spd(rng, t * n, floor=0.01)
    sc = ArScorer.from_covariance(sigma, Dims(t, n), np.zeros(n), extension="markov")
    x = rng.standard_normal((t + extra) * n)
    assert sc.score(x) >= -1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["banded", "markov"]))
def test_ar_score_shift_invariant(seed, ext):
    rng = np.random.default_rng(seed)
    j = _spd(rng, 6, floor=3.0)
    mu = rng.standard_normal(2)
    c = rng.standard_normal(2)
    x = rng.standard_normal(5 * 2)
    a = ArScorer(j, Dims(3, 2), mu, extension=ext).score(x)
    b = ArScorer(j, Dims(3, 2), mu + c, extension=ext).score(x + np.tile(c, 5))
    assert np.isclose(a, b, rtol=1e-10, atol=1e-12)


def test_sliding_scores_match_single_clips():
    rng = np.random.default_rng(4)
    sc = ArScorer.from_covariance(_spd(rng, 9), Dims(3, 3), rng.standard_normal(3), extension="markov")
    frames = rng.standard_normal((30, 3))
    starts = [0, 4, 11, 20]
    got = sc.sliding_scores(frames, starts, 10)
    ref = [sc.score(frames[s:s + 10].ravel()) for s in starts]
    np.testing.assert_allclose(got, ref, rtol=1e-10)
    np.testing.assert_allclose(sc.score_many(np.stack([frames[s:s + 10].ravel() for s in starts])), ref,
                               rtol=1e-10)


def test_scorer_input_checks():
    j = np.eye(4)
    with pytest.raises(BadInputError):
        ArScorer(j, Dims(2, 2), np.zeros(3))
    with pytest.raises(BadInputError):
        ArScorer(j, Dims(2, 2), np.zeros(2), extension="other")
    sc = ArScorer(j, Dims(2, 2), np.zeros(4))
    with pytest.raises(BadInputError):
        sc.score(np.zeros(6))
    with pytest.raises(BadInputError):
        ar_score(ArScorer(j, Dims(2, 2), np.zeros(2)), np.zeros(2), 1)


def test_calibrate_thresholds_quantiles():
    p = calibrate_thresholds(np.arange(1, 101), 0.05, 0.05)
    assert np.isclose(p.low_threshold, 95.05) and np.isclose(p.high_threshold, 5.95)
    p0 = calibrate_thresholds(np.arange(1, 101), 0.0, 0.0)
    assert p0.low_threshold == 100 and p0.high_threshold == 1
    with pytest.raises(BadInputError):
        calibrate_thresholds(np.arange(5), 0.05, 0.05)
    assert calibrate_thresholds(np.ones(30), 0.1, 0.1).degenerate


def test_in_model_scores_have_chi_square_mean():
    rng = np.random.default_rng(5)
    t, n = 3, 4
    sigma = _spd(rng, t * n)
    sc = ArScorer.from_covariance(sigma, Dims(t, n), np.zeros(t * n))
    x = np.linalg.cholesky(sigma) @ rng.standard_normal((t * n, 10_000))
    s = sc.score_many(x.T)
    assert abs(s.mean() - t * n) < 0.05 * t * n


def _identity_model(t=2, h=4, w=4):
    n = h * w
    return ArScorer(np.eye(t * n), Dims(t, n), np.zeros(n), sigma=np.eye(t * n), frame_shape=(h, w))


def test_decide_all_mean_is_high_likelihood():
    sc = _identity_model()
    policy = calibrate_thresholds(np.random.default_rng(6).chisquare(32, 500), 0.05, 0.05)
    assert decide(policy, sc, np.zeros(32)).decision == HIGH_LIKELIHOOD
    assert decide(policy, sc, np.full(32, 10.0)).decision == LOW_LIKELIHOOD


def test_decide_in_model_normal_rate():
    rng = np.random.default_rng(7)
    sc = _identity_model()
    policy = calibrate_thresholds(rng.chisquare(32, 20_000), 0.05, 0.05, (2, 2))
    patches = patch_scorers(sc, (2, 2))
    draws = rng.standard_normal((1000, 32))
    rate = np.mean([decide(policy, sc, x, patches).decision == NORMAL for x in draws])
    assert abs(rate - 0.9) <= 3 * np.sqrt(0.09 / 1000)


def test_decide_patch_variance_cancellation():
    rng = np.random.default_rng(8)
    sc = _identity_model()
    scorers, layout = patch_scorers(sc, (2, 2))
    draws = rng.standard_normal((2000, 32))
    policy = calibrate_thresholds(sc.score_many(draws), 0.05, 0.05, (2, 2))
    variances = [patch_variance(patch_scores(scorers, layout, x, 16)) for x in draws[:500]]
    policy = calibrate_patch_variance(policy, variances, 0.05)
    # patch deviations with normalised patch scores in ratio 9 : 9 : 1/9 : 1/9 and total 32
    target = np.array([9.0, 9.0, 1 / 9, 1 / 9]) * 4.0 / (18 + 2 / 9)
    frames = np.zeros((2, 16))
    for k, pix in enumerate(layout.pixels):
        v = rng.standard_normal((2, len(pix)))
        frames[:, pix] = v * np.sqrt(target[k] * v.size / np.sum(v * v))
    rep = decide(policy, sc, frames.ravel(), (scorers, layout))
    assert np.isclose(rep.clip_score, 32.0)
    np.testing.assert_allclose(rep.patch_scores.ravel(), target, rtol=1e-12)
    assert rep.decision == PATCH_VARIANCE


def test_decide_is_monotone_beyond_low_threshold():
    policy = DecisionPolicy(40.0, 20.0)
    sc = _identity_model()
    x = np.ones(32) * np.sqrt(41.0 / 32)
    for scale in (1.0, 1.5, 3.0):
        assert decide(policy, sc, scale * x).decision == LOW_LIKELIHOOD


def test_localize_calibrated_and_white_noise_patch():
    rng = np.random.default_rng(9)
    t, n = 4, 64
    sc = _identity_model(t, 8, 8)
    scorers, layout = patch_scorers(sc, (2, 2))
    fx = rng.standard_normal((4000, t, n))
    ps = np.stack([np.sum(fx[:, :, p] ** 2, axis=(1, 2)) / (t * len(p)) for p in layout.pixels], axis=1)
    thr = calibrate_patch_thresholds(ps, 0.003, 0.003)
    clean = [not localize(scorers, layout, x, n, thr).any() for x in rng.standard_normal((500, t * n))]
    assert np.mean(clean) >= 0.95
    hits = 0
    for _ in range(200):
        x = rng.standard_normal((t, n))
        x[:, layout.pixels[1]] = np.sqrt(5.0) * rng.standard_normal((t, len(layout.pixels[1])))
        hits += localize(scorers, layout, x.ravel(), n, thr)[0, 1]
    assert hits / 200 >= 0.9
    assert localize(scorers, layout, np.zeros(t * n), n, thr).all()


def test_roc_auc_examples():
    assert roc_auc([0.1, 0.2, 0.3], [0.5, 0.9]).auc == 1.0
    same = [0.3, 0.1, 0.7, 0.7]
    assert roc_auc(same, same).auc == 0.5
    with pytest.raises(BadInputError):
        roc_auc([], [1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_roc_auc_equals_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    neg = np.round(rng.standard_normal(50), 1)
    pos = np.round(rng.standard_normal(50) + 0.5, 1)
    auc = roc_auc(neg, pos).auc
    assert 0.0 <= auc <= 1.0
    assert abs(auc - pairwise_auc(neg, pos)) < 1e-12


def test_detection_statistic_is_two_sided():
    policy = DecisionPolicy(30.0, 10.0)
    np.testing.assert_allclose(detection_statistic([20.0, 0.0, 40.0, 25.0], policy), [0, 2, 2, 0.5])
