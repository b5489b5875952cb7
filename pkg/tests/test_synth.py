import numpy as np
import pytest

from stkron.errors import BadInputError
from stkron.estimators import nonrect_kron, sample_covariance
from stkron.linalg import rearrange
from stkron.synth import (escape_covariances, lds_covariance, synth_escape, synth_flow, synth_flow_video,
                          synth_traveling_wave)


def _rearranged_sv(cov, dims):
    return np.linalg.svd(rearrange(cov, dims).data, compute_uv=False)


def test_static_wave_is_separable():
    clips = synth_traveling_wave(3, 4, 5, c=0.0, noise_sd=0.0, n_clips=10)
    s = _rearranged_sv(clips.covariance, clips.samples.dims)
    assert s[1] < 1e-10 * s[0]


def test_moving_wave_has_two_terms_and_empirical_energy():
    clips = synth_traveling_wave(3, 4, 5, c=0.6, noise_sd=0.0, n_clips=10_000, seed=1)
    s = _rearranged_sv(clips.covariance, clips.samples.dims)
    assert s[1] > 1e-3 * s[0] and s[2] < 1e-10 * s[0]
    e = _rearranged_sv(sample_covariance(clips.samples), clips.samples.dims) ** 2
    assert e[:2].sum() / e.sum() >= 0.99


def test_wave_determinism():
    a = synth_traveling_wave(2, 3, 4, n_clips=20, seed=5)
    b = synth_traveling_wave(2, 3, 4, n_clips=20, seed=5)
    c = synth_traveling_wave(2, 3, 4, n_clips=20, seed=6)
    assert a.clips.tobytes() == b.clips.tobytes()
    assert a.clips.tobytes() != c.clips.tobytes()
    with pytest.raises(BadInputError):
        synth_traveling_wave(2, 3, 4, h_spec="spiky")


def test_flow_zero_shift_is_separable():
    clips = synth_flow(2, 4, 3, 0, n_clips=5)
    s = _rearranged_sv(clips.covariance, clips.samples.dims)
    assert s[1] < 1e-10 * s[0]


def test_flow_shift_needs_embedding():
    clips = synth_flow(1, 4, 3, 1, n_clips=10_000, seed=2)
    dims = clips.samples.dims
    s = _rearranged_sv(clips.covariance, dims)
    assert s[1] > 1e-3 * s[0]
    fit = nonrect_kron(clips.samples, clips.mapping, 1)
    resid = np.linalg.norm(fit.matrix - sample_covariance(clips.samples))
    assert resid < 1e-2 * np.linalg.norm(clips.covariance)


def test_flow_seeds():
    a = synth_flow(2, 5, 3, 1, n_clips=4, seed=0).clips
    assert a.tobytes() == synth_flow(2, 5, 3, 1, n_clips=4, seed=0).clips.tobytes()
    assert a.tobytes() != synth_flow(2, 5, 3, 1, n_clips=4, seed=1).clips.tobytes()
    with pytest.raises(BadInputError):
        synth_flow(2, 3, 4, 1)


def test_flow_video_moves_with_delta_n():
    v = synth_flow_video(4, 8, 30, delta_n=1, seed=0).data
    # frame t+1 shifted left by one column is strongly correlated with frame t
    lagged = np.corrcoef(v[1:, :, :-1].ravel(), v[:-1, :, 1:].ravel())[0, 1]
    still = np.corrcoef(v[1:, :, 1:].ravel(), v[:-1, :, 1:].ravel())[0, 1]
    assert lagged > still


def test_escape_labels_and_determinism():
    t, labels = synth_escape(8, 8, 60, 40, seed=3)
    assert labels.tolist() == [0] * 40 + [1] * 20
    t2, _ = synth_escape(8, 8, 60, 40, seed=3)
    assert t.data.tobytes() == t2.data.tobytes()
    with pytest.raises(BadInputError):
        synth_escape(8, 8, 60, 60)


def test_escape_covariances_differ():
    pre, post = escape_covariances(16, 16, 2)
    assert np.linalg.norm(pre - post) > 0.5 * np.linalg.norm(pre)


def test_dynamics_mode_keeps_frame_marginal():
    pre, post = escape_covariances(6, 6, 3, mode="dynamics")
    n = 36
    np.testing.assert_allclose(pre[:n, :n], post[:n, :n], atol=1e-12)
    assert np.linalg.norm(pre - post) > 0.1 * np.linalg.norm(pre)


def test_lds_covariance_scalar_ar1():
    cov = lds_covariance(np.array([[0.5]]), np.array([[0.75]]), 3)
    np.testing.assert_allclose(cov, 0.5 ** np.abs(np.subtract.outer(range(3), range(3))))
