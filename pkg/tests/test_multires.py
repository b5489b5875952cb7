import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from stkron.errors import BadInputError, NumericError
from stkron.estimators import SampleSet
from stkron.linalg import Dims
from stkron.multires.augment import PatchGeometry, augment_shifted_samples
from stkron.multires.em import canonicalize, learn_tree_em
from stkron.multires.inscale import block_partition, local_inverse, target_inscale_information
from stkron.multires.model import (MultiresConfig, MultiresModel, ScaleBlock, implied_covariance, infer,
                                   learn_multires, model_loglikelihood, observed_information)
from stkron.multires.sparsify import sparsify_logdet
from stkron.multires.targets import (scale_maps, target_scale_covariances,
                                     target_scale_covariances_naive)
from stkron.multires.tree import (TreeParams, build_quadtree, sample_tree, topology_from_parents,
                                  tree_covariance_dense)
from stkron.synth import gaussian_kernel


def _scalar_params(topology, rng):
    a, q = [], []
    for i in range(topology.n_nodes):
        if topology.parent[i] < 0:
            a.append(np.zeros((1, 0)))
            q.append(np.array([[1.0]]))
        else:
            a.append(np.array([[rng.uniform(0.6, 1.2)]]))
            q.append(np.array([[rng.uniform(0.2, 0.6)]]))
    return TreeParams(a, q)


def _leaf_samples(topology, params, n, seed):
    rng = np.random.default_rng(seed)
    x = sample_tree(topology, params, n, rng)
    return x[topology.var_index(topology.leaves)]


def test_quadtree_counts():
    t = build_quadtree(2, 2)
    assert t.n_nodes == 5 and t.n_scales == 2 and len(t.leaves) == 4
    t = build_quadtree(4, 4)
    assert [len(t.scale_nodes(m)) for m in (1, 2, 3)] == [1, 4, 16]
    t = build_quadtree(4, 4, frames=3)
    assert len(t.leaves) == 48 and t.n_nodes == 63
    assert np.sum(t.parent < 0) == 3
    np.testing.assert_array_equal(t.site_of[:21], t.site_of[21:42])


def test_quadtree_uneven_sides_keep_leaves_at_bottom():
    t = build_quadtree(3, 5)
    assert len(t.leaves) == 15
    assert np.all(t.scale_of[t.leaves] == t.n_scales)


def test_topology_rejects_cycles():
    with pytest.raises(BadInputError):
        topology_from_parents([1, 0])


def test_em_recovers_quadtree_parameters():
    topo = build_quadtree(2, 2)
    rng = np.random.default_rng(0)
    truth = canonicalize(topo, _scalar_params(topo, rng))
    x = _leaf_samples(topo, truth, 100_000, 1)
    fit = learn_tree_em(topo, x, max_iter=400, tol=1e-12)
    est = canonicalize(topo, fit.params)
    for i in range(1, topo.n_nodes):
        assert abs(est.a[i][0, 0] - truth.a[i][0, 0]) < 0.05 * abs(truth.a[i][0, 0])
        assert abs(est.q[i][0, 0] - truth.q[i][0, 0]) < 0.05 * truth.q[i][0, 0]


def test_em_replicated_leaves_floor_noise():
    topo = topology_from_parents([-1, 0, 0])
    z = np.random.default_rng(2).standard_normal(500)
    fit = learn_tree_em(topo, np.vstack([z, z]), max_iter=200)
    p = canonicalize(topo, fit.params)
    assert p.q[1][0, 0] < 1e-6 and p.q[2][0, 0] < 1e-6
    assert np.isclose(p.a[1][0, 0], p.a[2][0, 0], rtol=1e-3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_em_loglik_nondecreasing(seed):
    topo = build_quadtree(2, 4)
    x = np.random.default_rng(seed).standard_normal((8, 40))
    fit = learn_tree_em(topo, x, max_iter=50, tol=0.0)
    ll = np.array(fit.loglik)
    assert np.all(np.diff(ll) >= -1e-9 * np.maximum(1.0, np.abs(ll[:-1])))


def test_targets_efficient_equals_naive():
    topo = build_quadtree(2, 4, frames=2)
    params = _scalar_params(topo.site_topology(), np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((16, 3))
    fast = target_scale_covariances(topo, params, x)
    slow = target_scale_covariances_naive(topo, params, x)
    for m in slow.sigma_m:
        np.testing.assert_allclose(fast.sigma_m[m], slow.sigma_m[m], atol=1e-12)


def test_targets_zero_samples_is_noise_only():
    topo = build_quadtree(2, 2)
    params = _scalar_params(topo, np.random.default_rng(5))
    maps = scale_maps(topo, params)
    t = target_scale_covariances(topo, params, np.zeros((4, 5)))
    np.testing.assert_allclose(t.sigma_m[1], maps.up_noise[1], atol=1e-14)
    assert np.all(t.sigma_m[2] == 0)


def test_targets_scalar_chain():
    topo = topology_from_parents([-1, 0, 1])
    a1, a2, q0, q1, q2 = 0.9, 0.7, 2.0, 0.5, 0.3
    params = TreeParams([np.zeros((1, 0)), np.array([[a1]]), np.array([[a2]])],
                        [np.array([[q0]]), np.array([[q1]]), np.array([[q2]])])
    v0 = q0
    v1 = a1 ** 2 * v0 + q1
    v2 = a2 ** 2 * v1 + q2
    u1, u0 = a2 * v1 / v2, a1 * v0 / v1
    n1, n0 = v1 - u1 ** 2 * v2, v0 - u0 ** 2 * v1
    x = np.array([[1.5, -0.5, 2.0]])
    s = np.mean(x ** 2)
    t = target_scale_covariances(topo, params, x)
    assert np.isclose(t.sigma_m[1][0, 0], u0 ** 2 * (u1 ** 2 * s + n1) + n0, rtol=1e-12)


def _exact_model(topo, x):
    cfg = MultiresConfig(em_iter=30)
    return learn_multires(topo, x, cfg)


def test_learned_model_reproduces_leaf_target():
    topo = build_quadtree(4, 4)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((16, 60))
    x = x - x.mean(axis=1, keepdims=True)
    learned = _exact_model(topo, x)
    target = learned.targets.sigma_m[topo.n_scales]
    np.testing.assert_allclose(implied_covariance(learned.model), target, atol=1e-6)


def test_local_inverse_diagonal_is_exact():
    sigma = np.diag(np.arange(1.0, 7.0))
    coords = np.stack([np.zeros(6, int), np.arange(6)], axis=1)
    for halo in (0, 1, 3):
        inv, ridged = local_inverse(sigma, coords, np.array([2, 3]), halo)
        np.testing.assert_allclose(inv, np.diag([1 / 3, 1 / 4]))
        assert not ridged


def test_local_inverse_markov_chain_halo():
    n = 15
    j = 2.2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    sigma = np.linalg.inv(j)
    coords = np.stack([np.zeros(n, int), np.arange(n)], axis=1)
    block = np.array([7])
    errs = [abs(local_inverse(sigma, coords, block, h)[0][0, 0] - j[7, 7]) for h in range(0, 6)]
    assert errs[3] < 1e-4
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_block_partition_restricts_information():
    topo = build_quadtree(4, 4)
    x = np.random.default_rng(7).standard_normal((16, 50))
    params = learn_tree_em(topo, x, max_iter=10).params
    targets = target_scale_covariances(topo, params, x)
    part = block_partition(topo, 2)
    out = target_inscale_information(topo, targets, params, part, local_halo=1)
    m = topo.n_scales
    j = out.j_star_m[m]
    assert np.all(j[~part.mask(m, j.shape[0])] == 0)
    assert len(part.blocks[m]) == 4


def test_sparsify_zero_lambda_is_inverse():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((5, 5))
    j = a @ a.T + np.eye(5)
    np.testing.assert_allclose(sparsify_logdet(j, 0.0), np.linalg.inv(j), atol=1e-8)


def test_sparsify_saturates_to_diagonal():
    sigma = np.array([[1.0, 0.3, 0.1], [0.3, 2.0, -0.2], [0.1, -0.2, 1.5]])
    j = np.linalg.inv(sigma)
    k = sparsify_logdet(j, 10.0)
    assert np.all(np.abs(k - np.diag(np.diag(k))) < 1e-10)
    # with every coupling penalised away the optimum is 1 / J_ii
    np.testing.assert_allclose(np.diag(k), 1.0 / np.diag(j), rtol=1e-6)


def test_sparsify_random_inputs_stay_pd():
    rng = np.random.default_rng(9)
    for _ in range(50):
        a = rng.standard_normal((6, 6))
        j = a @ a.T / 6 + 0.5 * np.eye(6)
        counts = []
        for lam in (0.01, 0.1):
            k = sparsify_logdet(j, lam)
            assert np.linalg.eigvalsh(k)[0] > 0
            counts.append(np.sum(np.abs(k) > 1e-8))
        assert counts[1] <= counts[0]


def test_sparsify_rejects_indefinite():
    with pytest.raises(NumericError):
        sparsify_logdet(np.diag([1.0, -1.0]), 0.1)


def _small_model():
    topo = build_quadtree(4, 4)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((16, 80))
    x = x - x.mean(axis=1, keepdims=True)
    return _exact_model(topo, x).model


def test_infer_noisy_matches_dense_solve():
    model = _small_model()
    y = np.random.default_rng(11).standard_normal(16)
    res = infer(model, y, mode="noisy", noise_var=0.5, tol=1e-12, max_iter=5000)
    j = model.information.toarray()
    obs = model.observed_vars
    j[obs, obs] += 2.0
    h = np.zeros(j.shape[0])
    h[obs] = y / 0.5
    np.testing.assert_allclose(res.mean, np.linalg.solve(j, h), atol=1e-8)


def test_infer_exact_leaves_are_clamped():
    model = _small_model()
    y = np.random.default_rng(12).standard_normal(16)
    res = infer(model, y, mode="exact")
    np.testing.assert_array_equal(res.mean[model.observed_vars], y)
    with pytest.raises(BadInputError):
        infer(model, y, mode="bogus")


def test_infer_pure_tree_one_iteration():
    topo = build_quadtree(2, 2)
    params = _scalar_params(topo, np.random.default_rng(13))
    j_full = sp.csr_matrix(np.linalg.inv(tree_covariance_dense(topo, params)))
    diag = j_full.diagonal()
    j_h = (j_full - sp.diags(diag)).tocsr()
    blocks = [ScaleBlock(int(topo.scale_of[i]), np.array([i]), np.array([[1 / diag[i]]]))
              for i in range(topo.n_nodes)]
    model = MultiresModel(topo, params, j_h, blocks, block_partition(topo), np.zeros(4))
    y = np.array([0.3, -1.0, 0.5, 2.0])
    res = infer(model, y, mode="exact", tol=1e-12)
    assert res.iterations == 1
    hid = model.hidden_vars
    cov = tree_covariance_dense(topo, params)
    obs = model.observed_vars
    ref = cov[np.ix_(hid, obs)] @ np.linalg.solve(cov[np.ix_(obs, obs)], y)
    np.testing.assert_allclose(res.mean[hid], ref, atol=1e-12)


def test_loglikelihood_dense_oracle_and_mean():
    model = _small_model()
    assert model_loglikelihood(model, model.mu) == 0.0
    x = np.random.default_rng(14).standard_normal(16)
    dense = x @ np.linalg.inv(implied_covariance(model)) @ x
    assert np.isclose(model_loglikelihood(model, x), dense, rtol=1e-6)
    np.testing.assert_allclose(observed_information(model), np.linalg.inv(implied_covariance(model)),
                               rtol=1e-6, atol=1e-8)


def test_loglikelihood_invariant_to_hidden_reordering():
    model = _small_model()
    topo = model.topology
    hidden = np.flatnonzero(topo.scale_of < topo.n_scales)
    perm = np.arange(topo.n_nodes)
    perm[hidden] = hidden[::-1]
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    ptopo = topo.permuted(perm)
    params = TreeParams([model.params.a[k] for k in perm], [model.params.q[k] for k in perm])
    blocks = [ScaleBlock(b.scale, inv[b.index], b.cov) for b in model.sigma_c]
    moved = MultiresModel(ptopo, params, model.j_h[perm][:, perm].tocsr(), blocks,
                          block_partition(ptopo), model.mu)
    x = np.random.default_rng(15).standard_normal(16)
    assert np.isclose(model_loglikelihood(moved, x), model_loglikelihood(model, x), rtol=1e-10)


def _field_video(rng, frames, size, kernel_len=2.0):
    k = gaussian_kernel(size, size, kernel_len, 0.05)
    chol = np.linalg.cholesky(k)
    return (chol @ rng.standard_normal((size * size, frames))).T.reshape(frames, size, size)


def test_augment_counting_and_identity():
    rng = np.random.default_rng(16)
    video = _field_video(rng, 5, 8)
    origins = np.array([[f, 2, 2] for f in range(5)])
    geo = PatchGeometry(video, origins, (1, 3, 3))
    clips = np.stack([geo.cut(o) for o in origins], axis=1)
    s = SampleSet.from_clips(clips, Dims(1, 9))
    assert augment_shifted_samples(s, [], geo) is s
    aug = augment_shifted_samples(s, [(1, 0), (0, -1)], geo)
    assert aug.n_samples == 15
    with pytest.raises(BadInputError):
        augment_shifted_samples(s, [(6, 0)], geo)


def test_augment_improves_stationary_covariance_estimate():
    pop = gaussian_kernel(3, 3, 2.0, 0.05)
    wins = 0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        video = _field_video(rng, 12, 8)
        origins = np.array([[f, 2, 2] for f in range(12)])
        geo = PatchGeometry(video, origins, (1, 3, 3))
        s = SampleSet.from_clips(np.stack([geo.cut(o) for o in origins], axis=1), Dims(1, 9))
        aug = augment_shifted_samples(s, [(1, 0), (0, 1), (-1, 0), (0, -1)], geo)
        base_err = np.linalg.norm(s.x @ s.x.T / s.n_samples - pop)
        aug_err = np.linalg.norm(aug.x @ aug.x.T / aug.n_samples - pop)
        wins += aug_err < base_err
    assert wins >= 15
