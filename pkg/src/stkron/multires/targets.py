"""Per-scale target covariances propagated up from leaf samples.

Scales run from 1 (roots) to ``M`` (leaf slots).  Within a scale the
variables are ordered frame-major, then by site.  Tree parameters are tied
across frames, so every map below is computed once on the single-frame site
tree and applied frame by frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import block_diag

from ..errors import BadInputError
from ..estimators import (GridMapping, SampleSet, dc_kron_pca_cov, dummy_mask,
                          sample_covariance)
from ..linalg import Dims
from .tree import TreeParams, TreeTopology


@dataclass
class ScaleMaps:
    """Single-frame per-scale quantities of a tree, indexed by scale ``m``.

    ``down[m]`` stacks the edge matrices from scale ``m-1`` into scale
    ``m``; ``noise[m]`` is the block-diagonal of node noises at scale ``m``;
    ``cov[m]`` the tree marginal; ``up[m]`` and ``up_noise[m]`` give the
    reversed recursion ``x_m = up[m] x_{m+1} + w``, ``Cov(w) = up_noise[m]``.
    """

    n_scales: int
    sizes: Dict[int, int]
    down: Dict[int, np.ndarray]
    noise: Dict[int, np.ndarray]
    cov: Dict[int, np.ndarray]
    up: Dict[int, np.ndarray]
    up_noise: Dict[int, np.ndarray]


@dataclass
class ScaleTargets:
    """Target covariances ``sigma_m`` and conditional informations ``j_star_m``.

    Both map a scale index to a dense matrix over that scale's variables
    (all frames).  ``ridge_flagged`` lists scales where a halo submatrix
    needed a ridge.
    """

    sigma_m: Dict[int, np.ndarray]
    j_star_m: Optional[Dict[int, np.ndarray]] = None
    ridge_flagged: Optional[List[int]] = None

    def scale(self, m: int) -> np.ndarray:
        if m not in self.sigma_m:
            raise BadInputError(f"scale {m} out of range 1..{max(self.sigma_m)}")
        return self.sigma_m[m]


def check_leveled(topology: TreeTopology) -> None:
    slots = topology.leaf_slots()
    if np.any(topology.scale_of[slots] != topology.n_scales):
        raise BadInputError("all leaf slots must sit at the bottom scale")


def scale_vars(topology: TreeTopology, m: int) -> np.ndarray:
    """Global variable indices of scale ``m`` in scale-local order."""
    if not 1 <= m <= topology.n_scales:
        raise BadInputError(f"scale {m} out of range 1..{topology.n_scales}")
    return topology.var_index(topology.scale_nodes(m))


def scale_maps(site: TreeTopology, params: TreeParams) -> ScaleMaps:
    check_leveled(site)
    big_m = site.n_scales
    nodes = {m: site.scale_nodes(m) for m in range(1, big_m + 1)}
    sizes = {m: int(site.node_dim[nodes[m]].sum()) for m in nodes}
    local = {}
    for m, nd in nodes.items():
        starts = np.concatenate([[0], np.cumsum(site.node_dim[nd])])
        for k, i in enumerate(nd):
            local[i] = (starts[k], starts[k + 1])
    down, noise, cov = {}, {}, {}
    for m in range(1, big_m + 1):
        noise[m] = block_diag(*[params.q[i] for i in nodes[m]])
        if m == 1:
            cov[m] = noise[m]
            continue
        f = np.zeros((sizes[m], sizes[m - 1]))
        for i in nodes[m]:
            a0, a1 = local[i]
            p0, p1 = local[site.parent[i]]
            f[a0:a1, p0:p1] = params.a[i]
        down[m] = f
        c = f @ cov[m - 1] @ f.T + noise[m]
        cov[m] = 0.5 * (c + c.T)
    up, up_noise = {}, {}
    for m in range(1, big_m):
        cross = cov[m] @ down[m + 1].T
        up[m] = np.linalg.solve(cov[m + 1], cross.T).T
        qb = cov[m] - up[m] @ cross.T
        up_noise[m] = 0.5 * (qb + qb.T)
    return ScaleMaps(big_m, sizes, down, noise, cov, up, up_noise)


def _leaf_positions(topology: TreeTopology) -> np.ndarray:
    """Position of each observed leaf within its frame's leaf-scale slots."""
    site = topology.site_topology()
    slot_sites = site.scale_nodes(site.n_scales)
    return np.searchsorted(slot_sites, topology.site_of[topology.leaves])


def fill_leaf_slots(topology: TreeTopology, maps: ScaleMaps, x: np.ndarray):
    """Posterior-mean fill of hidden leaf slots plus their posterior covariance.

    Returns ``(y, noise)`` with ``y`` of shape (frames, n_leaf_slots, ns) and
    ``noise`` a per-frame list of slot covariances (zero when fully
    observed).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(topology.leaves):
        raise BadInputError(f"expected {len(topology.leaves)} sample rows")
    big_m = maps.n_scales
    n_slot = maps.sizes[big_m]
    ns = x.shape[1]
    pos = _leaf_positions(topology)
    fr = topology.frame_of[topology.leaves]
    s_tree = maps.cov[big_m]
    y = np.zeros((topology.frames, n_slot, ns))
    noise = []
    for f in range(topology.frames):
        rows = np.flatnonzero(fr == f)
        obs = pos[rows]
        y[f, obs] = x[rows]
        hid = np.setdiff1d(np.arange(n_slot), obs)
        nf = np.zeros((n_slot, n_slot))
        if hid.size:
            if obs.size:
                s_oo = s_tree[np.ix_(obs, obs)]
                s_ho = s_tree[np.ix_(hid, obs)]
                gain = np.linalg.solve(s_oo, s_ho.T).T
                y[f, hid] = gain @ x[rows]
                post = s_tree[np.ix_(hid, hid)] - gain @ s_ho.T
            else:
                post = s_tree[np.ix_(hid, hid)]
            nf[np.ix_(hid, hid)] = 0.5 * (post + post.T)
        noise.append(nf)
    return y, noise


def _first_term(y: np.ndarray, shrinkage: float, kron_rank: Optional[int],
                extra_mask: Optional[np.ndarray]) -> np.ndarray:
    frames, n, ns = y.shape
    dims = Dims(frames, n)
    s = SampleSet(y.reshape(frames * n, ns), np.zeros(frames * n), dims)
    cov = sample_covariance(s, shrinkage)
    if kron_rank is not None and frames > 1:
        cov = dc_kron_pca_cov(cov, dims, kron_rank, extra_mask=extra_mask).matrix
    return cov


def target_scale_covariances(topology: TreeTopology, params: TreeParams, x: np.ndarray,
                             shrinkage: float = 0.0, kron_rank: Optional[int] = None,
                             kron_scales: Optional[Sequence[int]] = None,
                             mapping: Optional[GridMapping] = None,
                             maps: Optional[ScaleMaps] = None) -> ScaleTargets:
    """Per-scale targets from samples propagated up the reversed tree.

    The sample term ``(1/ns) Y_m Y_m^T`` with ``Y_m = up[m] Y_{m+1}`` is
    optionally shrunk or replaced by a diagonally corrected Kronecker fit
    (at ``kron_scales``, default all); the accumulated reverse-recursion
    noise is added afterwards.  The ``NT x NT`` sample covariance of the
    leaves is only formed at the leaf scale itself.
    """
    if maps is None:
        maps = scale_maps(topology.site_topology(), params)
    big_m = maps.n_scales
    y, noise = fill_leaf_slots(topology, maps, x)
    kron_at = set(range(1, big_m + 1) if kron_scales is None else kron_scales)
    mask = None
    if mapping is not None:
        if mapping.padded_n != maps.sizes[big_m] or mapping.t_len != topology.frames:
            raise BadInputError("grid mapping does not match the leaf layer")
        mask = dummy_mask(mapping)
    out = {}
    for m in range(big_m, 0, -1):
        if m < big_m:
            y = np.einsum("ij,fjs->fis", maps.up[m], y)
            noise = [maps.up[m] @ nf @ maps.up[m].T + maps.up_noise[m] for nf in noise]
        rank = kron_rank if m in kron_at else None
        first = _first_term(y, shrinkage, rank, mask if m == big_m else None)
        sig = first + block_diag(*noise)
        out[m] = 0.5 * (sig + sig.T)
    return ScaleTargets(out)


def target_scale_covariances_naive(topology: TreeTopology, params: TreeParams,
                                   x: np.ndarray) -> ScaleTargets:
    """Reference recursion ``S_m = A S_{m+1} A^T + Q`` from the full leaf covariance."""
    maps = scale_maps(topology.site_topology(), params)
    big_m = maps.n_scales
    y, noise = fill_leaf_slots(topology, maps, x)
    frames, n, ns = y.shape
    flat = y.reshape(frames * n, ns)
    sig = flat @ flat.T / ns + block_diag(*noise)
    out = {big_m: sig}
    eye = np.eye(frames)
    for m in range(big_m - 1, 0, -1):
        a = np.kron(eye, maps.up[m])
        sig = a @ sig @ a.T + np.kron(eye, maps.up_noise[m])
        out[m] = sig
    return ScaleTargets(out)
