"""Expectation-maximisation for Gaussian trees with hidden internal nodes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import BadInputError
from .gaussian_tree import TreeSystem, solve_tree, system_from_params
from .tree import TreeParams, TreeTopology, site_logdet_information

logger = logging.getLogger(__name__)

Q_FLOOR = 1e-10


@dataclass
class FrameGroup:
    """Frames of the per-frame tree that share one observed-leaf pattern.

    ``observed`` holds site node ids and ``y`` the matching rows
    (one column per sample frame).
    """

    observed: np.ndarray
    y: np.ndarray


@dataclass
class EStepResult:
    loglik: float
    count: int
    s_ii: List[np.ndarray]
    s_ip: List[Optional[np.ndarray]]
    s_pp: List[Optional[np.ndarray]]
    means: List[np.ndarray] = field(default_factory=list)


@dataclass
class EMResult:
    params: TreeParams
    loglik: List[float]
    iterations: int
    converged: bool


def frame_groups(topology: TreeTopology, x: np.ndarray) -> List[FrameGroup]:
    """Split forest-leaf samples into per-frame observations of the site tree.

    ``x`` has one row per entry of ``topology.leaves`` and one column per
    sample.  Frames whose observed leaf sites coincide are pooled.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(topology.leaves):
        raise BadInputError(
            f"sample rows {x.shape[0] if x.ndim == 2 else x.shape} != leaf count {len(topology.leaves)}")
    leaf_frame = topology.frame_of[topology.leaves]
    leaf_site = topology.site_of[topology.leaves]
    pooled = {}
    for f in range(topology.frames):
        rows = np.flatnonzero(leaf_frame == f)
        if rows.size == 0:
            continue
        sites = leaf_site[rows]
        order = np.argsort(sites)
        key = tuple(sites[order])
        pooled.setdefault(key, []).append(x[rows[order]])
    return [FrameGroup(np.array(k, dtype=int), np.concatenate(v, axis=1)) for k, v in pooled.items()]


def _estep_group(site: TreeTopology, system: TreeSystem, logdet_j: float, g: FrameGroup,
                 keep_means: bool):
    off = site.offsets
    n = site.n_nodes
    obs_nodes = g.observed
    hid = np.setdiff1d(np.arange(n), obs_nodes)
    obs_var = site.var_index(obs_nodes)
    k = g.y.shape[1]

    # h_H = -J_HO y, assembled edge by edge (observed nodes are leaves)
    h = np.zeros((site.n_vars, k))
    yfull = np.zeros((site.n_vars, k))
    yfull[obs_var] = g.y
    is_obs = np.zeros(n, dtype=bool)
    is_obs[obs_nodes] = True
    quad = 0.0
    for i in obs_nodes:
        yi = yfull[off[i]:off[i + 1]]
        quad += float(np.sum(yi * (system.diag[i] @ yi)))
        p = site.parent[i]
        if p >= 0:
            if is_obs[p]:
                raise BadInputError("observed nodes must be leaves")
            h[off[p]:off[p + 1]] -= system.edge[i].T @ yi
    sol = solve_tree(system, h, solve_nodes=hid, covariances=True)
    mean = sol.mean
    mean[obs_var] = g.y
    hid_var = site.var_index(hid)
    quad -= float(np.sum(h[hid_var] * mean[hid_var]))
    n_obs = len(obs_var)
    loglik = -0.5 * (k * n_obs * np.log(2 * np.pi) + quad - k * (logdet_j - sol.logdet))

    s_ii, s_ip, s_pp = [], [], []
    for i in range(n):
        mi = mean[off[i]:off[i + 1]]
        sii = mi @ mi.T
        if not is_obs[i]:
            sii = sii + k * sol.cov[i]
        s_ii.append(sii)
        p = site.parent[i]
        if p < 0:
            s_ip.append(None)
            s_pp.append(None)
            continue
        mp = mean[off[p]:off[p + 1]]
        sip = mi @ mp.T
        if not is_obs[i]:
            sip = sip + k * sol.cross[i]
        s_ip.append(sip)
        s_pp.append(mp @ mp.T + k * sol.cov[p])
    return loglik, k, s_ii, s_ip, s_pp, (mean if keep_means else None)


def e_step(site: TreeTopology, params: TreeParams, groups: List[FrameGroup],
           keep_means: bool = False) -> EStepResult:
    """Posterior second moments summed over all groups, and the loglikelihood."""
    system = system_from_params(site, params)
    logdet_j = site_logdet_information(site, params)
    total = None
    means = []
    for g in groups:
        ll, k, sii, sip, spp, mean = _estep_group(site, system, logdet_j, g, keep_means)
        if keep_means:
            means.append(mean)
        if total is None:
            total = EStepResult(ll, k, sii, sip, spp)
            continue
        total.loglik += ll
        total.count += k
        for i in range(site.n_nodes):
            total.s_ii[i] = total.s_ii[i] + sii[i]
            if sip[i] is not None:
                total.s_ip[i] = total.s_ip[i] + sip[i]
                total.s_pp[i] = total.s_pp[i] + spp[i]
    total.means = means
    return total


def _floor_psd(q: np.ndarray):
    q = 0.5 * (q + q.T)
    w, v = np.linalg.eigh(q)
    if w[0] >= Q_FLOOR:
        return q, False
    return (v * np.maximum(w, Q_FLOOR)) @ v.T, True


def m_step(site: TreeTopology, stats: EStepResult) -> TreeParams:
    k = float(stats.count)
    a, q = [], []
    floored = False
    for i in range(site.n_nodes):
        sii = stats.s_ii[i] / k
        if site.parent[i] < 0:
            a.append(np.zeros((site.node_dim[i], 0)))
            qi = sii
        else:
            sip = stats.s_ip[i] / k
            spp = stats.s_pp[i] / k
            ai = np.linalg.solve(spp.T, sip.T).T
            a.append(ai)
            qi = sii - ai @ sip.T
        qi, fl = _floor_psd(qi)
        floored |= fl
        q.append(qi)
    if floored:
        logger.warning("tree noise covariance floored at %g", Q_FLOOR)
    return TreeParams(a, q, floored=floored)


def initial_params(site: TreeTopology, leaf_var: float, seed: int = 0) -> TreeParams:
    """Identity-like edges with a small per-level scaling jitter."""
    rng = np.random.default_rng(seed)
    jitter = 1.0 + 0.05 * rng.standard_normal(site.n_scales + 1)
    leaf_var = max(float(leaf_var), Q_FLOOR)
    a, q = [], []
    for i in range(site.n_nodes):
        d = site.node_dim[i]
        p = site.parent[i]
        if p < 0:
            a.append(np.zeros((d, 0)))
            q.append(leaf_var * np.eye(d))
            continue
        a.append(jitter[site.scale_of[i]] * np.eye(d, site.node_dim[p]))
        q.append(0.5 * leaf_var * np.eye(d))
    return TreeParams(a, q)


def learn_tree_em(topology: TreeTopology, x: np.ndarray, max_iter: int = 100, tol: float = 1e-6,
                  init: Optional[TreeParams] = None, seed: int = 0) -> EMResult:
    """Fit tied per-site tree parameters to zero-mean leaf samples.

    ``x`` holds one column per sample with rows in ``topology.leaves``
    order.  Every frame tree counts as an independent draw of the shared
    site tree.  Stops when the relative loglikelihood change falls below
    ``tol``.
    """
    if max_iter < 1:
        raise BadInputError("max_iter must be >= 1")
    site = topology.site_topology()
    groups = frame_groups(topology, x)
    params = init if init is not None else initial_params(site, float(np.mean(np.asarray(x) ** 2)), seed)
    history: List[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        stats = e_step(site, params, groups)
        history.append(stats.loglik)
        params = m_step(site, stats)
        if len(history) > 1:
            prev = history[-2]
            if abs(history[-1] - prev) <= tol * max(abs(prev), 1e-300):
                converged = True
                break
    return EMResult(params=params, loglik=history, iterations=it, converged=converged)


def canonicalize(site: TreeTopology, params: TreeParams) -> TreeParams:
    """Fix the scale and sign gauge of scalar hidden nodes.

    Every internal node is rescaled to unit marginal variance.  Signs are
    chosen so that the root correlates positively with its first leaf
    descendant and every other internal node has a positive parent edge.
    Leaves keep their units.
    """
    n = site.n_nodes
    if np.any(site.node_dim != 1):
        raise BadInputError("canonical form is defined for scalar nodes only")
    children = site.children()
    var = np.zeros(n)
    g = np.ones(n)
    for i in np.argsort(site.scale_of, kind="stable"):
        p = site.parent[i]
        var[i] = params.q[i][0, 0] + (0.0 if p < 0 else params.a[i][0, 0] ** 2 * var[p])
        if not children[i]:
            continue
        if p < 0:
            sign, k = 1.0, i
            while children[k]:
                k = children[k][0]
                sign *= np.sign(params.a[k][0, 0]) or 1.0
        else:
            sign = np.sign(params.a[i][0, 0] * g[p]) or 1.0
        g[i] = sign * np.sqrt(var[i])
    a, q = [], []
    for i in range(n):
        p = site.parent[i]
        q.append(params.q[i] / g[i] ** 2)
        a.append(params.a[i].copy() if p < 0 else params.a[i] * g[p] / g[i])
    return TreeParams(a, q, floored=params.floored)
