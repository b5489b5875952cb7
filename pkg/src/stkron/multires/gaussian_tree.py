"""Exact inference on tree-structured Gaussian information systems.

A tree system is given by node-diagonal blocks ``diag[i] = J[i, i]`` and edge
blocks ``edge[i] = J[i, parent(i)]``.  Upward elimination followed by
downward back-substitution gives means, node marginals, parent-child cross
covariances and ``log det J`` in one sweep each.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ..errors import BadInputError, NumericError
from .tree import TreeParams, TreeTopology


@dataclass
class TreeSystem:
    topology: TreeTopology
    diag: List[np.ndarray]
    edge: List[Optional[np.ndarray]]


@dataclass
class TreeSolution:
    """Posterior moments over the solved node set.

    ``mean`` is (n_vars x k) with rows of unsolved nodes left at zero;
    ``cov[i]`` and ``cross[i] = Cov(x_i, x_parent(i))`` are filled only when
    requested and only for solved nodes.
    """

    mean: np.ndarray
    logdet: float
    cov: Optional[List[Optional[np.ndarray]]] = None
    cross: Optional[List[Optional[np.ndarray]]] = None


def system_from_params(topology: TreeTopology, params: TreeParams) -> TreeSystem:
    """Block form of ``(I-A)^T Q^{-1} (I-A)`` without building the sparse matrix."""
    n = topology.n_nodes
    qinv = [np.linalg.inv(q) for q in params.q]
    diag = [qinv[topology.site_of[i]].copy() for i in range(n)]
    edge: List[Optional[np.ndarray]] = [None] * n
    for i in range(n):
        p = topology.parent[i]
        if p < 0:
            continue
        s = topology.site_of[i]
        a = params.a[s]
        edge[i] = -qinv[s] @ a
        diag[p] = diag[p] + a.T @ qinv[s] @ a
    return TreeSystem(topology, diag, edge)


def system_from_sparse(topology: TreeTopology, j) -> TreeSystem:
    """Read node and edge blocks out of a tree-structured matrix."""
    j = sp.csr_matrix(j)
    off = topology.offsets
    n = topology.n_nodes
    if np.all(topology.node_dim == 1):
        d = j.diagonal()
        diag = [d[i:i + 1].reshape(1, 1) for i in range(n)]
        par = topology.parent
        child = np.flatnonzero(par >= 0)
        vals = np.asarray(j[child, par[child]]).ravel()
        edge: List[Optional[np.ndarray]] = [None] * n
        for c, v in zip(child, vals):
            edge[c] = np.array([[v]])
        return TreeSystem(topology, diag, edge)
    diag, edge = [], []
    for i in range(n):
        sl = slice(off[i], off[i + 1])
        diag.append(j[sl, sl].toarray())
        p = topology.parent[i]
        edge.append(None if p < 0 else j[sl, off[p]:off[p + 1]].toarray())
    return TreeSystem(topology, diag, edge)


def _cho(mat: np.ndarray, node: int):
    try:
        return sla.cho_factor(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"tree system not positive definite at node {node}") from exc


def solve_tree(system: TreeSystem, h: np.ndarray, solve_nodes: Optional[np.ndarray] = None,
               covariances: bool = False) -> TreeSolution:
    """Solve ``J_SS x_S = h_S`` for the node set ``S`` (default: all nodes).

    ``S`` must be closed under taking parents, which holds whenever the
    removed nodes are leaves.  Off-set couplings must already be folded
    into ``h`` by the caller.
    """
    top = system.topology
    off = top.offsets
    h = np.asarray(h, dtype=np.float64)
    vec = h.ndim == 1
    h2 = h.reshape(top.n_vars, -1)
    n = top.n_nodes
    active = np.ones(n, dtype=bool)
    if solve_nodes is not None:
        active[:] = False
        active[np.asarray(solve_nodes, dtype=int)] = True
        par_ok = top.parent[active]
        if np.any((par_ok >= 0) & ~active[np.maximum(par_ok, 0)]):
            raise BadInputError("solve set must contain the parents of its nodes")

    order = np.argsort(-top.scale_of, kind="stable")
    order = order[active[order]]
    jhat = {i: system.diag[i].copy() for i in order}
    hhat = {i: h2[off[i]:off[i + 1]].copy() for i in order}
    facs = {}
    logdet = 0.0
    for i in order:
        f = _cho(jhat[i], i)
        facs[i] = f
        logdet += 2.0 * float(np.sum(np.log(np.diag(f[0]))))
        p = top.parent[i]
        if p >= 0:
            e = system.edge[i]
            sol_e = sla.cho_solve(f, e, check_finite=False)
            jhat[p] -= e.T @ sol_e
            hhat[p] -= sol_e.T @ hhat[i]

    mean = np.zeros_like(h2)
    cov = [None] * n if covariances else None
    cross = [None] * n if covariances else None
    for i in order[::-1]:
        p = top.parent[i]
        f = facs[i]
        rhs = hhat[i]
        if p >= 0:
            rhs = rhs - system.edge[i] @ mean[off[p]:off[p + 1]]
        mean[off[i]:off[i + 1]] = sla.cho_solve(f, rhs, check_finite=False)
        if covariances:
            base = sla.cho_solve(f, np.eye(f[0].shape[0]), check_finite=False)
            if p < 0:
                cov[i] = base
            else:
                g = sla.cho_solve(f, system.edge[i], check_finite=False)
                cross[i] = -g @ cov[p]
                cov[i] = base + g @ cov[p] @ g.T
    if vec:
        mean = mean[:, 0]
    return TreeSolution(mean=mean, logdet=logdet, cov=cov, cross=cross)
