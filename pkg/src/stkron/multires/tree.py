"""Tree topology, quadtree construction and Gaussian tree parameters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..errors import BadInputError


@dataclass(frozen=True)
class TreeTopology:
    """A forest of identical per-frame trees.

    ``parent[i]`` is -1 for roots.  ``scale_of`` counts from 1 at the roots.
    ``site_of`` maps every node to its node id in frame 0 (parameters are
    tied across frames).  ``leaves`` lists the leaf nodes in observation
    order; ``coords`` gives each node's (row, col) cell at its own scale and
    drives spatial halos.
    """

    parent: np.ndarray
    scale_of: np.ndarray
    node_dim: np.ndarray
    frame_of: np.ndarray
    site_of: np.ndarray
    coords: np.ndarray
    leaves: np.ndarray
    frames: int = 1

    def __post_init__(self):
        n = len(self.parent)
        for name in ("scale_of", "node_dim", "frame_of", "site_of"):
            if len(getattr(self, name)) != n:
                raise BadInputError(f"{name} length mismatch")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != self.frames:
            raise BadInputError(f"expected one root per frame, found {len(roots)}")
        nonroot = self.parent >= 0
        if np.any(self.scale_of[nonroot] != self.scale_of[self.parent[nonroot]] + 1):
            raise BadInputError("child scale must equal parent scale + 1")
        if np.any(self.scale_of[roots] != 1):
            raise BadInputError("roots must sit at scale 1")

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def n_scales(self) -> int:
        return int(self.scale_of.max())

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.node_dim)])

    @property
    def n_vars(self) -> int:
        return int(self.node_dim.sum())

    def var_index(self, nodes) -> np.ndarray:
        off = self.offsets
        nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
        if nodes.size == 0:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(off[i], off[i + 1]) for i in nodes])

    def children(self) -> List[List[int]]:
        ch = [[] for _ in range(self.n_nodes)]
        for i, p in enumerate(self.parent):
            if p >= 0:
                ch[p].append(i)
        return ch

    def scale_nodes(self, m: int) -> np.ndarray:
        """Nodes at scale ``m`` ordered frame-major, then by site order."""
        nodes = np.flatnonzero(self.scale_of == m)
        order = np.lexsort((self.site_of[nodes], self.frame_of[nodes]))
        return nodes[order]

    def site_topology(self) -> "TreeTopology":
        """The frame-0 tree on its own (node ids are already site ids)."""
        keep = np.flatnonzero(self.frame_of == 0)
        remap = -np.ones(self.n_nodes, dtype=int)
        remap[keep] = np.arange(len(keep))
        par = self.parent[keep]
        par = np.where(par >= 0, remap[np.maximum(par, 0)], -1)
        leaves = remap[self.leaves[self.frame_of[self.leaves] == 0]]
        return TreeTopology(
            parent=par, scale_of=self.scale_of[keep], node_dim=self.node_dim[keep],
            frame_of=np.zeros(len(keep), dtype=int), site_of=np.arange(len(keep)),
            coords=self.coords[keep], leaves=leaves, frames=1,
        )

    def leaf_slots(self) -> np.ndarray:
        """All nodes without children (observed or dummy)."""
        has_child = np.zeros(self.n_nodes, dtype=bool)
        has_child[self.parent[self.parent >= 0]] = True
        return np.flatnonzero(~has_child)

    def permuted(self, perm: np.ndarray) -> "TreeTopology":
        """Relabel nodes: new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        par = self.parent[perm]
        par = np.where(par >= 0, inv[np.maximum(par, 0)], -1)
        site0 = self.site_of[perm]
        # site ids must stay frame-0 node ids
        frame0_old = np.flatnonzero(self.frame_of == 0)
        site_map = np.empty(self.n_nodes, dtype=int)
        site_map[frame0_old] = inv[frame0_old]
        return TreeTopology(
            parent=par, scale_of=self.scale_of[perm], node_dim=self.node_dim[perm],
            frame_of=self.frame_of[perm], site_of=site_map[site0], coords=self.coords[perm],
            leaves=inv[self.leaves], frames=self.frames,
        )


def topology_from_parents(parent: Sequence[int], node_dim: Optional[Sequence[int]] = None,
                          leaves: Optional[Sequence[int]] = None) -> TreeTopology:
    """Single-frame topology from a parent array (roots marked -1)."""
    parent = np.asarray(parent, dtype=int)
    n = len(parent)
    scale = np.zeros(n, dtype=int)
    for i in range(n):
        k, depth = i, 1
        while parent[k] >= 0:
            k = parent[k]
            depth += 1
            if depth > n:
                raise BadInputError("parent array contains a cycle")
        scale[i] = depth
    has_child = np.zeros(n, dtype=bool)
    has_child[parent[parent >= 0]] = True
    if leaves is None:
        leaves = np.flatnonzero(~has_child)
    dims = np.ones(n, dtype=int) if node_dim is None else np.asarray(node_dim, dtype=int)
    coords = np.zeros((n, 2), dtype=int)
    for m in range(1, scale.max() + 1):
        at = np.flatnonzero(scale == m)
        coords[at, 1] = np.arange(len(at))
    return TreeTopology(parent=parent, scale_of=scale, node_dim=dims,
                        frame_of=np.zeros(n, dtype=int), site_of=np.arange(n),
                        coords=coords, leaves=np.asarray(leaves, dtype=int), frames=1)


def _split_levels(length: int) -> List[List[tuple]]:
    levels = [[(0, length)]]
    while any(b - a > 1 for a, b in levels[-1]):
        nxt = []
        for a, b in levels[-1]:
            if b - a > 1:
                mid = a + (b - a + 1) // 2
                nxt += [(a, mid), (mid, b)]
            else:
                nxt.append((a, b))
        levels.append(nxt)
    return levels


def _parent_interval(levels, d, k):
    a, _ = levels[d][k]
    for j, (pa, pb) in enumerate(levels[d - 1]):
        if pa <= a < pb:
            return j
    raise AssertionError


def build_quadtree(height: int, width: int, frames: int = 1, internal_dim: int = 1,
                   observed: Optional[np.ndarray] = None) -> TreeTopology:
    """Spatial quadtree over an ``height x width`` grid, one tree per frame.

    Rows and columns are halved independently (larger half first); a side
    of length 1 is carried down unchanged, so every leaf sits at the bottom
    scale.  Leaves enumerate pixels row-major, frame-major.  ``observed``
    optionally selects (frame-major) leaf slots that carry data, e.g. the
    valid region of a padded grid; the rest become hidden dummy leaves.
    """
    if height * width < 1 or frames < 1:
        raise BadInputError("grid must contain at least one pixel")
    rl, cl = _split_levels(height), _split_levels(width)
    depth = max(len(rl), len(cl))
    rl += [rl[-1]] * (depth - len(rl))
    cl += [cl[-1]] * (depth - len(cl))

    site_parent, site_scale, site_coords = [], [], []
    level_start = []
    for d in range(depth):
        level_start.append(len(site_parent))
        nr, nc = len(rl[d]), len(cl[d])
        for r in range(nr):
            for c in range(nc):
                if d == 0:
                    site_parent.append(-1)
                else:
                    pr, pc = _parent_interval(rl, d, r), _parent_interval(cl, d, c)
                    site_parent.append(level_start[d - 1] + pr * len(cl[d - 1]) + pc)
                site_scale.append(d + 1)
                site_coords.append((r, c))
    n_site = len(site_parent)
    site_parent = np.array(site_parent)
    site_leaves = np.arange(level_start[-1], n_site)
    if depth == 1:
        site_dim = np.ones(n_site, dtype=int)
    else:
        site_dim = np.where(np.array(site_scale) == depth, 1, internal_dim)

    parent = np.concatenate([np.where(site_parent >= 0, site_parent + f * n_site, -1)
                             for f in range(frames)])
    all_leaves = np.concatenate([site_leaves + f * n_site for f in range(frames)])
    if observed is not None:
        all_leaves = all_leaves[np.asarray(observed)]
    return TreeTopology(
        parent=parent,
        scale_of=np.tile(np.array(site_scale), frames),
        node_dim=np.tile(site_dim, frames),
        frame_of=np.repeat(np.arange(frames), n_site),
        site_of=np.tile(np.arange(n_site), frames),
        coords=np.tile(np.array(site_coords), (frames, 1)),
        leaves=all_leaves,
        frames=frames,
    )


@dataclass
class TreeParams:
    """Per-site parameters of ``x(i) = a(i) x(parent) + n_i``, ``n_i ~ N(0, q(i))``.

    ``q`` at a root site holds the root covariance; ``a`` there is unused.
    """

    a: List[np.ndarray]
    q: List[np.ndarray]
    floored: bool = False


def tree_information(topology: TreeTopology, params: TreeParams,
                     drop_diagonal: bool = False) -> sp.csr_matrix:
    """Sparse information matrix ``(I-A)^T Q^{-1} (I-A)`` over all nodes.

    With ``drop_diagonal`` the node-diagonal blocks are removed, leaving only
    the parent-child couplings.
    """
    off = topology.offsets
    rows, cols, vals = [], [], []

    def put(i_nodes, j_nodes, mat):
        ri = np.arange(off[i_nodes], off[i_nodes + 1])
        ci = np.arange(off[j_nodes], off[j_nodes + 1])
        rr, cc = np.meshgrid(ri, ci, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(np.asarray(mat).ravel())

    for i in range(topology.n_nodes):
        s = topology.site_of[i]
        qi = np.linalg.inv(params.q[s])
        p = topology.parent[i]
        if not drop_diagonal:
            put(i, i, qi)
        if p >= 0:
            a = params.a[s]
            cross = -qi @ a
            put(i, p, cross)
            put(p, i, cross.T)
            if not drop_diagonal:
                put(p, p, a.T @ qi @ a)
    n = topology.n_vars
    j = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    j.sum_duplicates()
    return j


def site_logdet_information(topology: TreeTopology, params: TreeParams) -> float:
    """log det of one frame tree's information matrix (unit-triangular map)."""
    sites = np.flatnonzero(topology.frame_of == 0)
    return -float(sum(np.linalg.slogdet(params.q[topology.site_of[i]])[1] for i in sites))


def tree_covariance_dense(topology: TreeTopology, params: TreeParams) -> np.ndarray:
    """Dense covariance over all variables; oracle for small trees."""
    j = tree_information(topology, params).toarray()
    return np.linalg.inv(j)


def sample_tree(topology: TreeTopology, params: TreeParams, n: int,
                rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` joint samples (variables x n) by ancestral sampling."""
    off = topology.offsets
    x = np.zeros((topology.n_vars, n))
    order = np.argsort(topology.scale_of, kind="stable")
    for i in order:
        s = topology.site_of[i]
        q = params.q[s]
        noise = np.linalg.cholesky(q) @ rng.standard_normal((q.shape[0], n))
        p = topology.parent[i]
        val = noise if p < 0 else params.a[s] @ x[off[p]:off[p + 1]] + noise
        x[off[i]:off[i + 1]] = val
    return x
