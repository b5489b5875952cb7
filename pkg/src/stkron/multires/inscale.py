"""Target in-scale conditional information matrices.

The marginal covariance of scale ``m`` under a model whose coarser scales
are already fixed and whose finer scales follow the tree is matched to the
target ``Sigma_[m]``.  Scales only couple to their neighbours, so the coarse
contribution reduces to a Schur recursion over scales and the fine
contribution is the tree's own child term.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import block_diag

from ..errors import BadInputError, NumericError
from .targets import ScaleMaps, ScaleTargets, scale_maps
from .tree import TreeParams, TreeTopology

logger = logging.getLogger(__name__)

RIDGE = 1e-8


@dataclass
class BlockPartition:
    """Per-scale blocks of scale-local variable positions."""

    blocks: Dict[int, List[np.ndarray]]
    cut_level: Optional[int] = None

    def mask(self, m: int, size: int) -> np.ndarray:
        out = np.zeros((size, size), dtype=bool)
        for b in self.blocks[m]:
            out[np.ix_(b, b)] = True
        return out


def _scale_layout(topology: TreeTopology, m: int):
    nodes = topology.scale_nodes(m)
    dims = topology.node_dim[nodes]
    starts = np.concatenate([[0], np.cumsum(dims)])
    return nodes, starts


def _ancestor_at(topology: TreeTopology, nodes: np.ndarray, level: int) -> np.ndarray:
    anc = nodes.copy()
    for _ in range(int(topology.scale_of[nodes].max()) - level if len(nodes) else 0):
        deeper = topology.scale_of[anc] > level
        anc = np.where(deeper, topology.parent[np.maximum(anc, 0)], anc)
    return anc


def block_partition(topology: TreeTopology, cut_level: Optional[int] = None) -> BlockPartition:
    """Blocks = all frames' nodes that share an ancestor site at ``cut_level``.

    ``cut_level=None`` (or 1) puts each whole scale into a single block.
    Scales above the cut use one block per site.
    """
    blocks = {}
    for m in range(1, topology.n_scales + 1):
        nodes, starts = _scale_layout(topology, m)
        if cut_level is None or cut_level <= 1:
            blocks[m] = [np.arange(starts[-1])]
            continue
        anc = _ancestor_at(topology, nodes, min(cut_level, m))
        key = topology.site_of[anc]
        out = []
        for k in np.unique(key):
            sel = np.flatnonzero(key == k)
            out.append(np.concatenate([np.arange(starts[s], starts[s + 1]) for s in sel]))
        blocks[m] = out
    return BlockPartition(blocks, cut_level)


def local_inverse(sigma: np.ndarray, coords: np.ndarray, block: np.ndarray,
                  halo: Optional[int]):
    """Rows ``block`` of ``sigma^{-1}`` approximated from a halo neighbourhood.

    ``coords`` gives a grid cell per variable; the neighbourhood holds every
    variable within Chebyshev distance ``halo`` of a block variable.
    ``halo=None`` uses the whole matrix.  Returns ``(inverse_block, ridged)``.
    """
    n = sigma.shape[0]
    if halo is None:
        hood = np.arange(n)
    else:
        if halo < 0:
            raise BadInputError("halo must be nonnegative")
        bc = coords[block]
        dist = np.abs(coords[:, None, :] - bc[None, :, :]).max(axis=2).min(axis=1)
        hood = np.flatnonzero(dist <= halo)
    sub = sigma[np.ix_(hood, hood)]
    ridged = False
    try:
        np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        ridged = True
        logger.warning("singular halo submatrix; ridge %g added", RIDGE)
        sub = sub + RIDGE * np.eye(len(hood))
    inv = np.linalg.inv(sub)
    where = np.searchsorted(hood, block)
    return inv[np.ix_(where, where)], ridged


def _expand(per_frame: np.ndarray, frames: int) -> np.ndarray:
    return np.kron(np.eye(frames), per_frame)


def default_halo(topology: TreeTopology, partition: BlockPartition, m: int) -> int:
    """One block's extent in cells at scale ``m``."""
    nodes, starts = _scale_layout(topology, m)
    var_node = np.repeat(np.arange(len(nodes)), np.diff(starts))
    coords = topology.coords[nodes][var_node]
    ext = 0
    for b in partition.blocks[m]:
        c = coords[b]
        ext = max(ext, int((c.max(axis=0) - c.min(axis=0)).max()) + 1)
    return ext


def target_inscale_information(topology: TreeTopology, targets: ScaleTargets, params: TreeParams,
                               partition: Optional[BlockPartition] = None,
                               local_halo: Optional[int] = None, halo_default: bool = False,
                               maps: Optional[ScaleMaps] = None) -> ScaleTargets:
    """Fill ``j_star_m`` scale by scale from the roots down.

    At scale ``m`` the conditional information is the (local) inverse of
    the target plus the coarse term ``E_m G_{m-1} E_m^T``, where ``G`` is the
    scale-``m-1`` marginal covariance of the part built so far, plus the
    tree's child term.  Every term is restricted to the partition blocks.
    With one block per scale and no halo the marginal of the bottom scale
    reproduces its target exactly.
    """
    if maps is None:
        maps = scale_maps(topology.site_topology(), params)
    if partition is None:
        partition = block_partition(topology)
    frames = topology.frames
    site = topology.site_topology()
    j_star, flagged = {}, []
    g_prev = None
    for m in range(1, maps.n_scales + 1):
        sig = targets.scale(m)
        nodes, starts = _scale_layout(topology, m)
        size = starts[-1]
        if sig.shape != (size, size):
            raise BadInputError(f"target at scale {m} has shape {sig.shape}, expected {(size, size)}")
        var_node = np.repeat(np.arange(len(nodes)), np.diff(starts))
        coords = topology.coords[nodes][var_node]
        halo = default_halo(topology, partition, m) if halo_default else local_halo
        j = np.zeros((size, size))
        ridged = False
        for b in partition.blocks[m]:
            inv_b, r = local_inverse(sig, coords, b, halo)
            ridged |= r
            j[np.ix_(b, b)] = inv_b
        if ridged:
            flagged.append(m)

        nd_m = site.scale_nodes(m)
        qinv_m = block_diag(*[np.linalg.inv(params.q[i]) for i in nd_m])
        extra = np.zeros((size, size))
        if m < maps.n_scales:
            f_next = maps.down[m + 1]
            qinv_next = block_diag(*[np.linalg.inv(params.q[i]) for i in site.scale_nodes(m + 1)])
            extra += _expand(f_next.T @ qinv_next @ f_next, frames)
        if m > 1:
            e = _expand(-qinv_m @ maps.down[m], frames)
            extra += e @ g_prev @ e.T
        mask = partition.mask(m, size)
        j += np.where(mask, extra, 0.0)
        j = 0.5 * (j + j.T)
        j_star[m] = j

        # marginal covariance of scale m given the coarser part built so far
        schur = j if m == 1 else j - e @ g_prev @ e.T
        try:
            g_prev = np.linalg.inv(schur)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"in-scale information singular at scale {m}") from exc
    return ScaleTargets(targets.sigma_m, j_star, flagged)
