"""Tree plus in-scale conditional covariance model, learning and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import BadInputError, NumericError
from ..estimators import GridMapping
from .em import learn_tree_em
from .inscale import BlockPartition, block_partition, target_inscale_information
from .sparsify import sparsify_logdet
from .targets import ScaleTargets, scale_maps, scale_vars, target_scale_covariances
from .tree import TreeParams, TreeTopology, tree_information

logger = logging.getLogger(__name__)

DIVERGENCE_RUN = 10


@dataclass(frozen=True)
class ScaleBlock:
    """One in-scale conditional covariance block over global variables ``index``."""

    scale: int
    index: np.ndarray
    cov: np.ndarray


@dataclass(eq=False)
class MultiresModel:
    """Information matrix ``J = j_h + inv(sigma_c)``.

    ``j_h`` holds the tree's parent-child couplings only (its in-scale
    blocks are replaced by the conditional blocks).  ``mu`` is the mean of
    the observed leaves.
    """

    topology: TreeTopology
    params: TreeParams
    j_h: sp.csr_matrix
    sigma_c: List[ScaleBlock]
    partition: BlockPartition
    mu: np.ndarray
    mapping: Optional[GridMapping] = None

    @cached_property
    def p_info(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for blk in self.sigma_c:
            inv = np.linalg.inv(blk.cov)
            rr, cc = np.meshgrid(blk.index, blk.index, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(0.5 * (inv + inv.T).ravel())
        n = self.topology.n_vars
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    @cached_property
    def information(self) -> sp.csr_matrix:
        return (self.j_h + self.p_info).tocsr()

    @property
    def observed_vars(self) -> np.ndarray:
        return self.topology.var_index(self.topology.leaves)

    @property
    def hidden_vars(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.topology.n_vars), self.observed_vars)

    def check_positive_definite(self, max_dense: int = 6000) -> float:
        """Smallest eigenvalue of ``J`` (dense check, skipped above ``max_dense``)."""
        n = self.topology.n_vars
        if n > max_dense:
            logger.info("skipping dense PD check for %d variables", n)
            return float("nan")
        lam = float(np.linalg.eigvalsh(self.information.toarray())[0])
        if lam <= 0:
            raise NumericError(f"model information matrix not positive definite (min eig {lam:.3g})")
        return lam


@dataclass
class MultiresConfig:
    em_iter: int = 50
    em_tol: float = 1e-6
    shrinkage: float = 0.0
    lam: float = 0.0
    cut_level: Optional[int] = None
    halo: Union[None, int, str] = None
    kron_rank: Optional[int] = None
    kron_scales: Optional[Sequence[int]] = None
    seed: int = 0


@dataclass
class LearnedMultires:
    model: MultiresModel
    targets: ScaleTargets
    loglik: List[float] = field(default_factory=list)


def learn_multires(topology: TreeTopology, x: np.ndarray, config: Optional[MultiresConfig] = None,
                   mapping: Optional[GridMapping] = None, mu: Optional[np.ndarray] = None,
                   check_pd: bool = True) -> LearnedMultires:
    """Fit the tree by EM, build per-scale targets and in-scale blocks.

    ``x`` holds zero-mean samples with rows in ``topology.leaves`` order.
    """
    cfg = config or MultiresConfig()
    x = np.asarray(x, dtype=np.float64)
    em = learn_tree_em(topology, x, max_iter=cfg.em_iter, tol=cfg.em_tol, seed=cfg.seed)
    params = em.params
    maps = scale_maps(topology.site_topology(), params)
    targets = target_scale_covariances(topology, params, x, shrinkage=cfg.shrinkage,
                                       kron_rank=cfg.kron_rank, kron_scales=cfg.kron_scales,
                                       mapping=mapping, maps=maps)
    part = block_partition(topology, cfg.cut_level)
    halo_default = cfg.halo == "block"
    halo = None if (cfg.halo is None or halo_default) else int(cfg.halo)
    targets = target_inscale_information(topology, targets, params, part, local_halo=halo,
                                         halo_default=halo_default, maps=maps)
    blocks = []
    for m, j in targets.j_star_m.items():
        gidx = scale_vars(topology, m)
        for b in part.blocks[m]:
            cov = sparsify_logdet(j[np.ix_(b, b)], cfg.lam)
            blocks.append(ScaleBlock(m, gidx[b], cov))
    j_h = tree_information(topology, params, drop_diagonal=True)
    mu = np.zeros(len(topology.leaves)) if mu is None else np.asarray(mu, dtype=np.float64)
    model = MultiresModel(topology, params, j_h, blocks, part, mu, mapping)
    if check_pd:
        model.check_positive_definite()
    return LearnedMultires(model, targets, em.loglik)


@dataclass
class InferResult:
    mean: np.ndarray
    iterations: int
    converged: bool
    diverged: bool
    residual: float


class _SplitSolver:
    """Two-step splitting for ``(J^h + P + J^p)_SS x = h`` on a variable subset."""

    def __init__(self, model: MultiresModel, subset: np.ndarray, jp_diag: np.ndarray):
        self.subset = subset
        n = model.topology.n_vars
        where = -np.ones(n, dtype=int)
        where[subset] = np.arange(len(subset))
        self.jh = model.j_h[subset][:, subset].tocsr()
        # the leaf-noise diagonal is in-scale, so it joins P on the implicit side
        p = (model.p_info[subset][:, subset] + sp.diags(jp_diag[subset])).tocsr()
        self.p = p
        self.d = p.diagonal()
        self.tree_lu = spla.splu((self.jh + sp.diags(self.d)).tocsc())
        self.blocks = []
        for blk in model.sigma_c:
            loc = where[blk.index]
            keep = loc >= 0
            if not keep.any():
                continue
            pb = p[loc[keep]][:, loc[keep]].toarray()
            self.blocks.append((loc[keep], sla.cho_factor(pb, lower=True)))
        self.full = (self.jh + p).tocsr()

    def in_scale_solve(self, rhs: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rhs)
        for loc, fac in self.blocks:
            out[loc] = sla.cho_solve(fac, rhs[loc])
        return out

    def run(self, h: np.ndarray, tol: float, max_iter: int):
        x = np.zeros_like(h)
        hn = max(float(np.linalg.norm(h)), 1e-300)
        best, best_res = x, np.inf
        prev = np.inf
        rising = 0
        converged = diverged = False
        it = 0
        for it in range(1, max_iter + 1):
            rhs = h - self.p @ x + self.d[:, None] * x
            half = self.tree_lu.solve(rhs)
            x = self.in_scale_solve(h - self.jh @ half)
            res = float(np.linalg.norm(h - self.full @ x)) / hn
            if res < best_res:
                best, best_res = x, res
            if res < tol:
                converged = True
                break
            rising = rising + 1 if res > prev else 0
            prev = res
            if rising >= DIVERGENCE_RUN:
                diverged = True
                logger.warning("matrix splitting diverging after %d iterations", it)
                break
        if not converged and not diverged:
            logger.warning("matrix splitting stopped at residual %.3g after %d iterations",
                           best_res, it)
        return best, it, converged, diverged, best_res


def infer(model: MultiresModel, observed: np.ndarray, mode: str = "exact",
          noise_var: Union[float, np.ndarray] = 1.0, tol: float = 1e-10,
          max_iter: int = 500) -> InferResult:
    """Posterior means of all variables given leaf values.

    ``mode='noisy'`` observes every leaf through independent noise of
    variance ``noise_var``; ``mode='exact'`` clamps the leaves and solves
    only the hidden subsystem.  ``observed`` has rows in leaf order (one
    column per clip, or a vector).
    """
    top = model.topology
    y = np.asarray(observed, dtype=np.float64)
    vec = y.ndim == 1
    y = y.reshape(len(top.leaves), -1)
    obs = model.observed_vars
    n = top.n_vars
    if mode == "noisy":
        r = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (len(obs),))
        if np.any(r <= 0):
            raise BadInputError("noise variances must be positive")
        jp = np.zeros(n)
        jp[obs] = 1.0 / r
        h = np.zeros((n, y.shape[1]))
        h[obs] = y / r[:, None]
        solver = _SplitSolver(model, np.arange(n), jp)
        x, it, conv, div, res = solver.run(h, tol, max_iter)
    elif mode == "exact":
        hid = model.hidden_vars
        j = model.information
        h_hid = -(j[hid][:, obs] @ y)
        solver = _SplitSolver(model, hid, np.zeros(n))
        xh, it, conv, div, res = solver.run(h_hid, tol, max_iter)
        x = np.zeros((n, y.shape[1]))
        x[obs] = y
        x[hid] = xh
    else:
        raise BadInputError(f"unknown inference mode {mode!r}")
    if vec:
        x = x[:, 0]
    return InferResult(x, it, conv, div, res)


def _hidden_direct(model: MultiresModel, rhs: np.ndarray) -> np.ndarray:
    hid = model.hidden_vars
    j_hh = model.information[hid][:, hid].tocsc()
    return spla.splu(j_hh).solve(rhs)


def model_loglikelihood(model: MultiresModel, clip: np.ndarray, tol: float = 1e-10,
                        max_iter: int = 500) -> Union[float, np.ndarray]:
    """Mahalanobis score ``(x - mu)^T J_obs (x - mu)`` of leaf-ordered clips.

    Uses exact-leaf inference for the hidden posterior; if the splitting
    iteration stalls the hidden system is solved directly.
    """
    x = np.asarray(clip, dtype=np.float64)
    vec = x.ndim == 1
    x = x.reshape(len(model.topology.leaves), -1) - model.mu[:, None]
    obs, hid = model.observed_vars, model.hidden_vars
    j = model.information
    j_ho_x = j[hid][:, obs] @ x
    res = infer(model, x, mode="exact", tol=tol, max_iter=max_iter)
    if res.converged:
        mu_h = res.mean[hid]
    else:
        mu_h = _hidden_direct(model, -j_ho_x)
    j_oo = j[obs][:, obs]
    score = np.sum(x * (j_oo @ x), axis=0) + np.sum(j_ho_x * mu_h, axis=0)
    return float(score[0]) if vec else score


def observed_information(model: MultiresModel) -> np.ndarray:
    """Dense ``J_OO - J_OH J_HH^{-1} J_HO`` over the observed leaves."""
    obs, hid = model.observed_vars, model.hidden_vars
    j = model.information
    j_ho = j[hid][:, obs].toarray()
    sol = _hidden_direct(model, j_ho)
    out = j[obs][:, obs].toarray() - j_ho.T @ sol
    return 0.5 * (out + out.T)


def implied_covariance(model: MultiresModel) -> np.ndarray:
    """Dense model covariance of the observed leaves (small models only)."""
    return np.linalg.inv(observed_information(model))
