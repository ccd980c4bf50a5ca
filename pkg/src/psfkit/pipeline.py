"""End-to-end PSF construction and the PSF preconditioner."""
from dataclasses import dataclass, field

import numpy as np

from .hmatrix import (DEFAULT_EPS_ACA, DEFAULT_K_H_MAX, DEFAULT_N_LEAF, build_cluster_tree,
                      build_hodlr, from_dense, sandwich_mass)
from .impulse import ImpulseBatchSet, harvest_batches
from .moments import DEFAULT_EPS_SIGMA, DEFAULT_EPS_V, DEFAULT_TAU, compute_moments
from .packing import plan_batches
from .psfkernel import C_RBF_BLUR, C_RBF_HESSIAN, DEFAULT_K_N, PsfKernelOracle
from .spdfix import DEFAULT_EPS_FLIP, factorize_sum, flip_negative_eigs, symmetrize


@dataclass
class PsfApproximation:
    batches: ImpulseBatchSet
    applies: int

    @property
    def moments(self):
        return self.batches.moments

    @property
    def plan(self):
        return self.batches.plan

    @property
    def n_impulses(self):
        return self.plan.n_points

    def oracle(self, k_n=DEFAULT_K_N, c_rbf=C_RBF_BLUR, n_batches=None):
        b = self.batches if n_batches is None else self.batches.truncate(n_batches)
        return PsfKernelOracle(b, k_n=k_n, c_rbf=c_rbf)


def build_psf(op, n_b, tau=DEFAULT_TAU, seed=0, eps_V=DEFAULT_EPS_V,
              eps_Sigma=DEFAULT_EPS_SIGMA) -> PsfApproximation:
    """Moments (6 applies) plus ``n_b`` batch applies; records the applies spent."""
    before = op.total_applies
    m = compute_moments(op, eps_V, eps_Sigma)
    plan = plan_batches(m, tau, n_b, seed)
    batches = harvest_batches(op, plan, m)
    return PsfApproximation(batches, op.total_applies - before)


@dataclass
class PsfPreconditioner:
    """Factorized A_H + R_H, usable as P^{-1} in PCG."""
    A_H: object = field(repr=False)
    R_H: object = field(repr=False)
    factor: object = field(repr=False)
    report: object
    applies_to_build: int
    max_rank: int
    entry_count: int

    def solve(self, b):
        return self.factor.solve(b)

    __call__ = solve


def build_psf_preconditioner(H_op, R_matrix, n_b, tau=DEFAULT_TAU, k_n=DEFAULT_K_N,
                             c_rbf=C_RBF_HESSIAN, n_leaf=DEFAULT_N_LEAF, eps_aca=DEFAULT_EPS_ACA,
                             k_h_max=DEFAULT_K_H_MAX, eps_flip=DEFAULT_EPS_FLIP, seed=0,
                             psf=None):
    """PSF approximation of H_op compressed to HODLR, repaired, added to R and factorized.

    ``psf`` may carry a precomputed approximation with at least ``n_b`` batches;
    the apply count reported is then 6 + n_b, the cost of building it alone.
    """
    if psf is None:
        psf = build_psf(H_op, n_b, tau, seed)
        applies = psf.applies
    else:
        applies = 6 + min(n_b, psf.plan.n_batches)
    grid = H_op.grid
    tree = build_cluster_tree(grid, n_leaf)
    oracle = psf.oracle(k_n=k_n, c_rbf=c_rbf, n_batches=n_b)
    Phi_H = build_hodlr(oracle, tree, k_h_max, eps_aca, seed=seed)
    A_H = symmetrize(sandwich_mass(Phi_H, H_op.mass))
    R = R_matrix.toarray() if hasattr(R_matrix, "toarray") else np.asarray(R_matrix, dtype=float)
    R_H = from_dense(R, tree, eps=1e-12)
    repaired, report = flip_negative_eigs(A_H, R_H, eps_flip)
    factor = factorize_sum(repaired, R_H)
    return PsfPreconditioner(repaired, R_H, factor, report, applies, Phi_H.max_rank, Phi_H.entry_count)
