"""Matrix-free point spread function approximation of integral operators."""
from .grid import Grid, GridFunction, LumpedMass, lumped_mass, locate_cell
from .operators import (AdvDiffHessian, BlurOperator, KernelOperator, MatrixFreeOperator,
                        MatrixOperator, RegularizationOperator)
from .moments import ImpulseMoments, SupportEllipsoid, compute_moments, support_ellipsoid
from .packing import NoValidNodesError, SampleBatchPlan, ellipsoids_intersect, plan_batches
from .impulse import ImpulseBatchSet, dirac_comb, eval_impulse, harvest_batches
from .psfkernel import PsfKernelOracle, column_error
from .hmatrix import ClusterTree, HodlrMatrix, build_cluster_tree, build_hodlr, factorize
from .spdfix import SpdRepairReport, flip_negative_eigs, symmetrize
from .solver import PcgResult, generalized_eig_spectrum, pcg
from .baselines import LowRankApprox, frobenius_error, randomized_svd
from .pipeline import build_psf, build_psf_preconditioner
from .config import ExperimentConfig

__version__ = "0.1.0"
