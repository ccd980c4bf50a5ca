"""Global low-rank baseline and Frobenius error measurement."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LowRankApprox:
    """Phi ~ U diag(s) V^T in kernel units (mass scaling already removed)."""
    U: np.ndarray = field(repr=False)
    s: np.ndarray
    V: np.ndarray = field(repr=False)
    applies_used: int = 0
    oversample: int = 5

    @property
    def rank(self):
        return len(self.s)

    def matvec(self, u):
        return self.U @ (self.s * (self.V.T @ u)) if np.ndim(u) == 1 \
            else self.U @ (self.s[:, None] * (self.V.T @ u))

    def to_dense(self):
        return (self.U * self.s) @ self.V.T


def randomized_svd(op, r, oversample=5, seed=0) -> LowRankApprox:
    """Double-pass randomized SVD of the kernel matrix using operator applies only.

    ``op.apply`` realizes A = M Phi M, so Phi v = M^{-1} A (M^{-1} v). The range
    pass uses r + oversample applies and the second pass as many transpose
    applies. The returned factors are the rank-r truncation.
    """
    N = op.N
    if r < 0 or r + oversample > N:
        raise ValueError("need 0 <= r and r + oversample <= N")
    w = op.mass.weights
    before = op.total_applies
    if r == 0:
        return LowRankApprox(np.zeros((N, 0)), np.zeros(0), np.zeros((N, 0)), 0, oversample)
    rng = np.random.default_rng(seed)
    # rows drawn first so sketches for different r share their leading columns
    Omega = rng.standard_normal((r + oversample, N)).T
    Y = np.column_stack([op.apply(Omega[:, j] / w) / w for j in range(Omega.shape[1])])
    Q, _ = np.linalg.qr(Y)
    # B = Q^T Phi, so B^T = Phi^T Q
    Bt = np.column_stack([op.apply_transpose(Q[:, j] / w) / w for j in range(Q.shape[1])])
    Ub, s, Vt = np.linalg.svd(Bt.T, full_matrices=False)
    U = Q @ Ub[:, :r]
    return LowRankApprox(U, s[:r], Vt[:r].T, op.total_applies - before, oversample)


def frobenius_error(dense_ref, approx) -> float:
    """||Phi - Phi_approx||_F / ||Phi||_F, swept column by column."""
    ref = np.asarray(dense_ref, dtype=float)
    N = ref.shape[1]
    if hasattr(approx, "to_dense"):
        get = None
        A = approx.to_dense()
    elif hasattr(approx, "matvec"):
        get = approx.matvec
    elif callable(approx):
        get = approx
    else:
        A = np.asarray(approx, dtype=float)
        get = None
    num = 0.0
    step = 64
    for j0 in range(0, N, step):
        cols = slice(j0, min(N, j0 + step))
        if get is None:
            block = A[:, cols]
        else:
            E = np.zeros((N, cols.stop - cols.start))
            E[np.arange(cols.start, cols.stop), np.arange(cols.stop - cols.start)] = 1.0
            block = get(E)
        num += np.sum((ref[:, cols] - block) ** 2)
    den = np.sum(ref ** 2)
    return float(np.sqrt(num / den)) if den > 0 else 0.0
