"""Symmetrization and negative-eigenvalue flipping for PSF approximations."""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .hmatrix import HodlrMatrix, factorize

DEFAULT_EPS_FLIP = -0.1
DENSE_LIMIT = 4096
BAND_FLOOR = 1e-3  # lowest band edge when eps_flip is 0


@dataclass
class SpdRepairReport:
    flipped_eigenvalues: list = field(default_factory=list)
    update_rank: int = 0
    eps_flip: float = DEFAULT_EPS_FLIP
    method: str = "dense"

    def to_dict(self):
        return {"flipped_eigenvalues": [float(v) for v in self.flipped_eigenvalues],
                "update_rank": int(self.update_rank), "eps_flip": float(self.eps_flip),
                "method": self.method}


class EigensolverError(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


def symmetrize(H: HodlrMatrix) -> HodlrMatrix:
    return H.symmetrized()


class LowRankUpdated:
    """A + Z diag(c) Z^T with A a HODLR matrix; exposes matvec and to_dense."""

    def __init__(self, A: HodlrMatrix, Z, c):
        self.A = A
        self.Z = np.asarray(Z, dtype=float).reshape(A.N, -1)
        self.c = np.asarray(c, dtype=float).ravel()

    @property
    def N(self):
        return self.A.N

    @property
    def rank(self):
        return len(self.c)

    def matvec(self, u):
        y = self.A.matvec(u)
        if self.rank:
            y = y + self.Z @ (self.c[:, None] * (self.Z.T @ u)) if np.ndim(u) == 2 \
                else y + self.Z @ (self.c * (self.Z.T @ u))
        return y

    __matmul__ = matvec

    def to_dense(self):
        return self.A.to_dense() + (self.Z * self.c) @ self.Z.T

    def add_hodlr(self, B: HodlrMatrix):
        return LowRankUpdated(self.A.add(B), self.Z, self.c)


class WoodburySolver:
    """Solve with (A + Z diag(c) Z^T) given a solver for A."""

    def __init__(self, A_solve, Z, c):
        self.A_solve = A_solve
        self.Z = Z
        self.c = np.asarray(c, dtype=float)
        if len(self.c):
            self.AZ = A_solve(Z)
            Cm = np.diag(1.0 / self.c) + Z.T @ self.AZ
            self.Cf = sla.lu_factor(Cm)

    def solve(self, b):
        x = self.A_solve(b)
        if len(self.c) == 0:
            return x
        return x - self.AZ @ sla.lu_solve(self.Cf, self.Z.T @ x)


def factorize_sum(op, R: HodlrMatrix = None):
    """Factorize op (+ R). ``op`` is a HodlrMatrix or a LowRankUpdated.

    With a low-rank term the HODLR part may be indefinite, so its leaves use LU
    and the update is folded in by Woodbury.
    """
    if isinstance(op, LowRankUpdated):
        base = op.A if R is None else op.A.add(R)
        if op.rank == 0:
            return factorize(base)
        F = factorize(base, spd=False)
        return WoodburySolver(F.solve, op.Z, op.c)
    base = op if R is None else op.add(R)
    return factorize(base)


def _dense_generalized(A_sym, R, eps_flip):
    A = A_sym.to_dense() if hasattr(A_sym, "to_dense") else np.asarray(A_sym, dtype=float)
    Rd = R.to_dense() if hasattr(R, "to_dense") else np.asarray(R, dtype=float)
    A = 0.5 * (A + A.T)
    Rd = 0.5 * (Rd + Rd.T)
    lam, U = sla.eigh(A, Rd)  # U^T R U = I
    sel = lam < eps_flip
    return lam[sel], U[:, sel], Rd


def _solver_op(F, n):
    return spla.LinearOperator((n, n), matvec=F.solve)


def _eigsh_partial(*args, **kw):
    """eigsh that keeps the converged pairs when ARPACK stops early."""
    try:
        return spla.eigsh(*args, **kw)
    except spla.ArpackNoConvergence as exc:
        if exc.eigenvalues is None or len(exc.eigenvalues) == 0:
            raise
        return exc.eigenvalues, exc.eigenvectors


def _lanczos_generalized(A_sym, R, eps_flip):
    """Generalized eigenpairs with lam < eps_flip by Krylov methods.

    Geometric bands [-2t, -t] tile (-bound, eps_flip) with bound >= |lam_min|;
    each band is searched by shift-invert on A - c R at its centre c, with k
    grown until the returned window spans the band. A final Rayleigh-Ritz
    step on the union refines the pairs and removes duplicates.
    """
    N = A_sym.N
    Rop = spla.LinearOperator((N, N), matvec=R.matvec)
    Aop = spla.LinearOperator((N, N), matvec=A_sym.matvec)
    k_cap = N - 2
    found = []
    # cover (-bound, eps_flip) by bands [-2t, -t] and search each from its centre.
    # bound >= |lam_min| from rho = max |lam| and lam_min(A) / lam_min(R) (valid when lam < 0)
    FR = factorize(R)
    rho = abs(_eigsh_partial(Aop, k=1, M=Rop, Minv=_solver_op(FR, N), which="LM", tol=1e-3,
                             return_eigenvectors=False)[0])
    a_min = _eigsh_partial(Aop, k=1, which="SA", tol=1e-3, return_eigenvectors=False)[0]
    r_min = _eigsh_partial(Rop, k=1, sigma=0.0, OPinv=_solver_op(FR, N), which="LM", tol=1e-3,
                           return_eigenvectors=False)[0]
    bound = 1.05 * min(rho, abs(min(a_min, 0.0)) / r_min)
    t = max(-eps_flip, BAND_FLOOR)
    while t < bound:
        c, r = -1.5 * t, 0.5 * t
        F = factorize(A_sym.add(R.scale(-c)), spd=False)
        k = min(k_cap, 10)
        while True:
            lam, U = _eigsh_partial(Aop, k=k, M=Rop, sigma=c, OPinv=_solver_op(F, N), which="LM",
                                    tol=1e-8, maxiter=20 * N)
            found.append(U[:, lam < eps_flip])
            if np.abs(lam - c).max() >= r or k >= k_cap:
                break
            k = min(k_cap, 2 * k)
        t *= 2.0
    U = np.hstack(found)
    if U.shape[1] == 0:
        return np.zeros(0), np.zeros((N, 0))
    # R-orthonormalize the union, then Rayleigh-Ritz on it
    G = U.T @ R.matvec(U)
    w, Q = np.linalg.eigh(0.5 * (G + G.T))
    keep = w > 1e-10 * w.max()
    B = U @ (Q[:, keep] / np.sqrt(w[keep]))
    T = B.T @ A_sym.matvec(B)
    lam, Y = np.linalg.eigh(0.5 * (T + T.T))
    U = B @ Y
    sel = lam < eps_flip
    return lam[sel], U[:, sel]


def flip_negative_eigs(A_sym, R, eps_flip=DEFAULT_EPS_FLIP, method=None):
    """Map generalized eigenvalues lam < eps_flip of (A_sym, R) to |lam|.

    Returns (LowRankUpdated operator, SpdRepairReport). The update is
    2 sum_j |lam_j| (R u_j)(R u_j)^T with R-orthonormal u_j.
    """
    if not -1.0 < eps_flip <= 0.0:
        raise ValueError("eps_flip must lie in (-1, 0]")
    N = A_sym.N
    method = method or ("dense" if N <= DENSE_LIMIT else "lanczos")
    report = SpdRepairReport(eps_flip=float(eps_flip), method=method)
    try:
        if method == "dense":
            lam, U, Rd = _dense_generalized(A_sym, R, eps_flip)
            RU = Rd @ U
        else:
            lam, U = _lanczos_generalized(A_sym, R, eps_flip)
            RU = R.matvec(U)
    except (np.linalg.LinAlgError, spla.ArpackError, spla.ArpackNoConvergence) as exc:
        raise EigensolverError(f"generalized eigensolver failed: {exc}", report) from exc
    report.flipped_eigenvalues = sorted(float(v) for v in lam)
    report.update_rank = len(lam)
    return LowRankUpdated(A_sym, RU, 2.0 * np.abs(lam)), report
